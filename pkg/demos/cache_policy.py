"""How access history stretches a cached item's lifetime.

The lifetime is base * (1 + alpha * f), where f sums exp(-lambda * age) over
past accesses, clamped to [min, max]. Busy items live longer; once access
stops, the lifetime decays back to the base.

Run: python3 demos/cache_policy.py
"""

from granule_dds.cache_policy import UsageState, compute_lifetime, record_access, should_evict

DAY = 86400.0

quiet = UsageState("quiet")
busy = UsageState("busy")
for hour in range(48):
    busy = record_access(busy, hour * 3600.0)
quiet = record_access(quiet, 0.0)

print(f"{'day':>4}{'quiet':>10}{'busy':>10}   (lifetime in days)")
for day in (2, 3, 5, 10, 20):
    now = day * DAY
    print(f"{day:>4}{compute_lifetime(quiet, now) / DAY:>10.2f}"
          f"{compute_lifetime(busy, now) / DAY:>10.2f}")

# Pool pressure shortens the idle time an item may sit before eviction.
now = 1.0 * DAY
for pressure in (0.0, 0.5, 0.9):
    print(f"pressure {pressure:.1f}: evict quiet item at day 1? "
          f"{should_evict(quiet, now, pressure)}")
