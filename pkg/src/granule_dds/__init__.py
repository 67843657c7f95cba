"""Fine-grained data delivery: requests, a content catalog, staging,
transform and notification agents, and a simulated tape carousel."""

__version__ = "0.1.0"
