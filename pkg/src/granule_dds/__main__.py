import sys

from granule_dds.cli import main

sys.exit(main())
