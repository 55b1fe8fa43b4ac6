import sys

from dynlite.cli import main

sys.exit(main())
