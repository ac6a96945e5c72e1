import sys

from mppa.cli import main

sys.exit(main())
