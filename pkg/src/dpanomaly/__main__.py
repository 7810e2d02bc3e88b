import sys

from dpanomaly.cli import main

sys.exit(main())
