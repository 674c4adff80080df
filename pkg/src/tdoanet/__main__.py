import sys

from tdoanet.cli import main

sys.exit(main())
