import sys

from mitml.cli import main

sys.exit(main())
