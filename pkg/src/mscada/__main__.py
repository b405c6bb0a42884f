import sys

from mscada.cli import main

sys.exit(main())
