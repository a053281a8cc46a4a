import sys

from depad.cli import main

sys.exit(main())
