import sys

from qgrom.cli import main

sys.exit(main())
