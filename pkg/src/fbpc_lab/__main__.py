import sys

from fbpc_lab.cli import main

sys.exit(main())
