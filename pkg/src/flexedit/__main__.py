import sys

from flexedit.cli import main

sys.exit(main())
