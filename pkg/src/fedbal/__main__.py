import sys

from fedbal.cli import main

sys.exit(main())
