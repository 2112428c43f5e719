import sys

from hierseg.cli import main

sys.exit(main())
