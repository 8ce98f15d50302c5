import sys

from sparsedag.cli import main

sys.exit(main())
