import sys

from drasmil.cli import main

sys.exit(main())
