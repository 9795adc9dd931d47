import sys

from hmkg.cli import main

sys.exit(main())
