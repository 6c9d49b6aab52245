import sys

from nkscale.cli import main

sys.exit(main())
