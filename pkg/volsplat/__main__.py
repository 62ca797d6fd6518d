import sys

from volsplat.main import main

sys.exit(main())
