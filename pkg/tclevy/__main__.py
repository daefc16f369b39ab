import sys

from tclevy.cli import main

sys.exit(main())
