import sys

from rankshield.cli import main

sys.exit(main())
