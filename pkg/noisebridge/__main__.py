import sys

from noisebridge.cli import main

sys.exit(main())
