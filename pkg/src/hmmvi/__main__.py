import sys

from hmmvi.cli import main

sys.exit(main())
