import sys

from xmodal.harness.cli import main

sys.exit(main())
