import sys

from latentflow.cli import main

sys.exit(main())
