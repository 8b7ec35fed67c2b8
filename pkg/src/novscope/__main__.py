import sys

from novscope.cli import main

sys.exit(main())
