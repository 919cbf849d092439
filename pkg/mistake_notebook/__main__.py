import sys

from mistake_notebook.main import main

sys.exit(main())
