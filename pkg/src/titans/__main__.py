from titans.cli import main
import sys

sys.exit(main())
