import sys
import os

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.app.cli import main

if __name__ == '__main__':
    sys.exit(main())
