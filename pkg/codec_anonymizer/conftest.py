# Puts this directory on sys.path so tests import `modules.*` / `utils.*`
# exactly as main.py does when run from here.
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
