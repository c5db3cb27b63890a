import sys
from pathlib import Path

# make sibling oracle/helper modules importable from any test
sys.path.insert(0, str(Path(__file__).parent))
