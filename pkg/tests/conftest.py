import sys
from pathlib import Path

# test-local helper modules (oracles, fd) live next to the tests
sys.path.insert(0, str(Path(__file__).resolve().parent))
