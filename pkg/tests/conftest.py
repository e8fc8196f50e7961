import sys
from pathlib import Path

# Make sibling test helpers (packet_gen, oracles) importable.
sys.path.insert(0, str(Path(__file__).parent))
