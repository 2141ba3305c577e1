#!/usr/bin/env python3
"""rovis CLI - gen-data, train, infer and eval from a source checkout."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from rovis.cli import main


if __name__ == "__main__":
    sys.exit(main())
