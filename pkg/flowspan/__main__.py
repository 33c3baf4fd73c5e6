# Copyright (c) 2024 flowspan developers
"""Run the command line with ``python -m flowspan``."""

import sys

from .cli import main

sys.exit(main())
