"""
ElastoInverse - elastic coefficient reconstruction from internal displacement data
Command-line entry point
"""

import sys

from src.api.cli import main
from src.core.config import settings
from src.utils.logger import setup_logging

if __name__ == "__main__":
    setup_logging(settings.LOG_LEVEL, settings.LOG_FILE, settings.LOG_DIR)
    sys.exit(main())
