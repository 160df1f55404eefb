import logging
import logging.handlers
import os
import sys
from typing import Optional, Sequence

from app.cli import build_parser
from app.core.errors import ShuffleUNetError
from app.core.settings import Settings, get_settings


# Configure logging
def setup_logging(settings: Settings):
    """Configure application-wide logging"""
    log_level = os.getenv("LOG_LEVEL", settings.log_level).upper()

    # Create logs directory if it doesn't exist
    os.makedirs(settings.log_dir, exist_ok=True)

    # Configure root logger
    logging.basicConfig(
        level=getattr(logging, log_level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            # Console handler; stdout is left to command output
            logging.StreamHandler(sys.stderr),
            # File handler - rotates daily at midnight, keeps 30 days
            logging.handlers.TimedRotatingFileHandler(
                os.path.join(settings.log_dir, "shuffleunet.log"),
                when="midnight",
                interval=1,
                backupCount=30,
                encoding="utf-8",
            ),
        ],
        force=True,
    )

    # Set specific log levels for noisy libraries
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("nibabel").setLevel(logging.WARNING)

    logger = logging.getLogger(__name__)
    logger.debug(f"Logging configured at {log_level} level")
    return logger


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = get_settings()
    logger = setup_logging(settings)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logger.info(f"Running {args.command}")
        return args.func(args, settings)
    except ShuffleUNetError as e:
        logger.error(f"✗ {e.detail}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
