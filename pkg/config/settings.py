"""
Environment settings for the Neural Bloom Filter workbench
"""
import os
import logging
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


class Settings:
    """Application settings loaded from environment variables"""

    def __init__(self):
        self.BENCH_OUT = os.getenv('NBF_BENCH_OUT', 'runs')
        self.LOG_LEVEL = os.getenv('NBF_LOG_LEVEL', 'INFO').upper()
        self.WORKERS_STR = os.getenv('NBF_WORKERS', '1')

        self.WORKERS = self._parse_workers()

        # Validate settings
        self._validate_settings()

    def _parse_workers(self) -> int:
        """Parse the default worker count from the environment"""
        try:
            return int(self.WORKERS_STR.strip())
        except ValueError:
            logger.error("Invalid NBF_WORKERS format. Use a positive integer.")
            raise ValueError(f"NBF_WORKERS must be an integer, got {self.WORKERS_STR!r}")

    def _validate_settings(self):
        """Validate that settings hold usable values"""
        if self.WORKERS < 1:
            raise ValueError("NBF_WORKERS must be >= 1")
        if self.LOG_LEVEL not in LOG_LEVELS:
            raise ValueError(f"NBF_LOG_LEVEL must be one of {LOG_LEVELS}")
        if not self.BENCH_OUT:
            raise ValueError("NBF_BENCH_OUT must not be empty")

    @property
    def log_level(self) -> int:
        return getattr(logging, self.LOG_LEVEL)


# Global settings instance
settings = Settings()
