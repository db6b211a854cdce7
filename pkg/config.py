import logging
import os
from typing import Optional

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Settings:
    app_name: str = "EVP Toolkit"
    app_version: str = "0.1.0"
    debug: bool = False

    def __init__(self):
        # Load from environment variables - WITH .env SUPPORT
        self.app_name = os.getenv("APP_NAME", "EVP Toolkit")
        self.app_version = os.getenv("APP_VERSION", "0.1.0")
        self.debug = os.getenv("DEBUG", "false").lower() == "true"
        self.log_level = os.getenv("EVP_LOG_LEVEL", "INFO").upper()

        # Runs
        self.output_root = os.getenv("EVP_OUTPUT_ROOT", "runs")
        threads_env = os.getenv("EVP_NUM_THREADS")
        self.num_threads = int(threads_env) if threads_env else 1

        # Service
        self.serve_checkpoint = os.getenv("EVP_SERVE_CHECKPOINT", "")
        max_file_env = os.getenv("MAX_FILE_SIZE")
        self.max_upload_size = int(max_file_env) if max_file_env else 10 * 1024 * 1024


settings = Settings()


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(level=(level or settings.log_level), format=LOG_FORMAT)
