"""
Environment-driven defaults for the whisker simulation pipeline.
"""
import os
from dotenv import load_dotenv

# Load environment variables from .env file if it exists
load_dotenv()

# Logging Configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
WHISKER_LOG_FILE = os.getenv("WHISKER_LOG_FILE", "whisker_sim.log")

# Run Configuration
WHISKER_OUTPUT_DIR = os.getenv("WHISKER_OUTPUT_DIR", "runs")
WHISKER_MASTER_SEED = int(os.getenv("WHISKER_MASTER_SEED", "7"))

# Parallel sweep workers (1 = run in-process)
WHISKER_WORKERS = int(os.getenv("WHISKER_WORKERS", "1"))
