"""
Trans-PEFT Lab - Configuration
Process-level settings for the transferable-PEFT experiment stack
"""
import os
from dataclasses import dataclass

from dotenv import load_dotenv

load_dotenv()


@dataclass
class Config:
    # Output
    OUTPUT_ROOT: str = os.getenv("TRANSPEFT_OUTPUT_ROOT", "runs")

    # Numerics
    PRECISION: str = os.getenv("TRANSPEFT_PRECISION", "float32")  # float32, float64

    # Workers
    JOBS: int = int(os.getenv("TRANSPEFT_JOBS", "1"))

    # Logging
    DEBUG: bool = os.getenv("DEBUG", "false").lower() == "true"
    LOG_FORMAT: str = os.getenv(
        "TRANSPEFT_LOG_FORMAT", "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )


config = Config()
