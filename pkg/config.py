from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from pathlib import Path

__version__ = "0.1.0"


class Settings(BaseSettings):
    """Runtime settings with Pydantic native environment parsing"""

    model_config = SettingsConfigDict(
        env_file='.env',
        env_file_encoding='utf-8',
        case_sensitive=False,
        extra='ignore',
        validate_assignment=True,
    )

    log_level: str = Field(
        default="INFO",
        description="Logging level"
    )

    # Data locations
    data_dir: Path = Field(
        default=Path("./data"),
        description="Directory holding the IDX dataset files"
    )

    output_dir: Path = Field(
        default=Path("./outputs"),
        description="Default directory for models, reports and exported components"
    )

    train_images: str = Field(default="train-images-idx3-ubyte", description="Training image file name")
    train_labels: str = Field(default="train-labels-idx1-ubyte", description="Training label file name")
    test_images: str = Field(default="t10k-images-idx3-ubyte", description="Test image file name")
    test_labels: str = Field(default="t10k-labels-idx1-ubyte", description="Test label file name")

    # Attack defaults
    attack_steps: int = Field(
        default=100,
        ge=1,
        le=100000,
        description="Projected gradient steps per restart"
    )

    attack_restarts: int = Field(
        default=5,
        ge=1,
        le=1000,
        description="Random restarts per sample"
    )

    # Model initialisation
    temperature_sample_size: int = Field(
        default=1000,
        ge=2,
        description="Data points used for the pairwise distance statistics of the initial temperature"
    )

    pgm_side: int = Field(
        default=28,
        gt=0,
        description="Side length of exported component images"
    )

    @field_validator('log_level')
    @classmethod
    def validate_log_level(cls, v):
        level = str(v).upper()
        if level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ValueError(f'Unknown log level {v}')
        return level

    @field_validator('data_dir', 'output_dir')
    @classmethod
    def resolve_paths(cls, v):
        """Resolve relative paths to absolute paths"""
        if v is None:
            return v
        return Path(v).resolve()


settings = Settings()
