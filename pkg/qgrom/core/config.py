import os
from dotenv import load_dotenv

# Loading environment variables from .env file
load_dotenv()


def _flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in {"1", "true", "yes", "on"}


class Settings:
    # Artifact storage
    DATA_DIR: str = os.getenv("QGROM_DATA_DIR", "data")
    MANIFEST_NAME: str = "rom-manifest.json"
    MANIFEST_PATH: str = os.getenv("QGROM_MANIFEST", "")

    # Logging
    LOG_LEVEL: str = os.getenv("QGROM_LOG_LEVEL", "INFO")

    # Linear solver
    SOLVER_TOL: float = float(os.getenv("QGROM_SOLVER_TOL", 1e-8))
    SOLVER_MAX_ITER_FACTOR: int = int(os.getenv("QGROM_SOLVER_MAX_ITER_FACTOR", 10))
    PROGRESS_EVERY: int = int(os.getenv("QGROM_PROGRESS_EVERY", 1000))

    # Reduction
    N_MODES: int = int(os.getenv("QGROM_N_MODES", 10))
    RPOD_OVERSAMPLE: int = int(os.getenv("QGROM_RPOD_OVERSAMPLE", 75))
    RPOD_POWER: int = int(os.getenv("QGROM_RPOD_POWER", 1))

    # LSTM
    LOOKBACK: int = int(os.getenv("QGROM_LOOKBACK", 3))
    DETERMINISTIC: bool = _flag("QGROM_DETERMINISTIC", "1")

    # API Configuration
    API_HOST: str = os.getenv("QGROM_API_HOST", "0.0.0.0")
    API_PORT: int = int(os.getenv("QGROM_API_PORT", 8000))

    def get_data_dir(self) -> str:
        """Artifact root, re-read so tests and the CLI can redirect it per process"""
        return os.getenv("QGROM_DATA_DIR", self.DATA_DIR)

    def get_manifest_path(self) -> str:
        """Manifest served by the API; defaults to the one under the data root"""
        path = os.getenv("QGROM_MANIFEST", self.MANIFEST_PATH)
        if path:
            return path
        return os.path.join(self.get_data_dir(), self.MANIFEST_NAME)


# Create a global settings instance
settings = Settings()
