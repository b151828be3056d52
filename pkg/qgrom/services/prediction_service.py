import logging
import threading
from typing import Optional

import numpy as np

from qgrom.core.config import settings
from qgrom.core.errors import InvalidArgumentError
from qgrom.services import rom_pipeline
from qgrom.services.rom_pipeline import RomArtifacts

logger = logging.getLogger(__name__)


class PredictionService:
    """Serves online reconstructions from a trained manifest, loaded on first use."""

    def __init__(self, manifest_path: Optional[str] = None):
        self.manifest_path = manifest_path
        self.artifacts: Optional[RomArtifacts] = None
        self._lock = threading.Lock()

    def load(self) -> RomArtifacts:
        with self._lock:
            if self.artifacts is None:
                path = self.manifest_path or settings.get_manifest_path()
                try:
                    self.artifacts = rom_pipeline.load_artifacts(path)
                    logger.info(f"Loaded ROM artifacts {self.artifacts.fingerprint} from {path}")
                except Exception as e:
                    logger.error(f"Failed to load manifest {path}: {e}")
                    raise
            return self.artifacts

    def is_loaded(self) -> bool:
        return self.artifacts is not None

    def nearest(self, mu):
        artifacts = self.load()
        k = rom_pipeline.nearest_sample(mu, artifacts.samples)
        return k, artifacts.samples[k]

    def predict(self, variable: str, mu, horizon_steps: Optional[int] = None):
        """Time-averaged reconstruction over the prediction window (or its first steps)."""
        artifacts = self.load()
        horizon = rom_pipeline.horizon_times(artifacts.plan)
        if horizon_steps is not None:
            horizon = horizon[:horizon_steps]
        if horizon.size == 0:
            raise InvalidArgumentError("empty prediction horizon")
        k, field = rom_pipeline.reconstruct_mean(artifacts, variable, np.asarray(mu, dtype=float), horizon)
        return k, artifacts.samples[k], field


# Create a global prediction service instance
prediction_service = PredictionService()
