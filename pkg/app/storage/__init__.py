from app.storage.checkpoints import Checkpoint, load_checkpoint, load_model, save_checkpoint
from app.storage.volumes import DwiStudy, IntensityScale, Volume

__all__ = [
    "Checkpoint",
    "DwiStudy",
    "IntensityScale",
    "Volume",
    "load_checkpoint",
    "load_model",
    "save_checkpoint",
]
