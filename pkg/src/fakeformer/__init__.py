"""FakeFormer: a ViT deepfake detector guided by vulnerable-patch attention, at desk scale."""
from .model import FAKEFORMER_B, FAKEFORMER_S, TINY, ModelConfig, ModelOutput, ModelParams, forward, init_params
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "FAKEFORMER_B",
    "FAKEFORMER_S",
    "TINY",
    "ModelConfig",
    "ModelOutput",
    "ModelParams",
    "TrainConfig",
    "forward",
    "init_params",
    "train",
]
