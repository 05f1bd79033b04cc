"""Object-centric image editing by per-step latent optimization and adaptive latent blending."""
from flexedit.backend import Latent, LatentTrajectory, NoiseSchedule, TextEmbedding, forward_stage
from flexedit.constraints import TargetSpec
from flexedit.editor import EditConfig, EditResult, EditSpec, edit
from flexedit.toy import ToyBackend, ToyCodec, toy_backend

__version__ = "0.1.0"
