from ._version import __version__
from .common.config import HandNeRFSettings, load_settings
from .common.errors import HandNeRFError
from .formats import Checkpoint, Scene, load_checkpoint, load_scene, save_checkpoint
from .metrics import EvalMode, EvalReport, evaluate
from .networks import GradientAccumulator, MlpSpec, ParameterStore, backward, mlp_forward
from .radiance import HandNeRF
from .rendering import render_image
from .training import ablation, pose_adapt, train
