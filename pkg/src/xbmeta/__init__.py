"""Cross-batch first-order meta-learning with Gaussian weight averaging, on a synthetic bias benchmark."""

from .core import Batch, SimilarityClassifier, init_params, loss_and_grad
from .data import DatasetSpec, generate_dataset
from .ensemble import GwaState, gwa_finalize, gwa_update
from .meta import MetaStepConfig, MetaTask, fomaml_step, plain_step
from .metrics import evaluate, harmonic_mean
from .params import ParamVector
from .train import TrainConfig

__version__ = "0.1.0"
