"""Meta-learned input-dependent noise for gradient-based few-shot learning."""

from .autodiff import NonFiniteError, Tensor, constant, grad, no_grad, tensor
from .baselines import RegularizerConfig
from .config import ConfigError, RunConfig, load_config, parse_config
from .eval import AttackConfig, accuracy_ci, boundary_project, pgd_attack
from .metalearn import (
    EpisodeBatch,
    Learner,
    MetaConfig,
    MetaParams,
    MetaTrainer,
    NumericalAbort,
    RunRecord,
    inner_adapt,
    meta_step,
    meta_test,
)
from .nn import Network, conv4_network, dense_network, forward, init_params, load_checkpoint, save_checkpoint
from .noise import NoiseConfig, NoiseGenerator
from .tasks import Episode, TaskDistribution, ingest_image_dir, synthetic2d

__version__ = "0.1.0"
