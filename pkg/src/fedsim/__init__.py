"""Desk-scale federated learning simulator with prototype-contrastive
training, baselines, and a reproducible experiment harness."""

__version__ = "0.1.0"

from . import errors  # noqa: F401
from .augment import AugmentPolicy, Sample, make_views  # noqa: F401
from .autodiff import GradTape, Tensor, backward, sgd_step  # noqa: F401
from .data import (ClientDataset, DomainSpec, PartitionPlan,  # noqa: F401
                   SyntheticConfig, gen_synthetic, parse_idx, partition)
from .federation import (ClientState, LocalSpec, ServerState,  # noqa: F401
                         aggregate_models, local_training, run, run_round)
from .harness import (ExperimentConfig, MetricsRow, Summary,  # noqa: F401
                      evaluate, load_config, run_experiment)
from .losses import (LossConfig, LossReport, apc_loss,  # noqa: F401
                     cosine_sim, cross_entropy, fedproto_reg, total_loss)
from .model import (Model, ModelConfig, classify, encode,  # noqa: F401
                    flatten_params, init_model, unflatten_params)
from .prototypes import (PrototypeSet, aggregate_global,  # noqa: F401
                         local_prototypes, mean_feature)
from .wire import RoundMessage, decode, encode as encode_message  # noqa: F401
