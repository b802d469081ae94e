"""Deterministic federated-learning simulator for distributed multi-target backdoor attacks.

Frequency-domain (DCT) triggers, backdoor replay, model-replacement
scaling, robust aggregation defenses and stealth metrics on a small
NumPy CNN.
"""

from .attack import (
    AttackerSpec, ConfigError, PoisonedBatch, PoolUnderflow, ReplayPool, amplify, attacker_local_train,
    compose_counts, poison_batch_direct, poison_batch_pooled,
)
from .classifier import TinyConvClassifier
from .config import ExperimentConfig, dump_config, load_config, parse_config
from .data import Dataset, PartitionPlan, dirichlet_partition, read_raw_bin, synth_shapes, write_raw_bin
from .experiment import ablate_replay, make_checkpoint, run_experiment, sweep
from .federation import (
    ClientUpdate, DefenseConfig, FedConfig, Federation, FederatedBackdoorSimulator, RoundRecord,
    clipped_clustering_agg, dp_fedavg_agg, fedavg, sequential_schedule,
)
from .metrics import StealthReport, psnr, ssim, stealth_report
from .numkernel import ModelArch, NumericalError, SgdConfig, forward, loss_and_grad, sgd_step, tiny_conv
from .triggers import (
    FrequencyTrigger, PatchTrigger, PatchTriggerSpec, TriggerSpec, apply_freq_trigger, apply_patch_trigger,
    dct2, idct2,
)

__version__ = "0.1.0"
