"""Variational sequence labeling with CTC-style alignment marginalization.

The package is organized as a small numpy-backed stack:

- :mod:`vctc.numerics` — log-space arithmetic and a counter-based RNG
- :mod:`vctc.autodiff` — reverse-mode scalar-output autodiff over float64 arrays
- :mod:`vctc.ctc` — alignment lattice, likelihood, occupancy, gradients
- :mod:`vctc.variational` — diagonal Gaussians, reparameterized sampling, KL terms
- :mod:`vctc.losses` — training objectives combining likelihood and KL pieces
- :mod:`vctc.models` — the five sequence-model variants
- :mod:`vctc.decoding` — best-path and prefix beam search, n-gram LM fusion
- :mod:`vctc.harness` — synthetic data, training loop, evaluation, reporting, CLI
"""

from .autodiff import (
    BiGruLayer,
    LinearLayer,
    ParamStore,
    Tensor,
    backward,
    load_checkpoint,
    save_checkpoint,
)
from .ctc import (
    CtcLattice,
    InfeasibleTargetError,
    Vocab,
    brute_force_log_likelihood,
    build_lattice,
    collapse,
    ctc_log_likelihood,
    ctc_loss_node,
    occupancy,
)
from .decoding import (
    BeamConfig,
    DecodeResult,
    NGramLm,
    beam_search_decode,
    best_path_decode,
    edit_distance,
    error_rate,
)
from .losses import LossBreakdown, kl_warmup_factor, loss_ci, loss_ctc, loss_markov
from .models import ModelConfig, Variant, forward, init_params, sequence_loss
from .numerics import Rng, log_add, log_sum_exp
from .variational import DiagGaussian, chain_kl, expected_kl_markov, kl_diag_gauss, reparameterize

__version__ = "0.1.0"

__all__ = [
    "BeamConfig",
    "BiGruLayer",
    "CtcLattice",
    "DecodeResult",
    "DiagGaussian",
    "InfeasibleTargetError",
    "LinearLayer",
    "LossBreakdown",
    "ModelConfig",
    "NGramLm",
    "ParamStore",
    "Rng",
    "Tensor",
    "Variant",
    "Vocab",
    "backward",
    "beam_search_decode",
    "best_path_decode",
    "brute_force_log_likelihood",
    "build_lattice",
    "chain_kl",
    "collapse",
    "ctc_log_likelihood",
    "ctc_loss_node",
    "edit_distance",
    "error_rate",
    "expected_kl_markov",
    "forward",
    "init_params",
    "kl_diag_gauss",
    "kl_warmup_factor",
    "load_checkpoint",
    "log_add",
    "log_sum_exp",
    "loss_ci",
    "loss_ctc",
    "loss_markov",
    "occupancy",
    "reparameterize",
    "save_checkpoint",
    "sequence_loss",
    "__version__",
]
