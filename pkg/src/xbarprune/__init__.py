"""Structure-pruned neural networks on non-ideal memristive crossbars.

Modules
-------
circuit   exact parasitic-network model of one crossbar tile
mapping   weight <-> conductance conversion, tiling, column rearrangement
pruning   structured sparsity masks, compaction transforms, compression rate
nn        minimal trainable CNN with prune-at-init and WCT
config    experiment configuration, defaults and hashing
modelio   model / dataset directory formats
runner    sweep orchestration and CSV reports
cli       command line entry points
"""

__version__ = "0.1.0"

from .circuit import (
    CrossbarParams,
    CrossbarSystem,
    NfReport,
    SolveResult,
    apply_device_variation,
    default_params,
    extract_effective_conductance,
    ideal_mac,
    nonideality_factor,
    solve_crossbar,
)

__all__ = [
    "CrossbarParams",
    "CrossbarSystem",
    "NfReport",
    "SolveResult",
    "apply_device_variation",
    "default_params",
    "extract_effective_conductance",
    "ideal_mac",
    "nonideality_factor",
    "solve_crossbar",
    "__version__",
]
