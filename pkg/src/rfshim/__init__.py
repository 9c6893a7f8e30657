"""Desk-scale RF shimming toolkit.

Synthetic multi-channel B1+ slices, magnitude-least-squares shimming by
variable exchange and by restarted Adam, a learned residual-network shim
predictor, and a non-uniformity screen over the resulting field maps.
"""

__version__ = "0.1.0"

from .errors import (
    FileChecksumError,
    FileFormatError,
    FileTruncatedError,
    FileVersionError,
    GenerationShortfallError,
    InvalidArgumentError,
    InvalidGeometryError,
    RankDeficiencyError,
    ShimError,
)
from .fields import (
    Dataset,
    MultiChannelField,
    SliceRecord,
    augment_rotate,
    generate_dataset,
    generate_slice,
    make_coil_geometry,
    make_disk_mask,
    make_target,
    simulate_channel_fields,
)
from .dataset_io import load_dataset, save_dataset
from .objective import (
    ObjectiveParams,
    ShimWeights,
    combine,
    mls_objective,
    objective_gradient,
    quadrature_weights,
    rmse_percent,
)
from .solvers import (
    AdamState,
    SolveReport,
    adam_solve,
    adam_step,
    brute_force_phase_search,
    mls_solve,
    restart_search,
    solve_regularized_ls,
)
