"""Milestoning for elliptic diffusions.

Build milestone sets (planar, isocommittor, or curve-based), estimate jump
statistics from long or cell-confined trajectories, and compute mean first
passage times by the milestoning linear system, the exact kernel equation,
direct simulation, or 1D quadrature.
"""

__version__ = "0.1.0"

from .committor import (
    Ball, CommittorField, DisconnectedMilestoneError, HalfSpace,
    IrregularLevelError, LevelSetMesh, MilestoneDensity, analytic_q,
    committor_milestones, density_field, extract_level_set, milestone_density,
    solve_backward_committor, solve_forward_committor, surface_integral_Z,
)
from .engine import BlowUpError, CensoredError, StepTooLargeError
from .estimate import (
    KernelEstimate, TransitionStats, estimate_cells, estimate_kernel,
    estimate_long, hit_histogram, ks_distance, memory_diagnostic,
    stationary_index,
)
from .grids import Grid, read_binary_field, write_binary_field
from .integrate import HitEvent, TrajectoryState, em_step, run_in_cell, run_until_hit
from .mfpt import (
    EmpiricalMFPT, ExactMFPTField, MFPTSolution, mfpt_empirical,
    mfpt_quadrature_1d, solve_exact, solve_optimal,
)
from .milestones import (
    CoarseChain, GridLevel, LevelFunction, LinearLevel, MilestoneSet,
    assign_index, extract_chain, linear_milestones,
)
from .model import (
    DensityField, DiffusionModel, free_brownian, invariant_density,
    make_benchmark, make_overdamped_langevin, solve_invariant_density,
    stationary_current,
)
from .rng import RngStream, substream
from .surfaces import (
    Curve, identity_rescale, logistic_rescale, milestones_from_curve,
    project, smoothed_committor, smoothed_committor_field,
)
