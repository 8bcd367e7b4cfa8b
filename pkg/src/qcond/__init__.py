"""Conditioned dynamics of a continuously measured particle.

Quantum and classical evolution of one degree of freedom under isolated,
unconditioned-open, and measurement-conditioned dynamics, plus the
diagnostics built on top of them: trajectory divergence exponents,
measurement-regime classification, and feedback cooling.
"""

from .core import (
    ClassicalEnsemble,
    DegenerateEnsembleError,
    GridResolutionError,
    MomentSet,
    PositionGrid,
    PositivityError,
    QcondError,
    QuantumState,
    SupportEscapeError,
    SystemSpec,
    WignerGrid,
    force_moments,
    gaussian_state,
    gaussian_wavefunction,
    moments,
    wigner_transform,
)
from .noise import NoisePath, generate, substream_rng
from .qdyn import (
    DensityStepper,
    MeasurementRecord,
    MeasurementSpec,
    PureStepper,
    filter_with_record,
    isolated_step,
    moyal_rhs,
    sme_step,
    unconditional_step,
)
from .cdyn import ks_step, liouville_step, newton_trajectory, resample
from .cumulant import GaussianBelief, belief_vs_full_compare, centroid_step
from .qct import (
    RegimeReport,
    action_scale,
    evaluate_along_trajectory,
    localization_margin,
    lownoise_margin_classical,
    quantum_window,
)
from .lyap import LyapunovConfig, LyapunovSeries, ensemble_lyapunov, one_over_t_fit, paired_run
from .feedback import CoolingResult, FeedbackPolicy, cooling_experiment, direct_control, estimator_control

__version__ = "0.1.0"
