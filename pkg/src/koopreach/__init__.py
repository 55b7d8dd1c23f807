"""Koopman surrogates, lifted LQR tracking and conformalized reachable sets."""
from .boundprop import AffineBoundPair, ReachTube, bound_network, compute_krs, concretize
from .conformal import ConformalBounds, calibrate, conformal_quantile, inflate
from .controller import GainSchedule, LqrWeights, ReferencePlan, make_plan, riccati_gains
from .dynamics import Box, DynamicsSystem, Trajectory, make_system
from .experiment import ExperimentConfig, RunReport, avg_log_volume, run_pipeline
from .koopman import KoopmanModel, TrainingConfig, train

__version__ = "0.1.0"
