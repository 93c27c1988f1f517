"""Optimal commutation of switched reluctance motors for sampled-data position control."""
from .motor import TorqueGainModel, default_model, load_model, validate_model
from .commutation import ConventionalTsf, CommutationTable, TableCommutation, commute
from .ripple import assemble, solve, per_point_lp
from .gp import fit_commutation, load_gp, save_gp

__version__ = "0.1.0"
