"""Shielded scenario-tree planning around a Bayesian model of a human driver.

The pieces, bottom up: joint dynamics, a grid safety certificate and its
shield, the Boltzmann human model and belief filter, a tabular QMDP
surrogate, the sparse scenario tree and the tree QP, plus a closed-loop
simulator.
"""
from .config import Config, load_config
from .reachability import SafetyCertificate, compute_certificate, failure_margin
from .sim import load_caches, run_trial

__all__ = ["Config", "load_config", "SafetyCertificate", "compute_certificate",
           "failure_margin", "load_caches", "run_trial"]
__version__ = "0.1.0"
