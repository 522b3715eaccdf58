"""Normalizing-constant estimation for strongly log-concave targets.

Annealed multilevel Monte Carlo over underdamped Langevin chains (exponential
integrator or randomized midpoint), compared against a MALA baseline. Ground
truth comes from the oracles module; adversarial targets from hardness.
"""
from .annealing import PipelineSettings, RunReport, run_mala_pipeline, run_method, run_pipeline
from .potentials import make_diag_quadratic, make_gaussian

__all__ = ["PipelineSettings", "RunReport", "run_pipeline", "run_mala_pipeline", "run_method",
           "make_gaussian", "make_diag_quadratic"]
__version__ = "0.1.0"
