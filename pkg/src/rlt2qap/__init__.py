"""QAP lower bounds by RLT2 Lagrangian dual ascent, plus exact branch-and-bound."""
from .instance import (Permutation, QapInstance, evaluate_objective, generate_instance,
                       load_fixture, parse_qaplib, parse_solution)
from .lap import LapBatch, LapProblem, LapResult, solve_batch, solve_lap
from .engine import AscentConfig, BoundReport, CoefficientStore, init_coefficients, run_ascent
from .bnb import BnbConfig, BnbResult, solve

__all__ = [
    "Permutation", "QapInstance", "evaluate_objective", "generate_instance", "load_fixture",
    "parse_qaplib", "parse_solution", "LapBatch", "LapProblem", "LapResult", "solve_batch",
    "solve_lap", "AscentConfig", "BoundReport", "CoefficientStore", "init_coefficients",
    "run_ascent", "BnbConfig", "BnbResult", "solve",
]
