"""Stochastic port-Hamiltonian systems: passivity, energy shaping and invariant measures."""

from .model import (
    Box,
    ControlLaw,
    ControlledSde,
    EnergyFunction,
    ModelError,
    SphsModel,
    output,
    quadratic_hamiltonian,
    validate,
)
from .generator import GeneratorContext, apply_adjoint, apply_generator, quadratic_case_summary

__version__ = "0.1.0"

__all__ = [
    "Box",
    "ControlLaw",
    "ControlledSde",
    "EnergyFunction",
    "GeneratorContext",
    "ModelError",
    "SphsModel",
    "apply_adjoint",
    "apply_generator",
    "output",
    "quadratic_case_summary",
    "quadratic_hamiltonian",
    "validate",
]
