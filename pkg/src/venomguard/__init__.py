"""Proactive defense against face forgery by poisoning the forger's training data."""

from ._validation import ConfigurationError, ContractViolation, ShapeError, TrainingAbort
from .estimators import AttributeEditor, EditingDefense, LandmarkTranslator, ReenactmentDefense

__version__ = "0.1.0"

__all__ = [
    "AttributeEditor",
    "ConfigurationError",
    "ContractViolation",
    "EditingDefense",
    "LandmarkTranslator",
    "ReenactmentDefense",
    "ShapeError",
    "TrainingAbort",
]
