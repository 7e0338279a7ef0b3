"""Infer ODE parameters that place bifurcations at target control conditions."""
from .errors import *  # noqa: F401,F403
from .model import Derivative, ModelDef, StatePoint, Transform, differentiate, evaluate  # noqa: F401
from .models import get_model  # noqa: F401

__version__ = "0.1.0"
