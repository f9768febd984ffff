"""Deterministic language-model sidecar: embeddings and target scoring over HTTP."""
from .model import ByteLm, load_model
from .service import create_app

__version__ = "0.1.0"

__all__ = ["ByteLm", "create_app", "load_model"]
