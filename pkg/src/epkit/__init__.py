"""epkit: path-checkpointed classifiers, adversarial geometry, and exact
path-kernel model representations."""

__version__ = "0.1.0"

from .backend import backend_name  # noqa: F401
