"""
csc4net - Unpaired cross-modal image synthesis with multi-layer convolutional sparse coding

Learns per-modality orthogonal filter banks by l4 maximization, aligns their
code distributions with a multi-layer MMD and an SPD-manifold fidelity term,
and carries source codes to the target modality through a learned associator.
"""

__version__ = "1.0.0"
__title__ = "csc4net"
__description__ = "Multi-layer convolutional sparse coding for unpaired cross-modal synthesis"
__author__ = "csc4net developers"
__license__ = "MIT"

# Public API exports
try:
    from .core.config import settings
    from .schemas.config import ModelConfig, PhantomSpec
    from .services.network import synthesize, train

    __all__ = [
        "__version__",
        "__title__",
        "__description__",
        "__author__",
        "__license__",
        "settings",
        "ModelConfig",
        "PhantomSpec",
        "train",
        "synthesize",
    ]
except ImportError:
    # Metadata stays importable without the numerical stack
    __all__ = [
        "__version__",
        "__title__",
        "__description__",
        "__author__",
        "__license__",
    ]
