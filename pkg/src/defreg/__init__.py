"""Self-supervised deformable 3D registration engine.

Per-pair optimization of a dense displacement field under windowed
normalized cross-correlation plus displacement-gradient smoothness, with a
free-form field or a small convolutional encoder/decoder as the
parameterization.  Submodules: volume, warp, loss, model, register,
evaluate, synth, cli.

Submodules import lazily so the command line can pin thread counts via
environment variables before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "volume",
    "warp",
    "loss",
    "model",
    "register",
    "evaluate",
    "synth",
    "cli",
)

__all__ = ["__version__", *_SUBMODULES]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
