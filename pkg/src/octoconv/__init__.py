"""Group-equivariant 3D convolutional networks for nodule classification."""

from ._runtime import configure as _configure

_configure()

__version__ = "0.1.0"
