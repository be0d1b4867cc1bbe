"""numpy-facing surface of the sparse masked-autoencoder core."""

try:
    from . import _affmae as _impl
    from ._affmae import *  # noqa: F401,F403
except ImportError:  # build-tree layout: extension lives next to the package dir
    import _affmae as _impl
    from _affmae import *  # noqa: F401,F403

__all__ = [n for n in dir(_impl) if not n.startswith("_")]
__version__ = "0.1.0"
