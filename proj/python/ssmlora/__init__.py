"""Low-rank adapters chained layer to layer through a state recurrence."""

try:
    from ._core import *  # noqa: F401,F403
except ImportError:
    # In-tree builds leave _core next to the build directory rather than
    # inside the package; fall back to a top-level import.
    from _core import *  # noqa: F401,F403

__version__ = "0.1.0"
