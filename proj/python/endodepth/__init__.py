"""Depth estimation trained from sparse structure-from-motion supervision."""

from ._core import *  # noqa: F401,F403
from ._core import synth  # noqa: F401
from ._core import __doc__  # noqa: F401

__version__ = "0.1.0"
