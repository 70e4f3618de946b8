"""Hamiltonians, unitary propagation and open-system engines."""

from .hamiltonians import *  # noqa: F401,F403
from .propagation import *  # noqa: F401,F403
from .lindblad import *  # noqa: F401,F403
from .collective import *  # noqa: F401,F403
from .perminv import *  # noqa: F401,F403
from .fullspace import *  # noqa: F401,F403
