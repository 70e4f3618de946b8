"""Reproducible experiment pipelines, fits and the registry."""

from .base import *  # noqa: F401,F403
from .fitting import *  # noqa: F401,F403
from .pipelines import *  # noqa: F401,F403
from .registry import *  # noqa: F401,F403
