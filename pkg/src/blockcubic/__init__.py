"""Randomized block cubic Newton methods for composite convex problems.

The objective is ``F(x) = g(x) + sum_i phi_i(x_(i)) + sum_i psi_i(x_(i))``
over a block partition of ``x``: a smooth ``g`` with curvature bounds, twice
differentiable block terms with Lipschitz Hessians and box constraints.
"""
from .baselines import *  # noqa: F401,F403
from .blocks import *  # noqa: F401,F403
from .cubsolve import *  # noqa: F401,F403
from .erm import *  # noqa: F401,F403
from .losses import *  # noqa: F401,F403
from .problem import *  # noqa: F401,F403
from .rbcn import *  # noqa: F401,F403
from . import baselines, blocks, cubsolve, erm, losses, problem, rbcn

__version__ = "0.1.0"
