"""Time-varying dynamics-parameter forecasting for optimization-based MPC.

Subpackages cover a small reverse-mode autodiff engine, clamped B-splines,
a backlash-pendulum plant and dataset tooling, the parameterized dynamics
models and their learned predictors, multi-step training, an iLQR-based MPC
stack, and a command-line front end.
"""

from ._kernels import BACKEND_NAME as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
