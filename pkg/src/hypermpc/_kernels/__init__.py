"""Kernel backend selection: compiled extension if available, else pure Python.

Set HYPERMPC_KERNELS=python or HYPERMPC_KERNELS=compiled to force a backend;
forcing `compiled` raises if the extension is missing.
"""

import os

_forced = os.environ.get("HYPERMPC_KERNELS", "").strip().lower()

if _forced == "python":
    from . import pyref as backend
elif _forced == "compiled":
    from . import core as backend  # type: ignore[no-redef]
else:
    try:
        from . import core as backend  # type: ignore[no-redef]
    except ImportError:
        from . import pyref as backend

BACKEND_NAME = backend.BACKEND_NAME

plant_sim = backend.plant_sim
rollout_fwd = backend.rollout_fwd
rollout_bwd = backend.rollout_bwd
rollout_res_fwd = backend.rollout_res_fwd
rollout_res_bwd = backend.rollout_res_bwd
aug_forward = backend.aug_forward
aug_linearize = backend.aug_linearize
ilqr_backward_3 = backend.ilqr_backward_3

STATE_LIMIT = 1e6
COULOMB_EPS = 0.05
