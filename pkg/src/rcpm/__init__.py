"""Riemannian convex potential flows on spheres, circles and tori."""
import os as _os


def _configure_xla():
    flags = _os.environ.get("XLA_FLAGS", "")
    extra = []
    # The thunk runtime is ~2x slower for the small fused kernels used here.
    if "xla_cpu_use_thunk_runtime" not in flags:
        extra.append("--xla_cpu_use_thunk_runtime=false")
    threads = _os.environ.get("RCPM_THREADS")
    if threads is not None and threads.strip() == "1" and "xla_cpu_multi_thread_eigen" not in flags:
        extra.append("--xla_cpu_multi_thread_eigen=false")
    if extra:
        _os.environ["XLA_FLAGS"] = " ".join([flags, *extra]).strip()


_configure_xla()

import jax as _jax  # noqa: E402

_jax.config.update("jax_enable_x64", True)

from rcpm.errors import (  # noqa: E402
    CutLocusError,
    DegenerateInputError,
    InvalidBatchError,
    NonFiniteLossError,
    SingularJacobianError,
)
from rcpm.manifold import Product, Sphere, manifold_from_json, torus  # noqa: E402
from rcpm.potential import (  # noqa: E402
    BlockPotential,
    DiscretePotential,
    concave_relu,
    eval_block_potential,
    eval_potential,
    grad_block_potential,
    grad_potential,
    soft_min,
)
from rcpm.flow import (  # noqa: E402
    Flow,
    PushedDensity,
    apply_block,
    apply_flow,
    block_jacobian_logdet,
    flow_logdet,
    transport_geodesic,
)

__version__ = "0.1.0"

__all__ = [
    "BlockPotential",
    "CutLocusError",
    "DegenerateInputError",
    "DiscretePotential",
    "Flow",
    "InvalidBatchError",
    "NonFiniteLossError",
    "Product",
    "PushedDensity",
    "SingularJacobianError",
    "Sphere",
    "apply_block",
    "apply_flow",
    "block_jacobian_logdet",
    "concave_relu",
    "eval_block_potential",
    "eval_potential",
    "flow_logdet",
    "grad_block_potential",
    "grad_potential",
    "manifold_from_json",
    "soft_min",
    "torus",
    "transport_geodesic",
]
