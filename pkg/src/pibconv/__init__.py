"""Desk-scale differentiable architecture search workbench.

Cell-based CNN search over a modernized operation set built around the
pseudo-inverted bottleneck convolution block, with an analytical
parameter/MAC cost model, bilevel search, a training harness, and
GradCAM emission.  All numerics run on a small reverse-mode autodiff
engine over numpy buffers; hot kernels are numba-jitted with a pure
numpy fallback (see ``pibconv.engine.backend``).
"""

__version__ = "0.1.0"

from .genotype import (
    CellSpec,
    Edge,
    Genotype,
    NetworkPlan,
    OpKind,
    parse_genotype,
    plan_network,
    serialize_genotype,
    validate_genotype,
)

__all__ = [
    "CellSpec",
    "Edge",
    "Genotype",
    "NetworkPlan",
    "OpKind",
    "parse_genotype",
    "plan_network",
    "serialize_genotype",
    "validate_genotype",
    "__version__",
]
