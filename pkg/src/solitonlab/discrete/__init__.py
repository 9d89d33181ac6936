"""Discretized tensor calculus, quadrature and sparse operator assembly."""

from .atlas import SphereAtlas, TorusAtlas, atlas_from_descriptor
from .fields import (
    CovectorField,
    Field,
    MetricField,
    ScalarField,
    Sym2Field,
    VectorField,
    conformal_torus_metric,
    covector_from_ambient,
    flat_torus_metric,
    random_scalar,
    random_sym2,
    random_vector,
    round_sphere_metric,
    scalar_from_ambient,
    sym2_from_ambient,
)
from .calculus import (
    CurvaturePack,
    curvature_action,
    curvature_pack,
    d_scalar,
    divergence,
    flat,
    geometry_of,
    grad,
    hessian,
    inner,
    integrate,
    laplace,
    lie_metric,
    pointwise_inner,
    sharp,
    trace_sym2,
    twisted_laplacian,
    volume,
)

__all__ = [n for n in dir() if not n.startswith("_")]
