r"""Discretized tensor calculus on chart atlases.

All derivatives are second-order central differences on uniform chart
grids.  On the torus the stencils wrap periodically and are exact in that
sense; on sphere charts the wrap produces garbage in the outermost rings,
which is harmless because the partition of unity vanishes there and every
consumer reads only owned or chi-weighted nodes (grids carry guard rings
for exactly this purpose; see ``atlas``).

Curvature follows the coordinate conventions

    Gamma^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij)
    R^r_smn    = d_m Gamma^r_ns - d_n Gamma^r_ms
                 + Gamma^r_ml Gamma^l_ns - Gamma^r_nl Gamma^l_ms
    R_rsmn     = g_rl R^l_smn,   Ric_sn = R^m_smn,   s = g^sn Ric_sn

with signs fixed operationally by the round-sphere checks: the unit sphere
returns Ric = g and the curvature action satisfies ``curvature_action(g, g)
= Ric``.  The scalar Laplacian is the trace of the Hessian (rough
Laplacian, nonpositive spectrum).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import AtlasMismatchError
from .fields import (
    CovectorField,
    MetricField,
    ScalarField,
    Sym2Field,
    VectorField,
)

# ---------------------------------------------------------------------------
# stencils (operate on the two leading node axes, broadcast over components)
# ---------------------------------------------------------------------------


def dc(arr, axis, h):
    """Central first derivative."""
    return (np.roll(arr, -1, axis=axis) - np.roll(arr, 1, axis=axis)) / (2.0 * h)


def d2(arr, axis, h):
    """Direct second derivative."""
    return (np.roll(arr, -1, axis=axis) - 2.0 * arr + np.roll(arr, 1, axis=axis)) / (h * h)


def dmix(arr, h0, h1):
    """Mixed second derivative d^2/dx0 dx1, four-point stencil."""
    a = np.roll(np.roll(arr, -1, axis=0), -1, axis=1)
    b = np.roll(np.roll(arr, -1, axis=0), 1, axis=1)
    c = np.roll(np.roll(arr, 1, axis=0), -1, axis=1)
    d = np.roll(np.roll(arr, 1, axis=0), 1, axis=1)
    return (a - b - c + d) / (4.0 * h0 * h1)


def partial(arr, h):
    """All first partials; result gains a leading-after-node axis (..., a, comps)."""
    return np.stack([dc(arr, 0, h[0]), dc(arr, 1, h[1])], axis=2)


# ---------------------------------------------------------------------------
# geometry cache per metric
# ---------------------------------------------------------------------------


class Geometry:
    """Derived geometric data of a metric, one entry per chart, lazily built."""

    def __init__(self, g: MetricField):
        self.g = g
        self.atlas = g.atlas
        self._cache = {}

    def _per_chart(self, name, fn):
        if name not in self._cache:
            self._cache[name] = [fn(c) for c in range(self.atlas.n_charts)]
        return self._cache[name]

    @property
    def spacings(self):
        return self.atlas.spacings

    @property
    def inv(self):
        return self._per_chart("inv", lambda c: np.linalg.inv(self.g.data[c]))

    @property
    def det(self):
        def f(c):
            a = self.g.data[c]
            return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]

        return self._per_chart("det", f)

    @property
    def sqrt_det(self):
        return self._per_chart("sqrt_det", lambda c: np.sqrt(self.det[c]))

    @property
    def dg(self):
        """dg[c][..., a, i, j] = d_a g_ij."""
        return self._per_chart("dg", lambda c: partial(self.g.data[c], self.spacings))

    @property
    def christoffel(self):
        """Gamma[c][..., k, i, j] = Gamma^k_ij."""

        def f(c):
            dg = self.dg[c]
            # term[..., i, j, l] = d_i g_jl + d_j g_il - d_l g_ij
            term = dg + np.moveaxis(dg, 2, 3) - np.moveaxis(dg, 2, 4)
            return 0.5 * np.einsum("...kl,...ijl->...kij", self.inv[c], term)

        return self._per_chart("christoffel", f)

    @property
    def dchristoffel(self):
        """dGamma[c][..., a, k, i, j] = d_a Gamma^k_ij."""
        return self._per_chart(
            "dchristoffel", lambda c: partial(self.christoffel[c], self.spacings)
        )

    @property
    def riemann_up(self):
        """R[c][..., r, s, m, n] = R^r_smn."""

        def f(c):
            G = self.christoffel[c]
            dG = self.dchristoffel[c]
            term = np.einsum("...mrns->...rsmn", dG) - np.einsum(
                "...nrms->...rsmn", dG
            )
            quad = np.einsum("...rml,...lns->...rsmn", G, G) - np.einsum(
                "...rnl,...lms->...rsmn", G, G
            )
            return term + quad

        return self._per_chart("riemann_up", f)

    @property
    def riemann(self):
        """Fully covariant R_rsmn (first index lowered)."""
        return self._per_chart(
            "riemann",
            lambda c: np.einsum("...rl,...lsmn->...rsmn", self.g.data[c], self.riemann_up[c]),
        )

    @property
    def ricci(self):
        return self._per_chart(
            "ricci", lambda c: np.einsum("...msmn->...sn", self.riemann_up[c])
        )

    @property
    def scalar(self):
        return self._per_chart(
            "scalar", lambda c: np.einsum("...sn,...sn->...", self.inv[c], self.ricci[c])
        )


def geometry_of(g: MetricField) -> Geometry:
    geo = getattr(g, "_geometry", None)
    if geo is None:
        geo = Geometry(g)
        g._geometry = geo
    return geo


def _same_atlas(g, *fields):
    for f in fields:
        if f is None:
            continue
        if f.atlas is g.atlas:
            continue
        if f.atlas.descriptor() != g.atlas.descriptor():
            raise AtlasMismatchError("field does not live on the metric's atlas")


# ---------------------------------------------------------------------------
# curvature pack
# ---------------------------------------------------------------------------


@dataclass
class CurvaturePack:
    christoffel: list  # per chart (..., k, i, j)
    riemann: list  # per chart (..., r, s, m, n), first index lowered
    ricci: Sym2Field
    scalar: ScalarField

    def symmetry_defect(self):
        """Max violation of pair antisymmetries and first Bianchi (owned nodes)."""
        out = 0.0
        atlas = self.ricci.atlas
        for c, R in enumerate(self.riemann):
            m = atlas.owner_mask(c)
            anti1 = np.abs(R + np.swapaxes(R, 2, 3))[m].max()
            anti2 = np.abs(R + np.swapaxes(R, 4, 5))[m].max()
            bianchi = np.abs(
                R + np.moveaxis(R, (3, 4, 5), (4, 5, 3)) + np.moveaxis(R, (3, 4, 5), (5, 3, 4))
            )[m].max()
            out = max(out, float(anti1), float(anti2), float(bianchi))
        return out


def curvature_pack(g: MetricField) -> CurvaturePack:
    geo = geometry_of(g)
    ric = Sym2Field(g.atlas, [0.5 * (r + np.swapaxes(r, -1, -2)) for r in geo.ricci])
    return CurvaturePack(
        christoffel=geo.christoffel,
        riemann=geo.riemann,
        ricci=ric,
        scalar=ScalarField(g.atlas, geo.scalar),
    )


# ---------------------------------------------------------------------------
# first-order operators
# ---------------------------------------------------------------------------


def d_scalar(f: ScalarField) -> CovectorField:
    """Exterior derivative df."""
    h = f.atlas.spacings
    return CovectorField(f.atlas, [partial(a, h) for a in f.data])


def grad(g: MetricField, f: ScalarField) -> VectorField:
    _same_atlas(g, f)
    geo = geometry_of(g)
    df = d_scalar(f)
    return VectorField(
        g.atlas,
        [np.einsum("...ij,...j->...i", geo.inv[c], df.data[c]) for c in range(g.atlas.n_charts)],
    )


def sharp(g: MetricField, w: CovectorField) -> VectorField:
    _same_atlas(g, w)
    geo = geometry_of(g)
    return VectorField(
        g.atlas,
        [np.einsum("...ij,...j->...i", geo.inv[c], w.data[c]) for c in range(g.atlas.n_charts)],
    )


def flat(g: MetricField, X: VectorField) -> CovectorField:
    _same_atlas(g, X)
    return CovectorField(
        g.atlas,
        [np.einsum("...ij,...j->...i", g.data[c], X.data[c]) for c in range(g.atlas.n_charts)],
    )


def cov_d_covector(g: MetricField, w: CovectorField):
    """Per-chart arrays (..., a, i) = nabla_a w_i."""
    geo = geometry_of(g)
    h = g.atlas.spacings
    out = []
    for c in range(g.atlas.n_charts):
        dw = partial(w.data[c], h)
        out.append(dw - np.einsum("...lai,...l->...ai", geo.christoffel[c], w.data[c]))
    return out


def cov_d_sym2(g: MetricField, t: Sym2Field):
    """Per-chart arrays (..., a, i, j) = nabla_a t_ij."""
    geo = geometry_of(g)
    h = g.atlas.spacings
    out = []
    for c in range(g.atlas.n_charts):
        dt = partial(t.data[c], h)
        G = geo.christoffel[c]
        corr = np.einsum("...lai,...lj->...aij", G, t.data[c]) + np.einsum(
            "...laj,...il->...aij", G, t.data[c]
        )
        out.append(dt - corr)
    return out


def hessian(g: MetricField, f: ScalarField) -> Sym2Field:
    """nabla df, with direct second-difference stencils."""
    _same_atlas(g, f)
    geo = geometry_of(g)
    h = g.atlas.spacings
    out = []
    for c in range(g.atlas.n_charts):
        a = f.data[c]
        H = np.empty(tuple(g.atlas.shape) + (2, 2))
        H[..., 0, 0] = d2(a, 0, h[0])
        H[..., 1, 1] = d2(a, 1, h[1])
        m = dmix(a, h[0], h[1])
        H[..., 0, 1] = m
        H[..., 1, 0] = m
        df = partial(a, h)
        H -= np.einsum("...kij,...k->...ij", geo.christoffel[c], df)
        out.append(H)
    return Sym2Field(g.atlas, out)


def laplace(g: MetricField, f: ScalarField) -> ScalarField:
    """Trace of the Hessian (rough Laplacian, nonpositive spectrum)."""
    H = hessian(g, f)
    geo = geometry_of(g)
    return ScalarField(
        g.atlas,
        [np.einsum("...ij,...ij->...", geo.inv[c], H.data[c]) for c in range(g.atlas.n_charts)],
    )


def trace_sym2(g: MetricField, t: Sym2Field) -> ScalarField:
    _same_atlas(g, t)
    geo = geometry_of(g)
    return ScalarField(
        g.atlas,
        [np.einsum("...ij,...ij->...", geo.inv[c], t.data[c]) for c in range(g.atlas.n_charts)],
    )


def lie_metric(g: MetricField, X: VectorField) -> Sym2Field:
    """alpha_g(X) = L_X g, equal to nabla_i X_j + nabla_j X_i."""
    _same_atlas(g, X)
    w = flat(g, X)
    dw = cov_d_covector(g, w)
    return Sym2Field(g.atlas, [a + np.swapaxes(a, -1, -2) for a in dw])


def divergence(g: MetricField, t, f: ScalarField | None = None):
    """delta_g t, or the twisted delta_f t = delta_g t - t(grad f, .).

    Accepts a Sym2Field (returns a CovectorField) or a CovectorField
    (returns a ScalarField).  The twisted version is computed via the
    right-hand side of its defining identity, so ``delta_f = delta_g -
    i_{grad f}`` holds exactly at the discrete level.
    """
    _same_atlas(g, t, f)
    geo = geometry_of(g)
    nch = g.atlas.n_charts
    if isinstance(t, Sym2Field):
        dt = cov_d_sym2(g, t)
        data = [np.einsum("...ai,...aij->...j", geo.inv[c], dt[c]) for c in range(nch)]
        if f is not None:
            gf = grad(g, f)
            for c in range(nch):
                data[c] = data[c] - np.einsum("...aj,...a->...j", t.data[c], gf.data[c])
        return CovectorField(g.atlas, data)
    if isinstance(t, CovectorField):
        dw = cov_d_covector(g, t)
        data = [np.einsum("...ai,...ai->...", geo.inv[c], dw[c]) for c in range(nch)]
        if f is not None:
            gf = grad(g, f)
            for c in range(nch):
                data[c] = data[c] - np.einsum("...a,...a->...", t.data[c], gf.data[c])
        return ScalarField(g.atlas, data)
    raise TypeError("divergence expects a Sym2Field or CovectorField")


def curvature_action(g: MetricField, t: Sym2Field) -> Sym2Field:
    """R(h)_ij = R_kilj h^kl; convention fixed so curvature_action(g, g) = Ric."""
    _same_atlas(g, t)
    geo = geometry_of(g)
    out = []
    for c in range(g.atlas.n_charts):
        hup = np.einsum(
            "...ka,...lb,...ab->...kl", geo.inv[c], geo.inv[c], t.data[c]
        )
        r = np.einsum("...kilj,...kl->...ij", geo.riemann[c], hup)
        out.append(0.5 * (r + np.swapaxes(r, -1, -2)))
    return Sym2Field(g.atlas, out)


def twisted_laplacian(g: MetricField, f: ScalarField | None, t):
    """Bakry-Emery Laplacian: Delta_f = Tr(nabla^2) - nabla_{grad f}.

    Works on ScalarField and Sym2Field.  With f = None (or constant) this
    is the rough Laplacian.
    """
    _same_atlas(g, t, f)
    geo = geometry_of(g)
    nch = g.atlas.n_charts
    h = g.atlas.spacings
    if isinstance(t, ScalarField):
        out = laplace(g, t)
        if f is not None:
            gf = grad(g, f)
            df = d_scalar(t)
            out = ScalarField(
                g.atlas,
                [
                    out.data[c] - np.einsum("...a,...a->...", gf.data[c], df.data[c])
                    for c in range(nch)
                ],
            )
        return out
    if isinstance(t, Sym2Field):
        T = cov_d_sym2(g, t)  # (..., a, i, j)
        out = []
        gf = grad(g, f) if f is not None else None
        for c in range(nch):
            dT = np.stack([dc(T[c], 0, h[0]), dc(T[c], 1, h[1])], axis=2)  # (...,b,a,i,j)
            G = geo.christoffel[c]
            corr = (
                np.einsum("...mba,...mij->...baij", G, T[c])
                + np.einsum("...mbi,...amj->...baij", G, T[c])
                + np.einsum("...mbj,...aim->...baij", G, T[c])
            )
            U = dT - corr
            lap = np.einsum("...ab,...abij->...ij", geo.inv[c], U)
            if gf is not None:
                lap = lap - np.einsum("...a,...aij->...ij", gf.data[c], T[c])
            out.append(0.5 * (lap + np.swapaxes(lap, -1, -2)))
        return Sym2Field(g.atlas, out)
    raise TypeError("twisted_laplacian expects a ScalarField or Sym2Field")


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def _weight_arrays(g: MetricField, f: ScalarField | None):
    """Per-chart quadrature weights chi * e^{-f} * sqrt(det g) * cell."""
    geo = geometry_of(g)
    cell = g.atlas.cell_volume
    out = []
    for c in range(g.atlas.n_charts):
        w = g.atlas.chi(c) * geo.sqrt_det[c] * cell
        if f is not None:
            w = w * np.exp(-f.data[c])
        out.append(w)
    return out


def integrate(g: MetricField, u: ScalarField, f: ScalarField | None = None) -> float:
    """int u e^{-f} mu_g by partition-of-unity weighted midpoint quadrature."""
    _same_atlas(g, u, f)
    w = _weight_arrays(g, f)
    return float(sum(np.sum(w[c] * u.data[c]) for c in range(g.atlas.n_charts)))


def volume(g: MetricField) -> float:
    w = _weight_arrays(g, None)
    return float(sum(np.sum(a) for a in w))


def pointwise_inner(g: MetricField, a, b) -> ScalarField:
    """g-contraction of two same-kind fields as a scalar field."""
    _same_atlas(g, a, b)
    if a.kind != b.kind:
        raise ValueError("pointwise_inner requires same field kinds")
    geo = geometry_of(g)
    nch = g.atlas.n_charts
    data = []
    for c in range(nch):
        if a.kind == "scalar":
            data.append(a.data[c] * b.data[c])
        elif a.kind == "vector":
            data.append(np.einsum("...ij,...i,...j->...", g.data[c], a.data[c], b.data[c]))
        elif a.kind == "covector":
            data.append(np.einsum("...ij,...i,...j->...", geo.inv[c], a.data[c], b.data[c]))
        else:  # sym2
            data.append(
                np.einsum(
                    "...ia,...jb,...ij,...ab->...",
                    geo.inv[c],
                    geo.inv[c],
                    a.data[c],
                    b.data[c],
                )
            )
    return ScalarField(g.atlas, data)


def inner(g: MetricField, a, b, f: ScalarField | None = None) -> float:
    """<a, b>_g = int g(a,b) mu_g, or the twisted <a, b>_(g,f) with e^{-f}."""
    return integrate(g, pointwise_inner(g, a, b), f)
