r"""Tensor fields over a chart atlas.

A field stores one numpy array per chart with node axes first and component
axes last: scalars ``(n1, n2)``, vectors and covectors ``(n1, n2, 2)``,
symmetric 2-tensors ``(n1, n2, 2, 2)`` (full symmetric storage).  Vector
components are contravariant, covector components covariant.

Multi-chart fields must agree on chart overlaps under the coordinate
transition; fields built through the ambient-space constructors below do so
exactly.  Max norms are taken over owned nodes only, so every sphere point
is counted once and guard rings never contribute.

Serialization uses a flat binary container: a JSON header (atlas
descriptor, field kind, component count) followed by little-endian float64
payload in chart-major, node-major, component-minor order.  Symmetric
tensors serialize their 3 independent components (11, 12, 22).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import AtlasMismatchError, NotPositiveDefiniteError
from .atlas import SphereAtlas, TorusAtlas, atlas_from_descriptor

_MAGIC = b"SLFB01"

_KIND_COMP = {"scalar": (), "vector": (2,), "covector": (2,), "sym2": (2, 2)}


class Field:
    """Base container; use the concrete subclasses."""

    kind = None

    def __init__(self, atlas, data):
        comp = _KIND_COMP[self.kind]
        self.atlas = atlas
        self.data = [np.ascontiguousarray(a, dtype=float) for a in data]
        if len(self.data) != atlas.n_charts:
            raise ValueError("one array per chart expected")
        for a in self.data:
            if a.shape != tuple(atlas.shape) + comp:
                raise ValueError(
                    f"bad field shape {a.shape}, expected {tuple(atlas.shape) + comp}"
                )

    # -- algebra -------------------------------------------------------------

    def _check(self, other):
        if self.atlas is not other.atlas and self.atlas.descriptor() != other.atlas.descriptor():
            raise AtlasMismatchError("fields live on different atlases")
        if self.kind != other.kind:
            raise ValueError(f"cannot combine {self.kind} with {other.kind}")

    def __add__(self, other):
        self._check(other)
        return type(self)(self.atlas, [a + b for a, b in zip(self.data, other.data)])

    def __sub__(self, other):
        self._check(other)
        return type(self)(self.atlas, [a - b for a, b in zip(self.data, other.data)])

    def __mul__(self, c):
        return type(self)(self.atlas, [a * float(c) for a in self.data])

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def copy(self):
        return type(self)(self.atlas, [a.copy() for a in self.data])

    @classmethod
    def zeros(cls, atlas):
        comp = _KIND_COMP[cls.kind]
        return cls(atlas, [np.zeros(tuple(atlas.shape) + comp) for _ in range(atlas.n_charts)])

    # -- norms ---------------------------------------------------------------

    def max_norm(self):
        """Max over owned nodes of the max-abs component."""
        out = 0.0
        for c, a in enumerate(self.data):
            m = self.atlas.owner_mask(c)
            vals = np.abs(a[m])
            if vals.size:
                out = max(out, float(vals.max()))
        return out

    # -- serialization -------------------------------------------------------

    def _packed(self):
        if self.kind == "sym2":
            return [np.stack([a[..., 0, 0], a[..., 0, 1], a[..., 1, 1]], axis=-1)
                    for a in self.data]
        return self.data

    @staticmethod
    def _unpack(kind, arrs):
        if kind == "sym2":
            out = []
            for p in arrs:
                a = np.empty(p.shape[:-1] + (2, 2))
                a[..., 0, 0] = p[..., 0]
                a[..., 0, 1] = p[..., 1]
                a[..., 1, 0] = p[..., 1]
                a[..., 1, 1] = p[..., 2]
                out.append(a)
            return out
        return arrs

    def to_bytes(self):
        packed = self._packed()
        ncomp = 1 if packed[0].ndim == 2 else packed[0].shape[-1]
        header = json.dumps(
            {
                "atlas": self.atlas.descriptor(),
                "field_kind": self.kind,
                "ncomp": ncomp,
            }
        ).encode()
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in packed)
        return _MAGIC + struct.pack("<I", len(header)) + header + body

    @classmethod
    def from_bytes(cls, blob):
        if blob[:6] != _MAGIC:
            raise ValueError("not a solitonlab field container")
        (hlen,) = struct.unpack("<I", blob[6:10])
        header = json.loads(blob[10 : 10 + hlen].decode())
        atlas = atlas_from_descriptor(header["atlas"])
        kind = header["field_kind"]
        ncomp = header["ncomp"]
        shape = tuple(atlas.shape) + ((ncomp,) if ncomp > 1 else ())
        count = int(np.prod(shape))
        body = np.frombuffer(blob[10 + hlen :], dtype="<f8")
        arrs = [
            body[i * count : (i + 1) * count].reshape(shape).astype(float)
            for i in range(atlas.n_charts)
        ]
        klass = FIELD_CLASSES[kind]
        return klass(atlas, klass._unpack(kind, arrs))


class ScalarField(Field):
    kind = "scalar"


class VectorField(Field):
    kind = "vector"


class CovectorField(Field):
    kind = "covector"


class Sym2Field(Field):
    kind = "sym2"

    def sym_check(self):
        return max(
            float(np.abs(a - np.swapaxes(a, -1, -2)).max()) for a in self.data
        )


class MetricField(Sym2Field):
    """A Sym2Field certified pointwise positive definite at construction."""

    def __init__(self, atlas, data):
        super().__init__(atlas, data)
        for c, a in enumerate(self.data):
            det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
            bad = (a[..., 0, 0] <= 0) | (det <= 0)
            if bad.any():
                idx = tuple(int(i) for i in np.argwhere(bad)[0])
                raise NotPositiveDefiniteError(c, idx)

    def as_sym2(self):
        return Sym2Field(self.atlas, [a.copy() for a in self.data])


FIELD_CLASSES = {
    "scalar": ScalarField,
    "vector": VectorField,
    "covector": CovectorField,
    "sym2": Sym2Field,
    "metric": MetricField,
}


# ---------------------------------------------------------------------------
# constructors: exact metrics
# ---------------------------------------------------------------------------


def flat_torus_metric(atlas: TorusAtlas):
    g = np.zeros(tuple(atlas.shape) + (2, 2))
    g[..., 0, 0] = 1.0
    g[..., 1, 1] = 1.0
    return MetricField(atlas, [g])


def conformal_torus_metric(atlas: TorusAtlas, phi: ScalarField):
    """g = e^{2 phi} * delta on the torus."""
    w = np.exp(2.0 * phi.data[0])
    g = np.zeros(tuple(atlas.shape) + (2, 2))
    g[..., 0, 0] = w
    g[..., 1, 1] = w
    return MetricField(atlas, [g])


def round_sphere_metric(atlas: SphereAtlas):
    """The round metric 4 r^2/(1+|x|^2)^2 delta on both charts."""
    out = []
    for c in range(2):
        lam2 = atlas.round_metric_factor(c)
        g = np.zeros(tuple(atlas.shape) + (2, 2))
        g[..., 0, 0] = lam2
        g[..., 1, 1] = lam2
        out.append(g)
    return MetricField(atlas, out)


# ---------------------------------------------------------------------------
# constructors: globally consistent smooth fields from ambient data
# ---------------------------------------------------------------------------


def scalar_from_ambient(atlas: SphereAtlas, func):
    """Restrict func(x, y, z) to the sphere; exact on both charts."""
    data = []
    for c in range(atlas.n_charts):
        p = atlas.embed(c)
        data.append(np.asarray(func(p[..., 0], p[..., 1], p[..., 2]), dtype=float))
    return ScalarField(atlas, data)


def covector_from_ambient(atlas: SphereAtlas, func):
    """Pull back the ambient 1-form sum_a W_a dx^a, W = func(x,y,z) in R^3."""
    data = []
    for c in range(atlas.n_charts):
        p = atlas.embed(c)
        J = atlas.embed_jac(c)
        W = np.stack(func(p[..., 0], p[..., 1], p[..., 2]), axis=-1)
        data.append(np.einsum("...ai,...a->...i", J, W))
    return CovectorField(atlas, data)


def sym2_from_ambient(atlas: SphereAtlas, func):
    """Pull back the ambient symmetric 2-tensor H = func(x,y,z) (3x3)."""
    data = []
    for c in range(atlas.n_charts):
        p = atlas.embed(c)
        J = atlas.embed_jac(c)
        H = np.asarray(func(p[..., 0], p[..., 1], p[..., 2]))
        data.append(np.einsum("...ai,...ab,...bj->...ij", J, H, J))
    return Sym2Field(atlas, data)


# ---------------------------------------------------------------------------
# seeded random smooth fields (truncated series, for refinement studies)
# ---------------------------------------------------------------------------


def _torus_series(atlas, rng, band, amplitude):
    x = atlas.coords[..., 0] * (2 * np.pi / atlas.periods[0])
    y = atlas.coords[..., 1] * (2 * np.pi / atlas.periods[1])
    out = np.zeros(atlas.shape)
    for kx in range(-band, band + 1):
        for ky in range(-band, band + 1):
            if kx == 0 and ky == 0:
                continue
            a, b = rng.normal(size=2)
            out += a * np.cos(kx * x + ky * y) + b * np.sin(kx * x + ky * y)
    scale = max(1.0, np.abs(out).max())
    return amplitude * out / scale


def _sphere_poly_coeffs(rng, band):
    # random polynomial in (x, y, z) of total degree <= band
    coeffs = {}
    for i in range(band + 1):
        for j in range(band + 1 - i):
            for k in range(band + 1 - i - j):
                coeffs[(i, j, k)] = rng.normal()
    return coeffs


def _eval_poly(coeffs, x, y, z):
    out = np.zeros_like(x)
    for (i, j, k), c in coeffs.items():
        out = out + c * x**i * y**j * z**k
    return out


def random_scalar(atlas, rng, band=2, amplitude=0.2):
    if atlas.kind == "torus":
        return ScalarField(atlas, [_torus_series(atlas, rng, band, amplitude)])
    coeffs = _sphere_poly_coeffs(rng, band)
    f = scalar_from_ambient(atlas, lambda x, y, z: _eval_poly(coeffs, x, y, z))
    scale = max(1.0, f.max_norm())
    return f * (amplitude / scale)


def random_vector(atlas, rng, band=2, amplitude=0.2):
    if atlas.kind == "torus":
        comps = [_torus_series(atlas, rng, band, amplitude) for _ in range(2)]
        return VectorField(atlas, [np.stack(comps, axis=-1)])
    # ambient vector field, projected to the tangent plane, raised later by
    # callers that need contravariant components on a specific metric; here
    # we return chart components of the tangential projection w.r.t. the
    # round metric (conformal, so raising is a scalar factor).
    cfs = [_sphere_poly_coeffs(rng, band) for _ in range(3)]
    data = []
    for c in range(atlas.n_charts):
        p = atlas.embed(c)
        J = atlas.embed_jac(c)  # (..., 3, 2)
        W = np.stack([_eval_poly(cf, p[..., 0], p[..., 1], p[..., 2]) for cf in cfs], axis=-1)
        # solve J X = tangential part of W in least squares sense: X = (J^T J)^-1 J^T W
        JtJ = np.einsum("...ai,...aj->...ij", J, J)
        JtW = np.einsum("...ai,...a->...i", J, W)
        X = np.linalg.solve(JtJ, JtW[..., None])[..., 0]
        data.append(X)
    f = VectorField(atlas, data)
    scale = max(1.0, f.max_norm())
    return f * (amplitude / scale)


def random_sym2(atlas, rng, band=2, amplitude=0.2):
    if atlas.kind == "torus":
        a = _torus_series(atlas, rng, band, amplitude)
        b = _torus_series(atlas, rng, band, amplitude)
        c = _torus_series(atlas, rng, band, amplitude)
        h = np.empty(tuple(atlas.shape) + (2, 2))
        h[..., 0, 0] = a
        h[..., 0, 1] = b
        h[..., 1, 0] = b
        h[..., 1, 1] = c
        return Sym2Field(atlas, [h])
    cfs = [[_sphere_poly_coeffs(rng, band) for _ in range(3)] for _ in range(3)]

    def H(x, y, z):
        M = np.empty(x.shape + (3, 3))
        for i in range(3):
            for j in range(3):
                M[..., i, j] = _eval_poly(cfs[min(i, j)][max(i, j)], x, y, z)
        return M

    f = sym2_from_ambient(atlas, H)
    scale = max(1.0, f.max_norm())
    return f * (amplitude / scale)
