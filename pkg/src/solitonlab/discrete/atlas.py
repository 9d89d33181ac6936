r"""Chart atlases for the two supported grid manifolds.

Two atlases are provided:

* ``TorusAtlas`` -- a flat periodic box with one chart.  Node ``(i, j)`` sits
  at ``(i*h1, j*h2)`` and every finite-difference stencil wraps around.

* ``SphereAtlas`` -- the round 2-sphere of radius ``r`` covered by two
  stereographic charts.  Chart 0 projects from the north pole, chart 1 from
  the south pole; the transition map is the involution

      T(u, v) = (u, -v) / (u^2 + v^2),

  i.e. ``zeta -> 1/zeta`` in the complex coordinate.  Both charts carry the
  conformal round metric ``4 r^2 / (1 + |x|^2)^2 * delta``.

Each sphere chart is a uniform grid on the box ``[-B, B]^2`` where
``B = chi_support + guard_rings*h``.  The smooth partition of unity
``chi_0 + chi_1 = 1`` is supported in ``|x| <= chi_support`` and equals 1
inside ``|x| <= 1/chi_support``; the extra ``guard_rings`` rings of nodes
let stencils of composed operators stay away from the box boundary.  Every
sphere point is *owned* by exactly one chart: chart 0 owns ``|x| <= 1``,
chart 1 owns ``|x| < 1``.  Owned nodes are the global degrees of freedom of
assembled operators; non-owned node values are obtained from the other
chart by interpolation (see ``assembly``).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np


def _sigma(x):
    """exp(-1/x) for x > 0, exactly 0 otherwise (smooth bump building block)."""
    out = np.zeros_like(x, dtype=float)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def smoothstep(x):
    """C^inf monotone step: 0 for x <= 0, 1 for x >= 1, s(x)+s(1-x)=1."""
    x = np.asarray(x, dtype=float)
    a = _sigma(x)
    b = _sigma(1.0 - x)
    return a / (a + b)


def pou_weight(t, support):
    """Radial partition-of-unity profile w(t) on a stereographic chart.

    w = 1 for t <= 1/support, w = 0 for t >= support and the transition
    symmetry w(t) + w(1/t) = 1 holds exactly, so the two chart weights sum
    to one at every sphere point.
    """
    t = np.asarray(t, dtype=float)
    s = math.log(support)
    with np.errstate(divide="ignore"):
        u = np.where(t > 0, (s - np.log(np.maximum(t, 1e-300))) / (2.0 * s), np.inf)
    return smoothstep(np.clip(u, 0.0, 1.0))


@dataclass(frozen=True)
class TorusAtlas:
    """Flat periodic rectangle [0, L1) x [0, L2) with a single chart."""

    periods: tuple[float, float]
    shape: tuple[int, int]

    def __post_init__(self):
        if min(self.shape) < 8:
            raise ValueError("torus resolution must be >= 8 per axis")
        if min(self.periods) <= 0:
            raise ValueError("torus periods must be positive")

    n_charts = 1
    kind = "torus"

    @property
    def spacings(self):
        return tuple(L / n for L, n in zip(self.periods, self.shape))

    @property
    def cell_volume(self):
        h1, h2 = self.spacings
        return h1 * h2

    @cached_property
    def coords(self):
        """Meshgrid node coordinates, shape (n1, n2, 2)."""
        h1, h2 = self.spacings
        x = np.arange(self.shape[0]) * h1
        y = np.arange(self.shape[1]) * h2
        X, Y = np.meshgrid(x, y, indexing="ij")
        return np.stack([X, Y], axis=-1)

    def chi(self, chart):
        return np.ones(self.shape)

    def owner_mask(self, chart):
        return np.ones(self.shape, dtype=bool)

    def periodic(self, chart):
        return True

    def descriptor(self):
        return {
            "kind": "torus",
            "periods": [float(p) for p in self.periods],
            "shape": [int(n) for n in self.shape],
        }

    def key(self):
        return _digest(self.descriptor())


@dataclass(frozen=True)
class SphereAtlas:
    """Round S^2 of the given radius, two stereographic charts.

    Nodes are cell-centered on the fixed box ``[-B, B]^2`` with
    ``B = chi_support + box_margin``, so the grid spacing halves exactly
    when the resolution doubles (clean refinement ratios).  The margin
    band holds the guard rings that absorb stencil wrap-around garbage;
    at the minimum resolution of 32 it is about five rings wide.
    """

    radius: float
    resolution: int
    chi_support: float = 1.35
    box_margin: float = 0.65

    def __post_init__(self):
        if self.resolution < 16:
            raise ValueError("sphere resolution must be >= 16 per axis")
        if not 1.05 < self.chi_support < 2.5:
            raise ValueError("chi_support must lie in (1.05, 2.5)")
        if self.box_margin <= 0:
            raise ValueError("box_margin must be positive")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    n_charts = 2
    kind = "sphere"

    @property
    def box(self):
        return self.chi_support + self.box_margin

    @property
    def spacing(self):
        return 2.0 * self.box / self.resolution

    @property
    def guard_rings(self):
        return self.box_margin / self.spacing

    @property
    def spacings(self):
        return (self.spacing, self.spacing)

    @property
    def shape(self):
        return (self.resolution, self.resolution)

    @property
    def cell_volume(self):
        return self.spacing ** 2

    @cached_property
    def axis_coords(self):
        h = self.spacing
        return -self.box + (np.arange(self.resolution) + 0.5) * h

    @cached_property
    def coords(self):
        """Chart node coordinates, shape (N, N, 2); same for both charts."""
        c = self.axis_coords
        U, V = np.meshgrid(c, c, indexing="ij")
        return np.stack([U, V], axis=-1)

    @cached_property
    def radius2(self):
        x = self.coords
        return x[..., 0] ** 2 + x[..., 1] ** 2

    def chi(self, chart):
        return self._chi

    @cached_property
    def _chi(self):
        return pou_weight(np.sqrt(self.radius2), self.chi_support)

    def owner_mask(self, chart):
        # chart 0 owns the closed unit disk, chart 1 the open one: each
        # sphere point has exactly one owning chart.
        if chart == 0:
            return self.radius2 <= 1.0
        return self.radius2 < 1.0

    def periodic(self, chart):
        return False

    # -- transition geometry ------------------------------------------------

    @staticmethod
    def transition(points):
        """Chart-to-chart coordinate map (an involution), shape (..., 2)."""
        u = points[..., 0]
        v = points[..., 1]
        r2 = u * u + v * v
        return np.stack([u / r2, -v / r2], axis=-1)

    @staticmethod
    def transition_jac(points):
        """Jacobian d(transition)/d(point), shape (..., 2, 2)."""
        u = points[..., 0]
        v = points[..., 1]
        r2 = u * u + v * v
        r4 = r2 * r2
        a = (v * v - u * u) / r4
        b = -2.0 * u * v / r4
        return np.stack(
            [np.stack([a, b], axis=-1), np.stack([-b, a], axis=-1)], axis=-2
        )

    # -- embedding into R^3 (for building exact global test fields) ---------

    def embed(self, chart, points=None):
        """Ambient coordinates of chart points on the sphere, (..., 3)."""
        p = self.coords if points is None else points
        u, v = p[..., 0], p[..., 1]
        r2 = u * u + v * v
        w = 1.0 + r2
        if chart == 0:
            xyz = np.stack([2 * u, 2 * v, r2 - 1.0], axis=-1)
        else:
            xyz = np.stack([2 * u, -2 * v, 1.0 - r2], axis=-1)
        return self.radius * xyz / w[..., None]

    def embed_jac(self, chart, points=None):
        """Jacobian of the embedding, shape (..., 3, 2)."""
        p = self.coords if points is None else points
        u, v = p[..., 0], p[..., 1]
        w = 1.0 + u * u + v * v
        s = self.radius / (w * w)
        du = np.stack([2 * (1 + v * v - u * u), -4 * u * v, 4 * u], axis=-1)
        dv = np.stack([-4 * u * v, 2 * (1 + u * u - v * v), 4 * v], axis=-1)
        if chart == 1:
            du = du * np.array([1.0, -1.0, -1.0])
            dv = dv * np.array([1.0, -1.0, -1.0])
        return s[..., None, None] * np.stack([du, dv], axis=-1)

    def round_metric_factor(self, chart=0):
        """Conformal factor lambda^2 with g = lambda^2 * delta."""
        return (2.0 * self.radius / (1.0 + self.radius2)) ** 2

    def descriptor(self):
        return {
            "kind": "sphere",
            "radius": float(self.radius),
            "resolution": int(self.resolution),
            "chi_support": float(self.chi_support),
            "box_margin": float(self.box_margin),
        }

    def key(self):
        return _digest(self.descriptor())


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def atlas_from_descriptor(desc):
    if desc["kind"] == "torus":
        return TorusAtlas(tuple(desc["periods"]), tuple(desc["shape"]))
    if desc["kind"] == "sphere":
        return SphereAtlas(
            desc["radius"], desc["resolution"], desc["chi_support"], desc["box_margin"]
        )
    raise ValueError(f"unknown atlas kind {desc['kind']!r}")
