r"""Sparse operator assembly and eigen/kernel solves.

Degrees of freedom.  Global DOF vectors hold field values at *owned* nodes
only (chart-major, node-major, component-minor).  On the torus every node
is owned.  On the sphere, chart 0 owns the closed unit disk and chart 1
the open one; values at non-owned nodes are linear in the other chart's
owned values through cubic Lagrange interpolation composed with the chart
transition's tensor transformation.  The sparse matrix ``P`` of a
``DofMap`` maps global DOFs to full-grid chart values (identity rows on
owned nodes, interpolation rows elsewhere); ``R`` restricts full-grid
values back to owned nodes.

Symmetric operators are assembled in energy (Galerkin-collocation) form

    K = sum_c P^T B_c^T W_c B_c P,

with ``W_c`` the partition-of-unity quadrature weights, so declared
symmetry holds to rounding and generalized eigenproblems use the
partition-of-unity mass ``M = sum_c P^T W_c P``.  Scalar Laplacians use a
staggered-edge scheme for the diagonal flux terms (this removes the
checkerboard null space of wide central stencils); tensor Bochner forms
use central covariant derivatives.

Non-symmetric or rectangular operators (twisted divergence, the
Lie-derivative map, the residual linearization) are assembled in strong
form: owner rows of the chart stencil composed with ``P``.

Kernel detection never guesses: ``near_kernel`` demands an explicit
singular-value gap and raises ``UndecidedError`` otherwise.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..errors import UndecidedError
from .atlas import SphereAtlas
from .calculus import geometry_of
from .fields import FIELD_CLASSES, MetricField, ScalarField

KIND_NCOMP = {"scalar": 1, "vector": 2, "covector": 2, "sym2": 3}

# expansion (full components from packed) and selection (packed from full)
_E_SYM2 = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 1.0, 0], [0, 0, 1.0]])
_R_SYM2 = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 0, 1.0]])


def pack_sym2(a):
    return np.stack([a[..., 0, 0], a[..., 0, 1], a[..., 1, 1]], axis=-1)


def unpack_sym2(p):
    a = np.empty(p.shape[:-1] + (2, 2))
    a[..., 0, 0] = p[..., 0]
    a[..., 0, 1] = p[..., 1]
    a[..., 1, 0] = p[..., 1]
    a[..., 1, 1] = p[..., 2]
    return a


def field_fullvecs(f):
    """Per-chart flat value vectors (node-major, component-minor)."""
    out = []
    for a in f.data:
        if f.kind in ("sym2", "metric"):
            a = pack_sym2(a)
        out.append(np.ascontiguousarray(a).reshape(-1))
    return out


def fullvecs_to_field(atlas, kind, vecs):
    ncomp = KIND_NCOMP[kind]
    shape = tuple(atlas.shape) + ((ncomp,) if ncomp > 1 else ())
    arrs = [np.asarray(v).reshape(shape) for v in vecs]
    if kind == "sym2":
        arrs = [unpack_sym2(a) for a in arrs]
    return FIELD_CLASSES[kind](atlas, arrs)


# ---------------------------------------------------------------------------
# DOF maps and cross-chart interpolation
# ---------------------------------------------------------------------------

_DOFMAP_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


@dataclass
class DofMap:
    atlas: object
    kind: str
    ncomp: int
    slots: list  # per chart int array (n1, n2), -1 if not owned
    n_owned: int  # owned nodes over all charts
    P: sp.csr_matrix  # global dofs -> stacked full-grid values
    R: sp.csr_matrix  # stacked full-grid values -> global dofs (owner rows)

    @property
    def ndof(self):
        return self.n_owned * self.ncomp

    def field_to_dofs(self, f):
        vecs = field_fullvecs(f)
        return self.R @ np.concatenate(vecs)

    def dofs_to_field(self, v):
        """Full field with non-owned values filled by interpolation."""
        full = self.P @ np.asarray(v, dtype=float)
        sizes = [int(np.prod(self.atlas.shape)) * self.ncomp] * self.atlas.n_charts
        vecs = np.split(full, np.cumsum(sizes)[:-1])
        return fullvecs_to_field(self.atlas, self.kind, vecs)


def dofmap(atlas, kind) -> DofMap:
    per_atlas = _DOFMAP_CACHE.setdefault(atlas, {})
    if kind not in per_atlas:
        per_atlas[kind] = _build_dofmap(atlas, kind)
    return per_atlas[kind]


def _build_dofmap(atlas, kind):
    ncomp = KIND_NCOMP[kind]
    nn = int(np.prod(atlas.shape))
    slots = []
    offset = 0
    for c in range(atlas.n_charts):
        m = atlas.owner_mask(c)
        s = -np.ones(atlas.shape, dtype=np.int64)
        s[m] = offset + np.arange(int(m.sum()))
        offset += int(m.sum())
        slots.append(s)
    n_owned = offset

    # owner restriction R
    rows, cols = [], []
    for c in range(atlas.n_charts):
        m = atlas.owner_mask(c).reshape(-1)
        nodes = np.nonzero(m)[0]
        slot = slots[c].reshape(-1)[nodes]
        for comp in range(ncomp):
            rows.append(slot * ncomp + comp)
            cols.append((c * nn + nodes) * ncomp + comp)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    R = sp.csr_matrix(
        (np.ones(rows.size), (rows, cols)),
        shape=(n_owned * ncomp, atlas.n_charts * nn * ncomp),
    )

    if atlas.kind == "torus":
        P = R.T.tocsr()
        return DofMap(atlas, kind, ncomp, slots, n_owned, P, R)

    P = _build_sphere_P(atlas, kind, slots, n_owned)
    return DofMap(atlas, kind, ncomp, slots, n_owned, P, R)


def _lagrange_weights(t, npts):
    """1-d Lagrange weights at integer nodes 0..npts-1 for point t."""
    w = np.ones(npts)
    for k in range(npts):
        for m in range(npts):
            if m != k:
                w[k] *= (t - m) / (k - m)
    return w


_SHIFTS4 = sorted(
    [(a, b) for a in range(-3, 4) for b in range(-3, 4)],
    key=lambda s: (max(abs(s[0]), abs(s[1])), abs(s[0]) + abs(s[1]), s),
)


def _find_stencil(owned, N, ti, tj):
    """Find a fully-owned interpolation block near grid position (ti, tj).

    Tries shifted 4x4 blocks (cubic), then 3x3, then 2x2.  Returns
    (i0, j0, npts) or None.
    """
    for npts in (4, 3, 2):
        base_i = int(np.floor(ti)) - (npts - 1) // 2
        base_j = int(np.floor(tj)) - (npts - 1) // 2
        for si, sj in _SHIFTS4:
            i0 = min(max(base_i + si, 0), N - npts)
            j0 = min(max(base_j + sj, 0), N - npts)
            if owned[i0 : i0 + npts, j0 : j0 + npts].all():
                return i0, j0, npts
    return None


def _transform_block(kind, A_x, A_y):
    """Component mixing matrix for ghost values.

    A_x is the transition Jacobian at the ghost node, A_y at the mapped
    point (they are mutually inverse since the transition is an
    involution).
    """
    if kind == "scalar":
        return np.array([[1.0]])
    if kind == "covector":
        return A_x.T.copy()
    if kind == "vector":
        return A_y.copy()
    # sym2: h_ij(x) = A_x[a,i] A_x[b,j] h'_ab(y), on packed components
    M_full = np.empty((4, 4))
    for r, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        for s, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            M_full[r, s] = A_x[a, i] * A_x[b, j]
    return _R_SYM2 @ M_full @ _E_SYM2


def _build_sphere_P(atlas: SphereAtlas, kind, slots, n_owned):
    ncomp = KIND_NCOMP[kind]
    N = atlas.resolution
    nn = N * N
    ndof = n_owned * ncomp
    h = atlas.spacing
    lo = atlas.axis_coords[0]

    rows, cols, vals = [], [], []

    for c in range(atlas.n_charts):
        other = 1 - c
        owned = atlas.owner_mask(c)
        owned_other = atlas.owner_mask(other)
        slot_other = slots[other]

        # identity rows on owned nodes
        m = owned.reshape(-1)
        nodes = np.nonzero(m)[0]
        slot = slots[c].reshape(-1)[nodes]
        for comp in range(ncomp):
            rows.append((c * nn + nodes) * ncomp + comp)
            cols.append(slot * ncomp + comp)
            vals.append(np.ones(nodes.size))

        # interpolation rows on ghost nodes
        ghosts = np.argwhere(~owned)
        pts = atlas.coords[~owned]  # (k, 2)
        ys = atlas.transition(pts)
        A_xs = atlas.transition_jac(pts)
        A_ys = atlas.transition_jac(ys)
        for (gi, gj), y, A_x, A_y in zip(ghosts, ys, A_xs, A_ys):
            node_row = c * nn + gi * N + gj
            ti = (y[0] - lo) / h
            tj = (y[1] - lo) / h
            st = _find_stencil(owned_other, N, ti, tj)
            if st is None:
                raise RuntimeError(
                    f"no owned interpolation stencil for ghost node at chart {c}"
                )
            i0, j0, npts = st
            wi = _lagrange_weights(ti - i0, npts)
            wj = _lagrange_weights(tj - j0, npts)
            T = _transform_block(kind, A_x, A_y)
            for a in range(npts):
                for b in range(npts):
                    w = wi[a] * wj[b]
                    if w == 0.0:
                        continue
                    src_slot = slot_other[i0 + a, j0 + b]
                    for ci in range(ncomp):
                        for cj in range(ncomp):
                            t = T[ci, cj]
                            if t == 0.0:
                                continue
                            rows.append(node_row * ncomp + ci)
                            cols.append(src_slot * ncomp + cj)
                            vals.append(w * t)

    rows = np.concatenate([np.atleast_1d(r) for r in rows])
    cols = np.concatenate([np.atleast_1d(cc) for cc in cols])
    vals = np.concatenate([np.atleast_1d(v) for v in vals])
    return sp.csr_matrix((vals, (rows, cols)), shape=(atlas.n_charts * nn * ncomp, ndof))


# ---------------------------------------------------------------------------
# per-chart stencil matrices (scalar node operators)
# ---------------------------------------------------------------------------

_CHART_OPS_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _shift(n, k):
    """(S u)[i] = u[(i+k) mod n]."""
    idx = (np.arange(n) + k) % n
    return sp.csr_matrix((np.ones(n), (np.arange(n), idx)), shape=(n, n))


def chart_ops(atlas):
    """Sparse 1-node-operator library shared by both charts."""
    if atlas in _CHART_OPS_CACHE:
        return _CHART_OPS_CACHE[atlas]
    n1, n2 = atlas.shape
    h1, h2 = atlas.spacings
    I1, I2 = sp.identity(n1, format="csr"), sp.identity(n2, format="csr")
    ops = {}
    ops["D0"] = sp.kron((_shift(n1, 1) - _shift(n1, -1)) / (2 * h1), I2, format="csr")
    ops["D1"] = sp.kron(I1, (_shift(n2, 1) - _shift(n2, -1)) / (2 * h2), format="csr")
    ops["F0"] = sp.kron((_shift(n1, 1) - sp.identity(n1)) / h1, I2, format="csr")
    ops["F1"] = sp.kron(I1, (_shift(n2, 1) - sp.identity(n2)) / h2, format="csr")
    ops["A0"] = sp.kron((_shift(n1, 1) + sp.identity(n1)) / 2.0, I2, format="csr")
    ops["A1"] = sp.kron(I1, (_shift(n2, 1) + sp.identity(n2)) / 2.0, format="csr")
    ops["D00"] = sp.kron(
        (_shift(n1, 1) - 2 * sp.identity(n1) + _shift(n1, -1)) / h1**2, I2, format="csr"
    )
    ops["D11"] = sp.kron(
        I1, (_shift(n2, 1) - 2 * sp.identity(n2) + _shift(n2, -1)) / h2**2, format="csr"
    )
    ops["D01"] = (ops["D0"] @ ops["D1"]).tocsr()
    _CHART_OPS_CACHE[atlas] = ops
    return ops


def with_comps(nodeop, ncomp):
    if ncomp == 1:
        return nodeop
    return sp.kron(nodeop, sp.identity(ncomp), format="csr")


def pointwise_matrix(blocks):
    """Sparse matrix of a pointwise linear map, blocks shape (n1,n2,co,ci)."""
    n = blocks.shape[0] * blocks.shape[1]
    co, ci = blocks.shape[2], blocks.shape[3]
    node = np.arange(n)
    rows = (node[:, None, None] * co + np.arange(co)[None, :, None]).repeat(ci, axis=2)
    cols = (node[:, None, None] * ci + np.arange(ci)[None, None, :]).repeat(co, axis=1)
    data = blocks.reshape(n, co, ci)
    return sp.csr_matrix(
        (data.ravel(), (rows.ravel(), cols.ravel())), shape=(n * co, n * ci)
    )


def diag_weights(w, ncomp=1):
    """Diagonal matrix from nodewise weights, repeated per component."""
    d = np.repeat(np.asarray(w).reshape(-1), ncomp)
    return sp.diags(d, format="csr")


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def _node_weight(g, f, chart):
    """chi * e^{-f} * sqrt(det g) * cell at every node of the chart."""
    geo = geometry_of(g)
    w = g.atlas.chi(chart) * geo.sqrt_det[chart] * g.atlas.cell_volume
    if f is not None:
        w = w * np.exp(-f.data[chart])
    return w


def _contraction_blocks(g, kind, chart):
    """Pointwise SPD Gram blocks of the g-inner product on packed components."""
    geo = geometry_of(g)
    if kind == "scalar":
        return np.ones(tuple(g.atlas.shape) + (1, 1))
    if kind == "vector":
        return g.data[chart]
    if kind == "covector":
        return geo.inv[chart]
    # sym2 packed: E^T (ginv x ginv) E, rows (i,j), cols (a,b)
    gi = geo.inv[chart]
    G4 = np.einsum("...ia,...jb->...ijab", gi, gi).reshape(tuple(g.atlas.shape) + (4, 4))
    return np.einsum("pr,...rs,sq->...pq", _E_SYM2.T, G4, _E_SYM2)


def mass_matrix(g: MetricField, f, kind):
    """Partition-of-unity mass of the (twisted) inner product on DOFs."""
    dm = dofmap(g.atlas, kind)
    ncomp = dm.ncomp
    nn = int(np.prod(g.atlas.shape))
    blocks = []
    for c in range(g.atlas.n_charts):
        w = _node_weight(g, f, c)
        B = _contraction_blocks(g, kind, c) * w[..., None, None]
        blocks.append(pointwise_matrix(B))
    W = sp.block_diag(blocks, format="csr")
    M = (dm.P.T @ W @ dm.P).tocsr()
    return ((M + M.T) * 0.5).tocsr()


# ---------------------------------------------------------------------------
# symmetric energy forms
# ---------------------------------------------------------------------------


def scalar_stiffness(g: MetricField, f=None):
    """Gram of int g(grad u, grad v) e^{-f} mu  (the weak form of -Delta_f).

    Diagonal flux terms use the staggered-edge scheme (checkerboard-free);
    the off-diagonal metric coupling uses central differences.
    """
    geo = geometry_of(g)
    dm = dofmap(g.atlas, "scalar")
    parts = []
    for c in range(g.atlas.n_charts):
        ops = chart_ops(g.atlas)
        w = _node_weight(g, f, c)
        gi = geo.inv[c]
        K = None
        for a in range(2):
            wa = w * gi[..., a, a]
            Aop = ops["A0"] if a == 0 else ops["A1"]
            Fop = ops["F0"] if a == 0 else ops["F1"]
            wedge = Aop @ wa.reshape(-1)
            term = Fop.T @ diag_weights(wedge) @ Fop
            K = term if K is None else K + term
        w01 = w * gi[..., 0, 1]
        K = K + ops["D0"].T @ diag_weights(w01) @ ops["D1"]
        K = K + ops["D1"].T @ diag_weights(w01) @ ops["D0"]
        parts.append(K)
    Kfull = sp.block_diag(parts, format="csr")
    K = (dm.P.T @ Kfull @ dm.P).tocsr()
    return ((K + K.T) * 0.5).tocsr()


def _covd_sym2_mats(g: MetricField, chart):
    """Strong matrices of nabla_a on packed sym2, list over a."""
    geo = geometry_of(g)
    ops = chart_ops(g.atlas)
    G = geo.christoffel[chart]
    shape = tuple(g.atlas.shape)
    out = []
    for a in range(2):
        D = with_comps(ops["D0"] if a == 0 else ops["D1"], 3)
        # coupling blocks on full components, then packed
        C = np.zeros(shape + (4, 4))
        fullidx = ((0, 0), (0, 1), (1, 0), (1, 1))
        for r, (i, j) in enumerate(fullidx):
            for s, (l, m) in enumerate(fullidx):
                blk = np.zeros(shape)
                if m == j:
                    blk = blk + G[..., l, a, i]
                if l == i:
                    blk = blk + G[..., m, a, j]
                C[..., r, s] = blk
        Cp = np.einsum("pr,...rs,sq->...pq", _R_SYM2, C, _E_SYM2)
        out.append(D - pointwise_matrix(Cp))
    return out


def _covd_covector_mats(g: MetricField, chart):
    """Strong matrices of nabla_a on covectors, list over a."""
    geo = geometry_of(g)
    ops = chart_ops(g.atlas)
    G = geo.christoffel[chart]
    out = []
    for a in range(2):
        D = with_comps(ops["D0"] if a == 0 else ops["D1"], 2)
        C = np.ascontiguousarray(G[..., :, a, :].swapaxes(-1, -2))  # C[i,l]=Gamma^l_{a i}
        out.append(D - pointwise_matrix(C))
    return out


def bochner_gram_sym2(g: MetricField, f=None):
    """Gram of int g^{ab} <nabla_a h, nabla_b k> e^{-f} mu  (weak -Delta_f)."""
    geo = geometry_of(g)
    dm = dofmap(g.atlas, "sym2")
    parts = []
    for c in range(g.atlas.n_charts):
        w = _node_weight(g, f, c)
        C3 = _contraction_blocks(g, "sym2", c)
        gi = geo.inv[c]
        B = _covd_sym2_mats(g, c)
        K = None
        for a in range(2):
            for b in range(2):
                Wab = pointwise_matrix(C3 * (w * gi[..., a, b])[..., None, None])
                term = B[a].T @ Wab @ B[b]
                K = term if K is None else K + term
        parts.append(K)
    Kfull = sp.block_diag(parts, format="csr")
    K = (dm.P.T @ Kfull @ dm.P).tocsr()
    return ((K + K.T) * 0.5).tocsr()


def pointwise_gram_sym2(g: MetricField, f, op_blocks):
    """Gram of a pointwise symmetric operator on sym2: int <O h, k> e^{-f} mu.

    op_blocks: per-chart arrays (n1, n2, 2, 2, 2, 2) with O(h)_ij =
    op[..., i, j, a, b] h_ab (must be symmetric as a quadratic form).
    """
    dm = dofmap(g.atlas, "sym2")
    geo = geometry_of(g)
    parts = []
    for c in range(g.atlas.n_charts):
        w = _node_weight(g, f, c)
        gi = geo.inv[c]
        # quadratic form <O h, k>_g = k_ij g^{ia} g^{jb} O_ab^{cd} h_cd
        Q = np.einsum("...ia,...jb,...abcd->...ijcd", gi, gi, op_blocks[c])
        Qf = Q.reshape(tuple(g.atlas.shape) + (4, 4))
        Qp = np.einsum("pr,...rs,sq->...pq", _R_SYM2, Qf, _E_SYM2) * w[..., None, None]
        parts.append(pointwise_matrix(0.5 * (Qp + np.swapaxes(Qp, -1, -2))))
    Kfull = sp.block_diag(parts, format="csr")
    K = (dm.P.T @ Kfull @ dm.P).tocsr()
    return ((K + K.T) * 0.5).tocsr()


def curvature_blocks(g: MetricField):
    """Per-chart blocks of the curvature action R(h)_ij = R_kilj h^kl."""
    geo = geometry_of(g)
    out = []
    for c in range(g.atlas.n_charts):
        gi = geo.inv[c]
        # R(h)_ij = R_kilj g^ka g^lb h_ab
        blocks = np.einsum("...kilj,...ka,...lb->...ijab", geo.riemann[c], gi, gi)
        blocks = 0.5 * (blocks + np.einsum("...ijab->...jiab", blocks))
        blocks = 0.5 * (blocks + np.einsum("...ijab->...ijba", blocks))
        out.append(blocks)
    return out


# ---------------------------------------------------------------------------
# strong-form DOF operators
# ---------------------------------------------------------------------------


def strong_dof_operator(atlas, chart_mats, kind_in, kind_out):
    """Owner rows of per-chart strong matrices, composed with ghost interp."""
    dm_in = dofmap(atlas, kind_in)
    dm_out = dofmap(atlas, kind_out)
    full = sp.block_diag(chart_mats, format="csr")
    return (dm_out.R @ full @ dm_in.P).tocsr()


def alpha_chart_matrix(g: MetricField, chart):
    """Strong matrix of X -> L_X g on one chart (vector -> packed sym2)."""
    covd = _covd_covector_mats(g, chart)  # on covectors
    flat_blocks = pointwise_matrix(g.data[chart])  # X^i -> X_i
    n = int(np.prod(g.atlas.shape))
    rows = []
    # packed rows: (00) = 2 nabla_0 w_0 ; (01) = nabla_0 w_1 + nabla_1 w_0 ; (11) = 2 nabla_1 w_1
    sel = {
        0: [(2.0, 0, 0)],
        1: [(1.0, 0, 1), (1.0, 1, 0)],
        2: [(2.0, 1, 1)],
    }

    def comp_select(mat, i):
        """rows of component i from a (node,2) output."""
        n2 = mat.shape[0] // 2
        idx = np.arange(n2) * 2 + i
        return mat[idx, :]

    out_rows = []
    for p in range(3):
        acc = None
        for coef, a, i in sel[p]:
            term = coef * comp_select(covd[a], i)
            acc = term if acc is None else acc + term
        out_rows.append(acc)
    # interleave packed comps: build (3n x 2n) by stacking with row permutation
    stacked = sp.vstack(out_rows, format="csr")
    perm = np.empty(3 * n, dtype=np.int64)
    for p in range(3):
        perm[np.arange(n) * 3 + p] = p * n + np.arange(n)
    Pm = sp.csr_matrix((np.ones(3 * n), (np.arange(3 * n), perm)), shape=(3 * n, 3 * n))
    return (Pm @ stacked @ flat_blocks).tocsr()


def alpha_dof_operator(g: MetricField):
    """Owner-row Lie-derivative map on DOFs (vector -> sym2)."""
    mats = [alpha_chart_matrix(g, c) for c in range(g.atlas.n_charts)]
    return strong_dof_operator(g.atlas, mats, "vector", "sym2")


def divergence_chart_matrix(g: MetricField, chart, f=None):
    """Strong matrix of delta_f on one chart (packed sym2 -> covector)."""
    geo = geometry_of(g)
    covd = _covd_sym2_mats(g, chart)
    gi = geo.inv[chart]
    n = int(np.prod(g.atlas.shape))

    def comp_select(mat, comps_out, p_in=3):
        nrows = mat.shape[0] // p_in
        idx = np.arange(nrows) * p_in + comps_out
        return mat[idx, :]

    # (delta h)_j = g^{ai} nabla_a h_{ij}; packed input comps (00,01,11)
    # nabla_a output is packed (node, 3); expand to full (i,j) via E
    rows_j = []
    E = sp.kron(sp.identity(n), sp.csr_matrix(_E_SYM2), format="csr")
    for j in range(2):
        acc = None
        for a in range(2):
            full = E @ covd[a]  # (node,4) comps (00,01,10,11)
            for i in range(2):
                comp = i * 2 + j
                term = diag_weights(gi[..., a, i].reshape(-1)) @ comp_select(
                    full, comp, 4
                )
                acc = term if acc is None else acc + term
        rows_j.append(acc)
    stacked = sp.vstack(rows_j, format="csr")
    perm = np.empty(2 * n, dtype=np.int64)
    for j in range(2):
        perm[np.arange(n) * 2 + j] = j * n + np.arange(n)
    Pm = sp.csr_matrix((np.ones(2 * n), (np.arange(2 * n), perm)), shape=(2 * n, 2 * n))
    out = Pm @ stacked
    if f is not None:
        from .calculus import grad

        gf = grad(g, f).data[chart]  # (n1,n2,2) contravariant
        # -(h(grad f, .))_j = -h_{aj} gf^a : blocks (2 out, 3 packed in)
        blocks = np.zeros(tuple(g.atlas.shape) + (2, 4))
        fullidx = ((0, 0), (0, 1), (1, 0), (1, 1))
        for j in range(2):
            for s, (a, b) in enumerate(fullidx):
                if b == j:
                    blocks[..., j, s] -= gf[..., a]
        blocks = np.einsum("...js,sq->...jq", blocks, _E_SYM2)
        out = out + pointwise_matrix(blocks)
    return out.tocsr()


def divergence_dof_operator(g: MetricField, f=None):
    mats = [divergence_chart_matrix(g, c, f) for c in range(g.atlas.n_charts)]
    return strong_dof_operator(g.atlas, mats, "sym2", "covector")


# ---------------------------------------------------------------------------
# assembled operator record
# ---------------------------------------------------------------------------


@dataclass
class AssembledOperator:
    """A sparse map between discretized field spaces.

    ``matrix`` either represents the operator pencil together with
    ``mass`` (symmetric energy assemblies; eigenvalues of (matrix, mass)
    approximate the operator's spectrum) or a strong-form rectangular
    operator between DOF spaces (mass = domain mass, mass_codomain set).
    """

    op_spec: str
    matrix: sp.csr_matrix
    mass: sp.csr_matrix | None
    domain: tuple
    codomain: tuple
    symmetry: str | None = None  # None | "plain" | "twisted"
    mass_codomain: sp.csr_matrix | None = None
    meta: dict = field(default_factory=dict)

    def verify_symmetry(self, rng=None, n_probes=5, tol=1e-8):
        """Check declared symmetry on random vectors, relative scale."""
        if self.symmetry is None:
            return True
        rng = rng or np.random.default_rng(0)
        K = self.matrix
        scale = spla.norm(K, ord=np.inf) + 1e-300
        for _ in range(n_probes):
            x = rng.normal(size=K.shape[1])
            y = rng.normal(size=K.shape[0])
            d = abs(x @ (K @ y) - y @ (K @ x))
            ref = scale * float(np.linalg.norm(x) * np.linalg.norm(y))
            if d > tol * ref:
                return False
        return True


def eigensolve(A: AssembledOperator, count, sigma=None, seed=0):
    """Smallest-magnitude eigenpairs of the generalized pencil (K, M)."""
    K, M = A.matrix, A.mass
    if K.shape[0] != K.shape[1] or M is None:
        raise ValueError("eigensolve requires a square pencil with a mass matrix")
    return eigensolve_pencil(K, M, count, sigma=sigma, seed=seed)


def eigensolve_pencil(K, M, count, sigma=None, seed=0):
    n = K.shape[0]
    count = min(count, n - 2)
    if sigma is None:
        scale = _pencil_scale(K, M)
        sigma = -1e-6 * scale
    rng = np.random.default_rng(seed)
    v0 = rng.normal(size=n)
    vals, vecs = spla.eigsh(K, k=count, M=M, sigma=sigma, which="LM", v0=v0)
    order = np.argsort(np.abs(vals))
    return vals[order], vecs[:, order]


def _pencil_scale(K, M):
    dK = np.abs(K.diagonal())
    dM = np.abs(M.diagonal())
    return float(np.median(dK[dM > 0] / dM[dM > 0]) + 1e-300)


@dataclass
class NearKernelResult:
    basis: np.ndarray  # (ndof, dim)
    sigmas: np.ndarray  # all computed singular values (ascending)
    dim: int
    sigma_kept_max: float
    sigma_rejected_min: float

    @property
    def gap(self):
        if self.sigma_kept_max == 0.0:
            return np.inf
        return self.sigma_rejected_min / self.sigma_kept_max


def near_kernel(A, gap_ratio=1e-3, count=10, zero_floor=None, seed=0):
    """Gap-certified near-kernel of a symmetric pencil.

    Returns the singular vectors whose singular values sigma satisfy
    sigma < gap_ratio * sigma_next where sigma_next is the smallest
    rejected singular value.  An empty kernel is certified when the
    smallest singular value exceeds zero_floor / gap_ratio.  If no
    admissible split exists the dimension is undecidable at this
    resolution and ``UndecidedError`` is raised.
    """
    if isinstance(A, AssembledOperator):
        K, M = A.matrix, A.mass
    else:
        K, M = A
    vals, vecs = eigensolve_pencil(K, M, count, seed=seed)
    sig = np.abs(vals)
    order = np.argsort(sig)
    sig = sig[order]
    vecs = vecs[:, order]
    scale = _pencil_scale(K, M)
    if zero_floor is None:
        zero_floor = 1e-12 * scale

    # candidate splits: kept = sig[:j+1] with sig[j] < gap_ratio * sig[j+1]
    candidates = [j for j in range(len(sig) - 1) if sig[j] < gap_ratio * sig[j + 1]]
    if candidates:
        best = max(candidates, key=lambda j: sig[j + 1] / max(sig[j], 1e-300))
        dim = best + 1
        return NearKernelResult(
            basis=vecs[:, :dim],
            sigmas=sig,
            dim=dim,
            sigma_kept_max=float(sig[best]),
            sigma_rejected_min=float(sig[best + 1]),
        )
    if sig[0] > zero_floor / gap_ratio:
        # certified empty: smallest singular value is far above numerical zero
        return NearKernelResult(
            basis=np.zeros((K.shape[0], 0)),
            sigmas=sig,
            dim=0,
            sigma_kept_max=float(zero_floor),
            sigma_rejected_min=float(sig[0]),
        )
    raise UndecidedError(
        "kernel dimension undecidable at this resolution: no spectral gap "
        f"(singular values {sig[:6]})"
    )
