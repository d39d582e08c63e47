"""Locally conservative flux postprocessing of continuous-Galerkin pressures.

A pressure solution (fine reference, multiscale, or enriched multiscale) is
turned into signed normal fluxes on the dual mesh: per element, vertex
targets built from the level-1 basis functions feed a singular 4x4 balance
system whose pinned solve yields the four interior half-edge fluxes; dual
faces aggregate the half-edges of the two adjacent elements and satisfy
per-control-volume conservation. A per-control-volume Neumann solve with the
postprocessed traces as data, re-postprocessed cell by cell, downscales the
field to the fine dual mesh.

Flux storage convention: ``Fv[j, i]`` is the flux through the vertical dual
face between vertices (i, j) and (i+1, j), positive in +x; ``Fh[j, i]`` the
flux through the horizontal face between (i, j) and (i, j+1), positive in
+y; the four boundary arrays hold outward fluxes through the domain-boundary
faces of the boundary control volumes. Flipping a face orientation negates
its value.
"""

import numpy as np

from . import fem
from .mesh import QUADRANT_WEIGHTS, RectMesh

#: quadrant-edge incidence: rows are quadrants (bl, br, tr, tl), columns the
#: interior half-edges (vb, hr, vt, hl); +1 where the global edge normal
#: (+x for vertical, +y for horizontal) points out of the quadrant
B_INCIDENCE = np.array(
    [
        [1.0, 0.0, 0.0, 1.0],
        [-1.0, 1.0, 0.0, 0.0],
        [0.0, -1.0, -1.0, 0.0],
        [0.0, 0.0, 1.0, -1.0],
    ]
)

# -int over a half-edge of grad(phi_eta) . n for a unit cell and unit
# coefficient: rows (vb, vt) scale with hy/hx, rows (hl, hr) with hx/hy
_PSI_V = np.array([[3.0, -3.0, -1.0, 1.0], [1.0, -1.0, -3.0, 3.0]]) / 8.0
_PSI_H = np.array([[3.0, 1.0, -1.0, -3.0], [1.0, 3.0, -3.0, -1.0]]) / 8.0

_EDGE_CORNERS = {"left": (0, 3), "right": (1, 2), "bottom": (0, 1), "top": (3, 2)}


class CompatibilityError(RuntimeError):
    """An element or control volume violates its compatibility condition;
    this signals an upstream bug, not a tolerance issue."""


class FluxField:
    """Signed normal fluxes on the dual mesh of one level ('coarse' or 'fine')."""

    def __init__(self, mesh, level, Fv=None, Fh=None,
                 bleft=None, bright=None, bbottom=None, btop=None):
        self.mesh = mesh
        self.level = level
        self.Fv = Fv if Fv is not None else np.zeros((mesh.nvy, mesh.nx))
        self.Fh = Fh if Fh is not None else np.zeros((mesh.ny, mesh.nvx))
        self.bleft = bleft if bleft is not None else np.zeros(mesh.nvy)
        self.bright = bright if bright is not None else np.zeros(mesh.nvy)
        self.bbottom = bbottom if bbottom is not None else np.zeros(mesh.nvx)
        self.btop = btop if btop is not None else np.zeros(mesh.nvx)

    def divergence(self):
        """Net outward flux per control volume, shape (nvy, nvx)."""
        m = self.mesh
        out = np.zeros((m.nvy, m.nvx))
        out[:, :-1] += self.Fv
        out[:, 1:] -= self.Fv
        out[:-1, :] += self.Fh
        out[1:, :] -= self.Fh
        out[:, 0] += self.bleft
        out[:, -1] += self.bright
        out[0, :] += self.bbottom
        out[-1, :] += self.btop
        return out

    def gross(self):
        """Sum of absolute incident fluxes per control volume (audit scale)."""
        m = self.mesh
        out = np.zeros((m.nvy, m.nvx))
        out[:, :-1] += np.abs(self.Fv)
        out[:, 1:] += np.abs(self.Fv)
        out[:-1, :] += np.abs(self.Fh)
        out[1:, :] += np.abs(self.Fh)
        out[:, 0] += np.abs(self.bleft)
        out[:, -1] += np.abs(self.bright)
        out[0, :] += np.abs(self.bbottom)
        out[-1, :] += np.abs(self.btop)
        return out

    def face_lengths_v(self):
        m = self.mesh
        w = np.full(m.nvy, m.hy)
        w[0] = w[-1] = m.hy / 2
        return np.tile(w[:, None], (1, m.nx))

    def face_lengths_h(self):
        m = self.mesh
        w = np.full(m.nvx, m.hx)
        w[0] = w[-1] = m.hx / 2
        return np.tile(w[None, :], (m.ny, 1))

    def boundary_outflux(self):
        return (
            self.bleft.sum() + self.bright.sum() + self.bbottom.sum() + self.btop.sum()
        )

    def copy(self):
        return FluxField(
            self.mesh, self.level, self.Fv.copy(), self.Fh.copy(),
            self.bleft.copy(), self.bright.copy(), self.bbottom.copy(), self.btop.copy(),
        )


def _psi_cells(mesh, lamk_cells):
    """Closed-form half-edge flux matrices of every cell, shape (nc, 4, 4)."""
    rv = mesh.hy / mesh.hx
    rh = mesh.hx / mesh.hy
    psi = np.empty((mesh.n_cells, 4, 4))
    psi[:, 0, :] = _PSI_V[0]
    psi[:, 2, :] = _PSI_V[1]
    psi[:, 0:3:2, :] *= rv
    psi[:, 3, :] = _PSI_H[0] * rh
    psi[:, 1, :] = _PSI_H[1] * rh
    return psi * np.asarray(lamk_cells).ravel()[:, None, None]


def _nodal_edge_loads(values_ab, length):
    """Per-edge (G_a, G_b, D_a, D_b) for pointwise linear data on an edge.

    G is the data weighted by the linear basis trace (matching the assembled
    Neumann load); D is the plain integral over the half-edge nearest each
    corner.
    """
    a, b = values_ab[:, 0], values_ab[:, 1]
    ga = length * (2 * a + b) / 6.0
    gb = length * (a + 2 * b) / 6.0
    da = length * (3 * a + b) / 8.0
    db = length * (a + 3 * b) / 8.0
    return ga, gb, da, db


def cellwise_fluxes(mesh, lamk_cells, p_nodal, q_nodal=None, side_data=None,
                    lump_sides=(), compat_tol=1e-8):
    """Treat every cell as an element and solve its 4x4 balance system.

    ``side_data`` maps a side name to either ('integrated', per-edge outward
    fluxes) or ('nodal', per-edge endpoint values of the outward flux
    density). Sides in ``lump_sides`` (Dirichlet boundary) get their corner
    targets lumped onto the boundary half-edges instead.

    Returns (per-cell interior half-edge fluxes (nc, 4) in edge order
    (vb, hr, vt, hl), per-cell corner targets, boundary half-leg flux dict).
    """
    side_data = side_data or {}
    conn = mesh.conn()
    lamk = np.asarray(lamk_cells, dtype=float).ravel()
    p = np.asarray(p_nodal, dtype=float).ravel()
    pc = p[conn]
    ke = fem.local_stiffness(mesh.hx, mesh.hy, 1.0)
    Q = lamk[:, None] * (pc @ ke)
    if q_nodal is None:
        qc = np.zeros_like(pc)
    else:
        qc = np.asarray(q_nodal, dtype=float).ravel()[conn]
    me = fem.local_mass(mesh.hx, mesh.hy, 1.0)
    F = qc @ me
    quadq = (mesh.hx * mesh.hy) * (qc @ QUADRANT_WEIGHTS.T)

    G = np.zeros_like(F)
    D = np.zeros_like(F)
    for side, (kind, values) in side_data.items():
        pairs, cells = mesh.boundary_edges(side)
        c_a, c_b = _EDGE_CORNERS[side]
        length = mesh.hy if side in ("left", "right") else mesh.hx
        values = np.asarray(values, dtype=float)
        if kind == "integrated":
            ga = gb = da = db = values / 2.0
        elif kind == "nodal":
            ga, gb, da, db = _nodal_edge_loads(values, length)
        else:
            raise ValueError(f"unknown side data kind {kind!r}")
        G[cells, c_a] += ga
        G[cells, c_b] += gb
        D[cells, c_a] += da
        D[cells, c_b] += db

    targets = F - Q - G
    rhs = quadq - targets - D
    cell_q = quadq.sum(axis=1)
    defect = np.abs(targets.sum(axis=1) + D.sum(axis=1) - cell_q)
    scale = np.maximum(np.abs(cell_q), np.abs(targets).sum(axis=1) + np.abs(D).sum(axis=1))
    bad = defect > compat_tol * np.maximum(scale, 1e-300) + 1e-300
    if np.any(bad):
        c = int(np.argmax(defect / np.maximum(scale, 1e-300)))
        raise CompatibilityError(
            f"cell {c}: target sum misses the source integral by {defect[c]:.3e} "
            f"(scale {scale[c]:.3e})"
        )

    psi = _psi_cells(mesh, lamk)
    T = B_INCIDENCE[None, :, :] @ psi
    pin = 1.0 + np.abs(T).max(axis=(1, 2))
    T[:, 0, 0] += pin
    alpha = np.linalg.solve(T, rhs[..., None])[..., 0]
    qe = np.einsum("cij,cj->ci", psi, alpha)

    halflegs = {}
    for side in lump_sides:
        pairs, cells = mesh.boundary_edges(side)
        c_a, c_b = _EDGE_CORNERS[side]
        out = np.zeros((cells.size, 2))
        for k, corner in enumerate((c_a, c_b)):
            w = np.ones(cells.size)
            # a domain-corner cell splits its target between two lumped legs
            other = _other_boundary_side(mesh, side, corner, cells)
            for idx, os in other:
                if os in lump_sides:
                    w[idx] = 0.5
            out[:, k] = w * targets[cells, corner]
        halflegs[side] = out
    for side, (kind, values) in side_data.items():
        pairs, cells = mesh.boundary_edges(side)
        values = np.asarray(values, dtype=float)
        if kind == "integrated":
            halflegs[side] = np.column_stack([values / 2.0, values / 2.0])
        else:
            length = mesh.hy if side in ("left", "right") else mesh.hx
            _, _, da, db = _nodal_edge_loads(values, length)
            halflegs[side] = np.column_stack([da, db])
    return qe, targets, halflegs


def _other_boundary_side(mesh, side, corner, cells):
    """For boundary cells of one side, find which of them have the given
    corner on another domain side; yields (cell position index, other side)."""
    out = []
    first, last = 0, cells.size - 1
    if side in ("left", "right"):
        if corner in (0, 1):
            out.append((first, "bottom"))
        else:
            out.append((last, "top"))
    else:
        if corner in (0, 3):
            out.append((first, "left"))
        else:
            out.append((last, "right"))
    return out


def _field_from_cell_edges(mesh, qe, level):
    """Assemble dual-face fluxes from per-cell interior half-edges."""
    nx, ny = mesh.nx, mesh.ny
    vb = qe[:, 0].reshape(ny, nx)
    hr = qe[:, 1].reshape(ny, nx)
    vt = qe[:, 2].reshape(ny, nx)
    hl = qe[:, 3].reshape(ny, nx)
    field = FluxField(mesh, level)
    field.Fv[:-1, :] += vb
    field.Fv[1:, :] += vt
    field.Fh[:, :-1] += hl
    field.Fh[:, 1:] += hr
    return field


def _apply_boundary_halflegs(field, halflegs):
    """Accumulate per-edge (corner-a, corner-b) half-leg outward fluxes into
    the boundary CV arrays."""
    for side, legs in halflegs.items():
        arr = {
            "left": field.bleft, "right": field.bright,
            "bottom": field.bbottom, "top": field.btop,
        }[side]
        arr[:-1] += legs[:, 0]
        arr[1:] += legs[:, 1]


def postprocess_fine(mesh, lamk_cells, p_nodal, q_nodal, bcs):
    """Conservative fine-dual flux field from a fine CG solution.

    This is the reference pipeline: every fine cell is an element with the
    nodal Q1 basis. Neumann sides carry the boundary data pointwise;
    Dirichlet sides receive the consistent lumped corner targets, which makes
    every control volume (Dirichlet ones included) exactly conservative.
    """
    side_data = {}
    xy = mesh.vertex_coords()
    for side in bcs.neumann_sides():
        pairs, _ = mesh.boundary_edges(side)
        vals = np.column_stack(
            [
                bcs.value(side, xy[pairs[:, 0], 0], xy[pairs[:, 0], 1]),
                bcs.value(side, xy[pairs[:, 1], 0], xy[pairs[:, 1], 1]),
            ]
        )
        side_data[side] = ("nodal", vals)
    qe, _, halflegs = cellwise_fluxes(
        mesh, lamk_cells, p_nodal, q_nodal, side_data, tuple(bcs.dirichlet_sides())
    )
    field = _field_from_cell_edges(mesh, qe, "fine")
    _apply_boundary_halflegs(field, halflegs)
    return field


def raw_flux_fine(mesh, lamk_cells, p_nodal):
    """Direct dual-edge integration of the CG flux, no postprocessing.

    Not locally conservative for heterogeneous coefficients; serves as the
    counterexample motivating the postprocessed pipelines.
    """
    lamk = np.asarray(lamk_cells, dtype=float).ravel()
    p = np.asarray(p_nodal, dtype=float).ravel()
    pc = p[mesh.conn()]
    psi = _psi_cells(mesh, lamk)
    qe = np.einsum("cij,cj->ci", psi, pc)
    field = _field_from_cell_edges(mesh, qe, "fine")
    # one-sided traces on the domain boundary, exact per half-leg
    hx, hy = mesh.hx, mesh.hy
    for side in ("left", "right", "bottom", "top"):
        pairs, cells = mesh.boundary_edges(side)
        u = p[mesh.conn()[cells]]
        lk = lamk[cells]
        if side == "left":  # outward -x: flux = +lam k dp/dx integrated over half-legs
            grad_a = ((u[:, 1] - u[:, 0]) * 0.75 + (u[:, 2] - u[:, 3]) * 0.25) / hx
            grad_b = ((u[:, 1] - u[:, 0]) * 0.25 + (u[:, 2] - u[:, 3]) * 0.75) / hx
            legs = np.column_stack([lk * grad_a, lk * grad_b]) * (hy / 2)
        elif side == "right":
            grad_a = ((u[:, 1] - u[:, 0]) * 0.75 + (u[:, 2] - u[:, 3]) * 0.25) / hx
            grad_b = ((u[:, 1] - u[:, 0]) * 0.25 + (u[:, 2] - u[:, 3]) * 0.75) / hx
            legs = -np.column_stack([lk * grad_a, lk * grad_b]) * (hy / 2)
        elif side == "bottom":  # outward -y: flux = +lam k dp/dy
            grad_a = ((u[:, 3] - u[:, 0]) * 0.75 + (u[:, 2] - u[:, 1]) * 0.25) / hy
            grad_b = ((u[:, 3] - u[:, 0]) * 0.25 + (u[:, 2] - u[:, 1]) * 0.75) / hy
            legs = np.column_stack([lk * grad_a, lk * grad_b]) * (hx / 2)
        else:
            grad_a = ((u[:, 3] - u[:, 0]) * 0.75 + (u[:, 2] - u[:, 1]) * 0.25) / hy
            grad_b = ((u[:, 3] - u[:, 0]) * 0.25 + (u[:, 2] - u[:, 1]) * 0.75) / hy
            legs = -np.column_stack([lk * grad_a, lk * grad_b]) * (hx / 2)
        _apply_boundary_halflegs(field, {side: legs})
    return field


class ElementFluxSystem:
    """Per-element record of the coarse postprocess: vertex targets, the
    pinned 4x4 system, its solved coefficients, and the four interior
    half-edge fluxes with their fine-segment decompositions."""

    def __init__(self, element, targets, data_fluxes, psi, matrix, rhs, alpha,
                 q_edges, segments):
        self.element = element
        self.targets = targets
        self.data_fluxes = data_fluxes
        self.psi = psi
        self.matrix = matrix
        self.rhs = rhs
        self.alpha = alpha
        self.q_edges = q_edges
        self.segments = segments


def _halfedge_segments(r, hfx, hfy, lamk_rc, u_loc, conn_loc):
    """Per-segment fluxes of -lam k grad(u) . n across the interior half-edges
    of one coarse element, midpoint rule per fine segment (exact for bilinear
    u and per-cell constant coefficient), two-sided traces averaged on the
    fine mesh line through the element center.

    Returns shape (4, r//2) in edge order (vb, hr, vt, hl); r == 1 uses the
    single-cell closed form.
    """
    if r == 1:
        psi = _psi_cells(RectMesh(1, 1, hfx, hfy), lamk_rc.ravel())[0]
        return (psi @ u_loc).reshape(4, 1)
    uc = u_loc[conn_loc]
    dudx = ((uc[:, 1] - uc[:, 0] + uc[:, 2] - uc[:, 3]) / (2 * hfx)).reshape(r, r)
    dudy = ((uc[:, 3] - uc[:, 0] + uc[:, 2] - uc[:, 1]) / (2 * hfy)).reshape(r, r)
    lk = lamk_rc.reshape(r, r)
    m = r // 2
    vline = -hfy * 0.5 * (lk[:, m - 1] * dudx[:, m - 1] + lk[:, m] * dudx[:, m])
    hline = -hfx * 0.5 * (lk[m - 1, :] * dudy[m - 1, :] + lk[m, :] * dudy[m, :])
    return np.stack([vline[:m], hline[m:], vline[m:], hline[:m]])


def _quadrant_masks(r):
    """Boolean masks of the four (r/2)x(r/2) fine-cell blocks of an element."""
    if r == 1:
        return None
    jj, ii = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
    lo_i, lo_j = ii < r // 2, jj < r // 2
    return np.stack(
        [(lo_i & lo_j).ravel(), (~lo_i & lo_j).ravel(),
         (~lo_i & ~lo_j).ravel(), (lo_i & ~lo_j).ravel()]
    )


class PostprocessResult:
    """Coarse flux field plus the per-element systems and the fine-resolution
    boundary flux segments needed by the downscaling pass."""

    def __init__(self, grid, field, elements, boundary_segments):
        self.grid = grid
        self.field = field
        self.elements = elements
        self.boundary_segments = boundary_segments


def _corner_vertex_ids(grid, I, J):
    c = grid.coarse
    return [c.vid(I, J), c.vid(I + 1, J), c.vid(I + 1, J + 1), c.vid(I, J + 1)]


def postprocess_coarse(grid, chi_all, lamk_cells, p_fine, q_nodal, bcs,
                       compat_tol=1e-8):
    """Element-by-element conservative postprocess of a CG pressure.

    ``p_fine`` is the fine nodal pressure (projected multiscale or fine
    reference); ``chi_all`` the per-element level-1 basis restrictions. The
    vertex targets are exact fine-cell quadratures of the basis-weighted
    residual; elements adjacent to the Neumann boundary honor the boundary
    data pointwise with their targets adjusted accordingly; elements adjacent
    to the Dirichlet boundary lump the corner targets onto the boundary legs,
    which extends per-control-volume conservation to the Dirichlet vertices.

    Returns a PostprocessResult with the coarse-dual FluxField.
    """
    r = grid.r
    nxc, nyc = grid.nx, grid.ny
    sub0 = grid.element_submesh(0, 0)
    conn_loc = sub0.conn()
    hfx, hfy = grid.fine.hx, grid.fine.hy
    ke = fem.local_stiffness(hfx, hfy, 1.0)
    me = fem.local_mass(hfx, hfy, 1.0)
    qmasks = _quadrant_masks(r)
    lamk = np.asarray(lamk_cells, dtype=float).ravel()
    p = np.asarray(p_fine, dtype=float).ravel()
    q = (
        np.zeros(grid.fine.n_vertices)
        if q_nodal is None
        else np.asarray(q_nodal, dtype=float).ravel()
    )
    xy = grid.fine.vertex_coords()

    neumann = set(bcs.neumann_sides())
    dirichlet = set(bcs.dirichlet_sides())
    m = r // 2 if r > 1 else 1
    elements = {}
    qe_all = np.zeros((grid.coarse.n_cells, 4))

    # which domain sides each element touches
    def _element_sides(I, J):
        sides = []
        if I == 0:
            sides.append("left")
        if I == nxc - 1:
            sides.append("right")
        if J == 0:
            sides.append("bottom")
        if J == nyc - 1:
            sides.append("top")
        return sides

    # fine boundary edge spans of side legs: corner -> local fine edge range
    def _legs(side):
        # (corner adjacent to the low end, corner adjacent to the high end)
        if side == "left":
            return 0, 3
        if side == "right":
            return 1, 2
        if side == "bottom":
            return 0, 1
        return 3, 2

    boundary_segments = {
        "left": np.zeros(grid.Ny), "right": np.zeros(grid.Ny),
        "bottom": np.zeros(grid.Nx), "top": np.zeros(grid.Nx),
    }
    bnd_vertex = {
        "left": np.zeros(grid.coarse.nvy), "right": np.zeros(grid.coarse.nvy),
        "bottom": np.zeros(grid.coarse.nvx), "top": np.zeros(grid.coarse.nvx),
    }

    for J in range(nyc):
        for I in range(nxc):
            e = grid.coarse.cid(I, J)
            vids = grid.element_fine_vertex_ids(I, J)
            cids = grid.element_fine_cell_ids(I, J)
            p_loc = p[vids]
            q_loc = q[vids]
            lk = lamk[cids]
            chi_e = chi_all[e]
            chi_cells = chi_e[:, conn_loc]  # (4, nc_loc, 4)
            pc = p_loc[conn_loc]
            qc = q_loc[conn_loc]
            # contract the stiffness with p per cell first: the corner sums of
            # w then cancel exactly under the partition of unity
            w = lk[:, None] * (pc @ ke)
            Q = np.einsum("ci,zci->z", w, chi_cells)
            F = np.einsum("ci,zci->z", qc @ me, chi_cells)
            mcell = (hfx * hfy / 4) * qc.sum(axis=1)
            if r == 1:
                quadq = (hfx * hfy) * (qc @ QUADRANT_WEIGHTS.T)[0]
            else:
                quadq = np.array([mcell[qm].sum() for qm in qmasks])

            G = np.zeros(4)
            D = np.zeros(4)
            gn_segs = {}
            gn_leg_values = {}
            for side in _element_sides(I, J):
                if side not in neumann:
                    continue
                if side in ("left", "right"):
                    loc_i = 0 if side == "left" else r
                    edge_nodes = np.array([grid.fine.vid(I * r + loc_i, J * r + t) for t in range(r + 1)])
                else:
                    loc_j = 0 if side == "bottom" else r
                    edge_nodes = np.array([grid.fine.vid(I * r + t, J * r + loc_j) for t in range(r + 1)])
                gvals = bcs.value(side, xy[edge_nodes, 0], xy[edge_nodes, 1])
                length = hfy if side in ("left", "right") else hfx
                # local chi trace along the side, per basis function
                loc_ids = (
                    np.arange(r + 1) * (r + 1) + (0 if side == "left" else r)
                    if side in ("left", "right")
                    else np.arange(r + 1) + (0 if side == "bottom" else r * (r + 1))
                )
                tr = chi_e[:, loc_ids]  # (4, r+1)
                a, b = gvals[:-1], gvals[1:]
                ta, tb = tr[:, :-1], tr[:, 1:]
                G += (length / 6.0) * (2 * a * ta + a * tb + b * ta + 2 * b * tb).sum(axis=1)
                seg = length * (a + b) / 2.0
                clo, c_hi = _legs(side)
                if r > 1:
                    leg_lo, leg_hi = seg[:m].sum(), seg[m:].sum()
                else:
                    leg_lo = length * (3 * a[0] + b[0]) / 8.0
                    leg_hi = length * (a[0] + 3 * b[0]) / 8.0
                D[clo] += leg_lo
                D[c_hi] += leg_hi
                gn_segs[side] = seg
                gn_leg_values[side] = (leg_lo, leg_hi)

            targets = F - Q - G
            rhs = quadq - targets - D
            cell_q = quadq.sum()
            scale = max(abs(cell_q), np.abs(targets).sum() + np.abs(D).sum())
            defect = abs(targets.sum() + D.sum() - cell_q)
            if defect > compat_tol * max(scale, 1e-300) + 1e-300:
                raise CompatibilityError(
                    f"element ({I},{J}): compatibility defect {defect:.3e} vs scale {scale:.3e}"
                )

            segs_chi = np.stack(
                [_halfedge_segments(r, hfx, hfy, lk, chi_e[c], conn_loc) for c in range(4)]
            )  # (4 basis, 4 edges, m)
            psi = segs_chi.sum(axis=2).T  # (4 edges, 4 basis)
            T = B_INCIDENCE @ psi
            T = T.copy()
            T[0, 0] += 1.0 + np.abs(T).max()
            alpha = np.linalg.solve(T, rhs)
            q_edges = psi @ alpha
            segments = np.einsum("z,zem->em", alpha, segs_chi)
            qe_all[e] = q_edges
            elements[(I, J)] = ElementFluxSystem(
                (I, J), targets, D, psi, T, rhs, alpha, q_edges, segments
            )

            # domain-boundary flux legs: per-vertex totals plus the fine
            # segment distribution used by the downscaling pass
            corner_sides = {0: ("left", "bottom"), 1: ("right", "bottom"),
                            2: ("right", "top"), 3: ("left", "top")}
            for side in _element_sides(I, J):
                clo, c_hi = _legs(side)
                vlo = J if side in ("left", "right") else I
                if side in neumann:
                    leg_lo, leg_hi = gn_leg_values[side]
                    seg_full = gn_segs[side]
                else:
                    weights = []
                    for c in (clo, c_hi):
                        other = next(s for s in corner_sides[c] if s != side)
                        on_other = other in _element_sides(I, J) and other in dirichlet
                        weights.append(0.5 if on_other else 1.0)
                    leg_lo = weights[0] * targets[clo]
                    leg_hi = weights[1] * targets[c_hi]
                    if r > 1:
                        seg_full = np.concatenate(
                            [np.full(m, leg_lo / m), np.full(m, leg_hi / m)]
                        )
                    else:
                        seg_full = np.array([leg_lo + leg_hi])
                bnd_vertex[side][vlo] += leg_lo
                bnd_vertex[side][vlo + 1] += leg_hi
                boundary_segments[side][vlo * r:(vlo + 1) * r] += seg_full

    field = _field_from_cell_edges(grid.coarse, qe_all, "coarse")
    field.bleft += bnd_vertex["left"]
    field.bright += bnd_vertex["right"]
    field.bbottom += bnd_vertex["bottom"]
    field.btop += bnd_vertex["top"]
    return PostprocessResult(grid, field, elements, boundary_segments)


def downscale(grid, result, lamk_cells, q_nodal, compat_tol=1e-9):
    """Fine-dual conservative flux field from a coarse postprocess result.

    For every control volume a Neumann problem is solved on its fine submesh
    with the postprocessed fluxes (decomposed into fine segments, shared
    identically by neighboring volumes) as boundary data, then re-postprocessed
    cell by cell. All per-volume problems are independent.

    Returns (FluxField at 'fine' level, per-volume compatibility defects).
    """
    r = grid.r
    if r == 1:
        f = result.field
        out = FluxField(grid.fine, "fine", f.Fv.copy(), f.Fh.copy(),
                        f.bleft.copy(), f.bright.copy(), f.bbottom.copy(), f.btop.copy())
        return out, np.zeros((grid.ny + 1, grid.nx + 1))
    m = r // 2
    lamk = np.asarray(lamk_cells, dtype=float).ravel()
    q = (
        np.zeros(grid.fine.n_vertices)
        if q_nodal is None
        else np.asarray(q_nodal, dtype=float).ravel()
    )
    segs_of = {ij: es.segments for ij, es in result.elements.items()}
    bseg = result.boundary_segments
    qint_coarse = conservation_audit(result.field, q_nodal, grid)
    global_scale = qint_coarse.scale

    vb_all = np.zeros(grid.fine.n_cells)
    hr_all = np.zeros(grid.fine.n_cells)
    vt_all = np.zeros(grid.fine.n_cells)
    hl_all = np.zeros(grid.fine.n_cells)
    defects = np.zeros((grid.ny + 1, grid.nx + 1))

    def _vertical_line_segments(Ie, J, jlo, jhi):
        """Outward-agnostic (+x) per-segment fluxes along the dual line through
        the centers of element column Ie, fine rows [jlo, jhi)."""
        parts = []
        if J >= 1 and jlo < J * r:
            parts.append(segs_of[(Ie, J - 1)][2])  # vt rows [J*r - m, J*r)
        if J <= grid.ny - 1 and jhi > J * r:
            parts.append(segs_of[(Ie, J)][0])  # vb rows [J*r, J*r + m)
        return np.concatenate(parts)

    def _horizontal_line_segments(I, Je, ilo, ihi):
        parts = []
        if I >= 1 and ilo < I * r:
            parts.append(segs_of[(I - 1, Je)][1])  # hr cols [I*r - m, I*r)
        if I <= grid.nx - 1 and ihi > I * r:
            parts.append(segs_of[(I, Je)][3])  # hl cols [I*r, I*r + m)
        return np.concatenate(parts)

    if not hasattr(grid, "_cv_submesh_cache"):
        grid._cv_submesh_cache = {}
        for J in range(grid.ny + 1):
            for I in range(grid.nx + 1):
                bounds = grid.cv_fine_bounds(I, J)
                grid._cv_submesh_cache[(I, J)] = (bounds, grid.submesh(*bounds))

    for J in range(grid.ny + 1):
        for I in range(grid.nx + 1):
            (ilo, ihi, jlo, jhi), (sub, vids, cids) = grid._cv_submesh_cache[(I, J)]
            side_data = {}
            if ilo == 0:
                side_data["left"] = ("integrated", bseg["left"][jlo:jhi])
            else:
                side_data["left"] = (
                    "integrated", -_vertical_line_segments(I - 1, J, jlo, jhi)
                )
            if ihi == grid.Nx:
                side_data["right"] = ("integrated", bseg["right"][jlo:jhi])
            else:
                side_data["right"] = (
                    "integrated", _vertical_line_segments(I, J, jlo, jhi)
                )
            if jlo == 0:
                side_data["bottom"] = ("integrated", bseg["bottom"][ilo:ihi])
            else:
                side_data["bottom"] = (
                    "integrated", -_horizontal_line_segments(I, J - 1, ilo, ihi)
                )
            if jhi == grid.Ny:
                side_data["top"] = ("integrated", bseg["top"][ilo:ihi])
            else:
                side_data["top"] = (
                    "integrated", _horizontal_line_segments(I, J, ilo, ihi)
                )

            lk = lamk[cids]
            q_loc = q[vids]
            A = fem.stiffness_matrix(sub, lk)
            if q_nodal is None:
                q_load = np.zeros(sub.n_vertices)
            else:
                q_load = fem.mass_matrix(sub) @ q_loc
            b = q_load.copy()
            for side, (_, seg) in side_data.items():
                pairs, _ = sub.boundary_edges(side)
                np.add.at(b, pairs[:, 0], -np.asarray(seg) / 2.0)
                np.add.at(b, pairs[:, 1], -np.asarray(seg) / 2.0)
            defect = abs(b.sum())
            defects[J, I] = defect / global_scale
            if defect > compat_tol * global_scale:
                raise CompatibilityError(
                    f"control volume ({I},{J}): boundary data misses the source "
                    f"integral by {defect:.3e} (scale {global_scale:.3e})"
                )
            system = fem.LinearSystem(A, b, sub, pure_neumann=True)
            p_loc = fem.solve_neumann(system)
            qe, _, _ = cellwise_fluxes(sub, lk, p_loc, q_loc, side_data)
            vb_all[cids] = qe[:, 0]
            hr_all[cids] = qe[:, 1]
            vt_all[cids] = qe[:, 2]
            hl_all[cids] = qe[:, 3]

    qe_global = np.column_stack([vb_all, hr_all, vt_all, hl_all])
    field = _field_from_cell_edges(grid.fine, qe_global, "fine")
    for side in ("left", "right", "bottom", "top"):
        segs = bseg[side]
        arr = {
            "left": field.bleft, "right": field.bright,
            "bottom": field.bbottom, "top": field.btop,
        }[side]
        arr[:-1] += segs / 2.0
        arr[1:] += segs / 2.0
    return field, defects


class AuditReport:
    """Per-control-volume conservation residuals of a flux field."""

    def __init__(self, residuals, scale, level):
        self.residuals = residuals
        self.scale = scale
        self.level = level
        flat = np.abs(residuals).ravel()
        self.max_residual = float(flat.max())
        self.mean_residual = float(flat.mean())
        idx = int(flat.argmax())
        self.argmax = (idx % residuals.shape[1], idx // residuals.shape[1])

    @property
    def rel_max(self):
        return self.max_residual / self.scale

    @property
    def rel_mean(self):
        return self.mean_residual / self.scale


def conservation_audit(flux, q_nodal=None, grid=None):
    """Max and mean absolute conservation residual over all control volumes.

    The scale is the largest per-volume gross flux plus source magnitude,
    making the relative residual dimensionless even at contrast 1e6.
    """
    mesh = flux.mesh
    if q_nodal is None:
        qint = np.zeros((mesh.nvy, mesh.nvx))
    elif flux.level == "fine" or grid is None or grid.r == 1:
        qint = mesh.cv_source_integrals(q_nodal)
    else:
        # coarse CV integrals: sum fine-cell integrals of the Q1 interpolant
        q = np.asarray(q_nodal, dtype=float).ravel()
        qc = q[grid.fine.conn()]
        cell_int = (grid.fine.hx * grid.fine.hy / 4) * qc.sum(axis=1)
        qint = np.zeros((mesh.nvy, mesh.nvx))
        for J in range(grid.ny + 1):
            for I in range(grid.nx + 1):
                ilo, ihi, jlo, jhi = grid.cv_fine_bounds(I, J)
                _, _, cids = grid.submesh(ilo, ihi, jlo, jhi)
                qint[J, I] = cell_int[cids].sum()
    residuals = flux.divergence() - qint
    scale = max(float((flux.gross() + np.abs(qint)).max()), 1e-300)
    return AuditReport(residuals, scale, flux.level)


def velocity_error(flux, ref):
    """Relative L2 distance between two flux fields on the same dual mesh,
    edge-length weighted (fluxes compared as mean normal velocities)."""
    if flux.level != ref.level or flux.mesh.n_cells != ref.mesh.n_cells:
        raise ValueError("flux fields live on different dual meshes")
    lv = flux.face_lengths_v()
    lh = flux.face_lengths_h()
    num = ((flux.Fv - ref.Fv) ** 2 / lv).sum() + ((flux.Fh - ref.Fh) ** 2 / lh).sum()
    den = (ref.Fv**2 / lv).sum() + (ref.Fh**2 / lh).sum()
    m = flux.mesh
    for side in ("left", "right", "bottom", "top"):
        w = m.cv_side_lengths(side)
        a = getattr(flux, "b" + side)
        b = getattr(ref, "b" + side)
        num += ((a - b) ** 2 / w).sum()
        den += (b**2 / w).sum()
    return float(np.sqrt(num / max(den, 1e-300)))


def dump_flux(flux, path):
    """One CSV record per dual edge: level, kind, i, j, endpoints, flux."""
    m = flux.mesh
    with open(path, "w") as fh:
        fh.write("level,kind,i,j,x0,y0,x1,y1,flux\n")
        for j in range(m.nvy):
            for i in range(m.nx):
                x = m.x0 + (i + 0.5) * m.hx
                y0 = m.y0 + max(j - 0.5, 0.0) * m.hy
                y1 = m.y0 + min(j + 0.5, float(m.ny)) * m.hy
                fh.write(
                    f"{flux.level},v,{i},{j},{x:.12g},{y0:.12g},{x:.12g},{y1:.12g},"
                    f"{flux.Fv[j, i]:.12g}\n"
                )
        for j in range(m.ny):
            for i in range(m.nvx):
                y = m.y0 + (j + 0.5) * m.hy
                x0 = m.x0 + max(i - 0.5, 0.0) * m.hx
                x1 = m.x0 + min(i + 0.5, float(m.nx)) * m.hx
                fh.write(
                    f"{flux.level},h,{i},{j},{x0:.12g},{y:.12g},{x1:.12g},{y:.12g},"
                    f"{flux.Fh[j, i]:.12g}\n"
                )


def dump_audit(report, path):
    """Audit report as flat key-value text."""
    with open(path, "w") as fh:
        fh.write(f"level {report.level}\n")
        fh.write(f"max_residual {report.max_residual:.12g}\n")
        fh.write(f"mean_residual {report.mean_residual:.12g}\n")
        fh.write(f"scale {report.scale:.12g}\n")
        fh.write(f"rel_max {report.rel_max:.12g}\n")
        fh.write(f"argmax_i {report.argmax[0]}\n")
        fh.write(f"argmax_j {report.argmax[1]}\n")
