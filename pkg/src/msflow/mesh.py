"""Nested structured rectangular grids, vertex classification, and dual control volumes.

Indexing conventions used throughout the package:

* vertex (i, j) of a mesh with ``nx`` x ``ny`` cells has id ``j*(nx+1)+i``,
  with i running along x and j along y;
* cell (i, j) has id ``j*nx+i``;
* cell corners are listed counterclockwise as (bl, br, tr, tl).

The control volume of vertex z is the axis-aligned rectangle extending half
a cell in each direction, clipped to the domain. Control volumes tile the
domain exactly; every interior dual face is shared by two control volumes.
"""

import numpy as np

SIDES = ("left", "right", "bottom", "top")

#: corner order used for cell connectivity
CORNERS = ("bl", "br", "tr", "tl")


class RectMesh:
    """Axis-aligned structured mesh of nx-by-ny rectangular cells."""

    def __init__(self, nx, ny, hx, hy, x0=0.0, y0=0.0):
        if nx < 1 or ny < 1:
            raise ValueError(f"cell counts must be >= 1, got {nx} x {ny}")
        if hx <= 0 or hy <= 0:
            raise ValueError(f"cell sizes must be positive, got {hx} x {hy}")
        self.nx = int(nx)
        self.ny = int(ny)
        self.hx = float(hx)
        self.hy = float(hy)
        self.x0 = float(x0)
        self.y0 = float(y0)
        self._conn = None

    @property
    def nvx(self):
        return self.nx + 1

    @property
    def nvy(self):
        return self.ny + 1

    @property
    def n_vertices(self):
        return self.nvx * self.nvy

    @property
    def n_cells(self):
        return self.nx * self.ny

    @property
    def lx(self):
        return self.nx * self.hx

    @property
    def ly(self):
        return self.ny * self.hy

    def vid(self, i, j):
        """Vertex id of grid position (i, j); accepts arrays."""
        return np.asarray(j) * self.nvx + np.asarray(i)

    def cid(self, i, j):
        """Cell id of grid position (i, j); accepts arrays."""
        return np.asarray(j) * self.nx + np.asarray(i)

    def conn(self):
        """Cell-to-vertex connectivity, shape (n_cells, 4), corners (bl, br, tr, tl)."""
        if self._conn is None:
            jj, ii = np.meshgrid(np.arange(self.ny), np.arange(self.nx), indexing="ij")
            bl = (jj * self.nvx + ii).ravel()
            self._conn = np.stack(
                [bl, bl + 1, bl + self.nvx + 1, bl + self.nvx], axis=1
            )
        return self._conn

    def vertex_coords(self):
        """Vertex coordinates, shape (n_vertices, 2)."""
        x = self.x0 + self.hx * np.arange(self.nvx)
        y = self.y0 + self.hy * np.arange(self.nvy)
        xx, yy = np.meshgrid(x, y)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def boundary_vertex_ids(self, side):
        if side == "left":
            return self.vid(0, np.arange(self.nvy))
        if side == "right":
            return self.vid(self.nx, np.arange(self.nvy))
        if side == "bottom":
            return self.vid(np.arange(self.nvx), 0)
        if side == "top":
            return self.vid(np.arange(self.nvx), self.ny)
        raise ValueError(f"unknown side {side!r}")

    def boundary_edges(self, side):
        """Fine edges along one side, ordered along the side.

        Returns (vertex id pairs (n, 2), adjacent cell ids (n,)).
        """
        if side in ("left", "right"):
            j = np.arange(self.ny)
            i = 0 if side == "left" else self.nx
            ci = 0 if side == "left" else self.nx - 1
            pairs = np.column_stack([self.vid(i, j), self.vid(i, j + 1)])
            cells = self.cid(ci, j)
        elif side in ("bottom", "top"):
            i = np.arange(self.nx)
            j = 0 if side == "bottom" else self.ny
            cj = 0 if side == "bottom" else self.ny - 1
            pairs = np.column_stack([self.vid(i, j), self.vid(i + 1, j)])
            cells = self.cid(i, cj)
        else:
            raise ValueError(f"unknown side {side!r}")
        return pairs, cells

    def cv_measures(self):
        """Control volume areas, shape (nvy, nvx)."""
        wx = np.full(self.nvx, self.hx)
        wx[0] = wx[-1] = self.hx / 2
        wy = np.full(self.nvy, self.hy)
        wy[0] = wy[-1] = self.hy / 2
        return np.outer(wy, wx)

    def cv_side_lengths(self, side):
        """Lengths of the domain-boundary faces of the boundary CVs on one side."""
        n = self.nvy if side in ("left", "right") else self.nvx
        h = self.hy if side in ("left", "right") else self.hx
        w = np.full(n, h)
        w[0] = w[-1] = h / 2
        return w

    def cv_source_integrals(self, q_nodal):
        """Integral of the Q1 interpolant of q over each control volume.

        Exact for bilinear q; shape (nvy, nvx).
        """
        q4 = np.asarray(q_nodal).ravel()[self.conn()]
        quad = (self.hx * self.hy) * q4 @ QUADRANT_WEIGHTS.T
        out = np.zeros(self.n_vertices)
        for c in range(4):
            np.add.at(out, self.conn()[:, c], quad[:, c])
        return out.reshape(self.nvy, self.nvx)


#: integral of bilinear basis eta over the quarter cell nearest corner zeta,
#: divided by the cell area: QUADRANT_WEIGHTS[zeta, eta]
QUADRANT_WEIGHTS = (
    np.array(
        [
            [9.0, 3.0, 1.0, 3.0],
            [3.0, 9.0, 3.0, 1.0],
            [1.0, 3.0, 9.0, 3.0],
            [3.0, 1.0, 3.0, 9.0],
        ]
    )
    / 64.0
)


class GridHierarchy:
    """Nested coarse/fine rectangular grids over the unit square.

    The fine mesh refines each coarse cell into r x r cells so coarse element
    boundaries coincide with fine mesh lines. Immutable after construction.
    """

    def __init__(self, nx, ny, r):
        for name, v in (("nx", nx), ("ny", ny), ("r", r)):
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
        if r != 1 and r % 2 != 0:
            raise ValueError(
                "refinement factor must be 1 or even so control-volume "
                f"boundaries align with the fine mesh, got r={r}"
            )
        self.nx = int(nx)
        self.ny = int(ny)
        self.r = int(r)
        lx = ly = 1.0
        self.coarse = RectMesh(nx, ny, lx / nx, ly / ny)
        self.fine = RectMesh(nx * r, ny * r, lx / (nx * r), ly / (ny * r))
        self.h = max(self.coarse.hx, self.coarse.hy)

    @property
    def Nx(self):
        return self.fine.nx

    @property
    def Ny(self):
        return self.fine.ny

    def cell_to_element(self):
        """Map each fine cell to its coarse element id."""
        jj, ii = np.meshgrid(np.arange(self.Ny), np.arange(self.Nx), indexing="ij")
        return ((jj // self.r) * self.nx + ii // self.r).ravel()

    def element_fine_vertex_ids(self, I, J):
        """Fine vertex ids of coarse element (I, J), row-major local ordering, shape ((r+1)**2,)."""
        r = self.r
        i = I * r + np.arange(r + 1)
        j = J * r + np.arange(r + 1)
        jj, ii = np.meshgrid(j, i, indexing="ij")
        return self.fine.vid(ii, jj).ravel()

    def element_fine_cell_ids(self, I, J):
        r = self.r
        i = I * r + np.arange(r)
        j = J * r + np.arange(r)
        jj, ii = np.meshgrid(j, i, indexing="ij")
        return self.fine.cid(ii, jj).ravel()

    def element_submesh(self, I, J):
        return RectMesh(
            self.r,
            self.r,
            self.fine.hx,
            self.fine.hy,
            x0=I * self.coarse.hx,
            y0=J * self.coarse.hy,
        )

    def patch_elements(self, I, J):
        """Coarse elements sharing vertex (I, J): the support of its basis function."""
        out = []
        for Je in (J - 1, J):
            for Ie in (I - 1, I):
                if 0 <= Ie < self.nx and 0 <= Je < self.ny:
                    out.append((Ie, Je))
        return out

    def patch_fine_bounds(self, I, J):
        """Fine-cell index bounds (ilo, ihi, jlo, jhi) of the patch around vertex (I, J)."""
        r = self.r
        ilo, ihi = max(0, (I - 1) * r), min(self.Nx, (I + 1) * r)
        jlo, jhi = max(0, (J - 1) * r), min(self.Ny, (J + 1) * r)
        return ilo, ihi, jlo, jhi

    def cv_fine_bounds(self, I, J):
        """Fine-cell index bounds of the control volume of coarse vertex (I, J).

        Requires even r (for r=1 the coarse and fine dual meshes coincide).
        """
        r = self.r
        if r == 1:
            raise ValueError("control volumes are not fine-aligned for r=1")
        ilo, ihi = max(0, I * r - r // 2), min(self.Nx, I * r + r // 2)
        jlo, jhi = max(0, J * r - r // 2), min(self.Ny, J * r + r // 2)
        return ilo, ihi, jlo, jhi

    def submesh(self, ilo, ihi, jlo, jhi):
        """Fine submesh over the given fine-cell index bounds, plus id maps."""
        m = RectMesh(
            ihi - ilo,
            jhi - jlo,
            self.fine.hx,
            self.fine.hy,
            x0=ilo * self.fine.hx,
            y0=jlo * self.fine.hy,
        )
        i = ilo + np.arange(ihi - ilo + 1)
        j = jlo + np.arange(jhi - jlo + 1)
        jj, ii = np.meshgrid(j, i, indexing="ij")
        vids = self.fine.vid(ii, jj).ravel()
        jj, ii = np.meshgrid(j[:-1], i[:-1], indexing="ij")
        cids = self.fine.cid(ii, jj).ravel()
        return m, vids, cids


def build_nested_grids(nx, ny, r):
    """Build a GridHierarchy and verify its geometric invariants.

    The fine grid has r*nx x r*ny cells; the coarse mesh parameter is 1/nx in
    x (square domain). Rejects nonpositive inputs and odd refinements > 1.
    """
    grid = GridHierarchy(nx, ny, r)
    area = grid.coarse.lx * grid.coarse.ly
    for mesh in (grid.coarse, grid.fine):
        total = mesh.cv_measures().sum()
        if abs(total - area) > 1e-12 * area:
            raise AssertionError("control volumes do not tile the domain")
    return grid


class VertexClasses:
    """Disjoint interior / Dirichlet / Neumann vertex index sets of a mesh."""

    def __init__(self, mesh, mask_d, mask_n):
        self.mesh = mesh
        self.mask_d = mask_d
        self.mask_n = mask_n
        self.mask_in = ~(mask_d | mask_n)
        self.z_d = np.flatnonzero(mask_d)
        self.z_n = np.flatnonzero(mask_n)
        self.z_in = np.flatnonzero(self.mask_in)

    @property
    def counts(self):
        return {"interior": self.z_in.size, "dirichlet": self.z_d.size, "neumann": self.z_n.size}


def classify_vertices(mesh, layout):
    """Partition mesh vertices by the boundary-condition layout.

    ``layout`` maps each side name to 'dirichlet' or 'neumann'. Corner
    vertices touching both kinds are classified Dirichlet.
    """
    unknown = set(layout) - set(SIDES)
    if unknown or set(layout) != set(SIDES):
        raise ValueError(f"layout must assign exactly the sides {SIDES}, got {sorted(layout)}")
    mask_d = np.zeros(mesh.n_vertices, dtype=bool)
    mask_n = np.zeros(mesh.n_vertices, dtype=bool)
    for side in SIDES:
        kind = layout[side]
        if kind not in ("dirichlet", "neumann"):
            raise ValueError(f"side {side!r} has unknown condition {kind!r}")
        ids = mesh.boundary_vertex_ids(side)
        if kind == "neumann":
            mask_n[ids] = True
        else:
            mask_d[ids] = True
    mask_n &= ~mask_d
    return VertexClasses(mesh, mask_d, mask_n)


def control_volume_edges(grid, z):
    """Oriented boundary faces of the control volume of coarse vertex z = (I, J).

    Each face is a dict with the outward ``normal``, ``on_boundary`` flag,
    and ``half_edges``: a list of (owner element, fine segment list) pairs,
    segments being ((x0, y0), (x1, y1)) chains at fine resolution.
    """
    I, J = z
    nx, ny, r = grid.nx, grid.ny, grid.r
    if not (0 <= I <= nx and 0 <= J <= ny):
        raise ValueError(f"vertex {z} outside the coarse grid")
    hx, hy = grid.coarse.hx, grid.coarse.hy
    hfx, hfy = grid.fine.hx, grid.fine.hy
    cx, cy = I * hx, J * hy
    xlo, xhi = max(0.0, cx - hx / 2), min(grid.coarse.lx, cx + hx / 2)
    ylo, yhi = max(0.0, cy - hy / 2), min(grid.coarse.ly, cy + hy / 2)

    def _segments(a, b, fixed, vertical):
        n = max(1, round((b - a) / (hfy if vertical else hfx)))
        ts = np.linspace(a, b, n + 1)
        if vertical:
            return [((fixed, ts[k]), (fixed, ts[k + 1])) for k in range(n)]
        return [((ts[k], fixed), (ts[k + 1], fixed)) for k in range(n)]

    def _owners(vertical, lo, hi, fixed_coord):
        # elements crossed by a dual face running from lo to hi at fixed_coord
        out = []
        if vertical:
            Ie = int(np.floor(fixed_coord / hx - 1e-12))
            for Je in range(int(np.floor(lo / hy + 1e-12)), int(np.ceil(hi / hy - 1e-12))):
                a, b = max(lo, Je * hy), min(hi, (Je + 1) * hy)
                out.append(((Ie, Je), _segments(a, b, fixed_coord, True)))
        else:
            Je = int(np.floor(fixed_coord / hy - 1e-12))
            for Ie in range(int(np.floor(lo / hx + 1e-12)), int(np.ceil(hi / hx - 1e-12))):
                a, b = max(lo, Ie * hx), min(hi, (Ie + 1) * hx)
                out.append(((Ie, Je), _segments(a, b, fixed_coord, False)))
        return out

    faces = []
    # left face
    on_bnd = I == 0
    faces.append(
        {
            "normal": (-1.0, 0.0),
            "on_boundary": on_bnd,
            "half_edges": _owners(True, ylo, yhi, xlo) if not on_bnd else [(None, _segments(ylo, yhi, 0.0, True))],
        }
    )
    on_bnd = I == nx
    faces.append(
        {
            "normal": (1.0, 0.0),
            "on_boundary": on_bnd,
            "half_edges": _owners(True, ylo, yhi, xhi) if not on_bnd else [(None, _segments(ylo, yhi, grid.coarse.lx, True))],
        }
    )
    on_bnd = J == 0
    faces.append(
        {
            "normal": (0.0, -1.0),
            "on_boundary": on_bnd,
            "half_edges": _owners(False, xlo, xhi, ylo) if not on_bnd else [(None, _segments(xlo, xhi, 0.0, False))],
        }
    )
    on_bnd = J == ny
    faces.append(
        {
            "normal": (0.0, 1.0),
            "on_boundary": on_bnd,
            "half_edges": _owners(False, xlo, xhi, yhi) if not on_bnd else [(None, _segments(xlo, xhi, grid.coarse.ly, False))],
        }
    )
    return faces


def grid_summary(grid, classes=None):
    """Flat key-value text summary of a grid hierarchy (for test assertions)."""
    lines = [
        f"coarse_cells {grid.nx} {grid.ny}",
        f"fine_cells {grid.Nx} {grid.Ny}",
        f"refine {grid.r}",
        f"coarse_vertices {grid.coarse.n_vertices}",
        f"fine_vertices {grid.fine.n_vertices}",
        f"h {grid.h:.12g}",
    ]
    if classes is not None:
        c = classes.counts
        lines += [
            f"vertices_interior {c['interior']}",
            f"vertices_dirichlet {c['dirichlet']}",
            f"vertices_neumann {c['neumann']}",
        ]
    return "\n".join(lines) + "\n"
