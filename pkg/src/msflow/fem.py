"""Bilinear (Q1) finite element kernels on structured rectangular meshes.

Local matrices are exact closed forms (the coefficient is constant per cell),
global matrices are assembled sparse, Dirichlet conditions are imposed by
symmetric elimination with lifting so the operator stays SPD, and singular
pure-Neumann systems are handled by pinning one degree of freedom.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import SIDES

# exact integrals of d(phi_i)/dxi * d(phi_j)/dxi and the eta analogue on the
# reference square, corner order (bl, br, tr, tl)
_SX = np.array(
    [
        [2.0, -2.0, -1.0, 1.0],
        [-2.0, 2.0, 1.0, -1.0],
        [-1.0, 1.0, 2.0, -2.0],
        [1.0, -1.0, -2.0, 2.0],
    ]
) / 6.0
_SY = np.array(
    [
        [2.0, 1.0, -1.0, -2.0],
        [1.0, 2.0, -2.0, -1.0],
        [-1.0, -2.0, 2.0, 1.0],
        [-2.0, -1.0, 1.0, 2.0],
    ]
) / 6.0
_M36 = np.array(
    [
        [4.0, 2.0, 1.0, 2.0],
        [2.0, 4.0, 2.0, 1.0],
        [1.0, 2.0, 4.0, 2.0],
        [2.0, 1.0, 2.0, 4.0],
    ]
)


class SolverError(RuntimeError):
    """Linear solve failed or did not meet the residual contract."""


def local_stiffness(hx, hy, coeff=1.0):
    """Exact Q1 stiffness of one hx-by-hy cell with constant coefficient.

    Symmetric, rows sum to zero, and scales linearly in the coefficient.
    """
    if hx <= 0 or hy <= 0:
        raise ValueError("degenerate cell")
    if coeff <= 0:
        raise ValueError("coefficient must be positive")
    return coeff * ((hy / hx) * _SX + (hx / hy) * _SY)


def local_mass(hx, hy, coeff=1.0):
    """Exact Q1 mass matrix of one cell with constant coefficient."""
    return coeff * (hx * hy / 36.0) * _M36


class BoundaryConditions:
    """Per-side boundary conditions of the pressure problem.

    Each side is ('dirichlet', p_D) or ('neumann', g_N) with p_D / g_N either
    constants or callables of (x, y). g_N is the outward flux -lam*k grad p . n.
    """

    def __init__(self, left, right, bottom, top):
        self.sides = {"left": left, "right": right, "bottom": bottom, "top": top}
        for side, (kind, _) in self.sides.items():
            if kind not in ("dirichlet", "neumann"):
                raise ValueError(f"side {side!r}: unknown condition {kind!r}")

    @classmethod
    def pressure_drop(cls, p_left=1.0, p_right=0.0):
        """The standard layout: fixed pressures left/right, no flow top/bottom."""
        return cls(
            left=("dirichlet", p_left),
            right=("dirichlet", p_right),
            bottom=("neumann", 0.0),
            top=("neumann", 0.0),
        )

    def layout(self):
        return {side: kind for side, (kind, _) in self.sides.items()}

    def kind(self, side):
        return self.sides[side][0]

    def value(self, side, x, y):
        v = self.sides[side][1]
        if callable(v):
            return np.asarray(v(x, y), dtype=float)
        return np.full(np.broadcast(x, y).shape, float(v))

    def dirichlet_sides(self):
        return [s for s in SIDES if self.kind(s) == "dirichlet"]

    def neumann_sides(self):
        return [s for s in SIDES if self.kind(s) == "neumann"]


class LinearSystem:
    """Assembled sparse system with boundary metadata.

    The matrix keeps full size; Dirichlet rows are identity rows with the
    boundary value on the right-hand side (lifting already applied).
    """

    def __init__(self, A, b, mesh, dirichlet_ids=None, dirichlet_values=None,
                 pure_neumann=False, labels=None):
        self.A = A.tocsr()
        self.b = np.asarray(b, dtype=float)
        self.mesh = mesh
        self.dirichlet_ids = (
            np.asarray(dirichlet_ids, dtype=int) if dirichlet_ids is not None else np.empty(0, int)
        )
        self.dirichlet_values = (
            np.asarray(dirichlet_values, dtype=float)
            if dirichlet_values is not None
            else np.empty(0)
        )
        self.pure_neumann = pure_neumann
        self.labels = labels

    @property
    def n(self):
        return self.A.shape[0]

    def symmetry_defect(self):
        d = self.A - self.A.T
        scale = max(np.abs(self.A.data).max(), 1e-300)
        return np.abs(d.data).max() / scale if d.nnz else 0.0


def stiffness_matrix(mesh, coeff_cells):
    """Global sparse stiffness with a per-cell constant coefficient."""
    coeff_cells = np.asarray(coeff_cells, dtype=float).ravel()
    if coeff_cells.size != mesh.n_cells:
        raise ValueError(
            f"coefficient has {coeff_cells.size} values for {mesh.n_cells} cells"
        )
    ke = local_stiffness(mesh.hx, mesh.hy, 1.0)
    conn = mesh.conn()
    data = coeff_cells[:, None, None] * ke[None, :, :]
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    A = sp.coo_matrix((data.ravel(), (rows, cols)), shape=(mesh.n_vertices,) * 2)
    return A.tocsr()


def mass_matrix(mesh, coeff_cells=None):
    """Global sparse Q1 mass with an optional per-cell coefficient."""
    if coeff_cells is None:
        coeff_cells = np.ones(mesh.n_cells)
    coeff_cells = np.asarray(coeff_cells, dtype=float).ravel()
    me = local_mass(mesh.hx, mesh.hy, 1.0)
    conn = mesh.conn()
    data = coeff_cells[:, None, None] * me[None, :, :]
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    return sp.coo_matrix((data.ravel(), (rows, cols)), shape=(mesh.n_vertices,) * 2).tocsr()


def load_vector(mesh, q):
    """Consistent load (q, phi_v) with q given nodally or as a callable."""
    if q is None:
        return np.zeros(mesh.n_vertices)
    if callable(q):
        xy = mesh.vertex_coords()
        q_nodal = np.asarray(q(xy[:, 0], xy[:, 1]), dtype=float)
    else:
        q_nodal = np.asarray(q, dtype=float).ravel()
    return mass_matrix(mesh) @ q_nodal


def neumann_load(mesh, side, g):
    """Boundary load <g, phi_v> over one side, g nodal-valued or callable.

    g is the outward flux; the assembled weak form subtracts this load.
    """
    pairs, _ = mesh.boundary_edges(side)
    xy = mesh.vertex_coords()
    ids = mesh.boundary_vertex_ids(side)
    if callable(g):
        gv = np.zeros(mesh.n_vertices)
        gv[ids] = g(xy[ids, 0], xy[ids, 1])
    else:
        gv = np.zeros(mesh.n_vertices)
        gv[ids] = float(g) if np.isscalar(g) else np.asarray(g, dtype=float)
    h = mesh.hy if side in ("left", "right") else mesh.hx
    out = np.zeros(mesh.n_vertices)
    ga, gb = gv[pairs[:, 0]], gv[pairs[:, 1]]
    np.add.at(out, pairs[:, 0], h * (2 * ga + gb) / 6.0)
    np.add.at(out, pairs[:, 1], h * (ga + 2 * gb) / 6.0)
    return out


def apply_dirichlet(A, b, ids, values):
    """Symmetric elimination with lifting; keeps the full dof set and SPD."""
    ids = np.asarray(ids, dtype=int)
    values = np.asarray(values, dtype=float)
    n = A.shape[0]
    lift = np.zeros(n)
    lift[ids] = values
    b = b - A @ lift
    free = np.ones(n)
    free[ids] = 0.0
    P = sp.diags(free)
    fixed = np.zeros(n)
    fixed[ids] = 1.0
    A = (P @ A @ P + sp.diags(fixed)).tocsr()
    b = free * b
    b[ids] = values
    return A, b


def assemble(mesh, coeff_cells, q=None, bcs=None):
    """Assemble the weak form a(p, w) = (q, w) - <g_N, w> into a LinearSystem.

    Dirichlet dofs are eliminated with lifting. With no Dirichlet side the
    system is flagged pure Neumann and incompatible data (integral of q not
    matching the boundary outflux) is rejected.
    """
    A = stiffness_matrix(mesh, coeff_cells)
    b = load_vector(mesh, q)
    dir_ids, dir_vals = [], []
    if bcs is not None:
        for side in bcs.neumann_sides():
            b -= neumann_load(mesh, side, bcs.sides[side][1])
        xy = mesh.vertex_coords()
        seen = {}
        for side in bcs.dirichlet_sides():
            ids = mesh.boundary_vertex_ids(side)
            vals = bcs.value(side, xy[ids, 0], xy[ids, 1])
            for i, v in zip(ids, np.atleast_1d(vals)):
                seen[int(i)] = float(v)
        if seen:
            dir_ids = np.array(sorted(seen))
            dir_vals = np.array([seen[i] for i in dir_ids])
    pure_neumann = len(dir_ids) == 0
    if pure_neumann:
        defect = abs(b.sum())
        scale = max(np.abs(b).sum(), 1e-300)
        if defect > 1e-8 * scale and scale > 1e-14:
            raise ValueError(
                f"incompatible pure-Neumann data: defect {defect:.3e} vs scale {scale:.3e}"
            )
        return LinearSystem(A, b, mesh, pure_neumann=True)
    A, b = apply_dirichlet(A, b, dir_ids, dir_vals)
    return LinearSystem(A, b, mesh, dir_ids, dir_vals)


def pin_one_dof(system, dof=0, value=0.0):
    """Remove the constant nullspace of a singular Neumann system.

    The gradient of the solution (hence any flux) is independent of the
    pinned value.
    """
    A, b = apply_dirichlet(system.A, system.b.copy(), [dof], [value])
    return LinearSystem(A, b, system.mesh, [dof], [value], pure_neumann=False,
                        labels=system.labels)


def solve_spd(system, rtol=1e-10, refine_steps=1):
    """Direct sparse solve with a relative residual contract of 1e-10.

    One step of iterative refinement recovers the digits lost to high
    coefficient contrast.
    """
    if system.pure_neumann:
        raise SolverError("singular pure-Neumann system: pin a dof first")
    lu = spla.splu(system.A.tocsc())
    x = lu.solve(system.b)
    for _ in range(refine_steps):
        r = system.b - system.A @ x
        x = x + lu.solve(r)
    bnorm = np.linalg.norm(system.b)
    res = np.linalg.norm(system.A @ x - system.b)
    if bnorm > 0 and res > rtol * bnorm:
        raise SolverError(f"solve residual {res / bnorm:.3e} exceeds {rtol:.1e}")
    if bnorm == 0 and res > rtol:
        raise SolverError(f"solve residual {res:.3e} on zero rhs")
    return x


def solve_neumann(system):
    """Solve a singular pure-Neumann system with a Lagrange multiplier on the
    constant nullspace; the data defect spreads uniformly over all dofs
    instead of landing on a pinned one."""
    n = system.n
    rhs = np.concatenate([system.b, [0.0]])
    if n <= 600:
        K = np.zeros((n + 1, n + 1))
        K[:n, :n] = system.A.toarray()
        K[:n, n] = 1.0
        K[n, :n] = 1.0
        return np.linalg.solve(K, rhs)[:n]
    e = np.ones((n, 1))
    K = sp.bmat([[system.A, e], [e.T, None]], format="csc")
    return spla.spsolve(K, rhs)[:n]


def solve_pressure(mesh, coeff_cells, q, bcs):
    """Assemble and solve the fine-grid pressure problem; returns nodal values."""
    system = assemble(mesh, coeff_cells, q, bcs)
    if system.pure_neumann:
        return solve_neumann(system)
    return solve_spd(system)


def dump_matrix(system, path):
    """Write the matrix in coordinate (row, col, value) text format."""
    coo = system.A.tocoo()
    with open(path, "w") as fh:
        fh.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v:.17g}\n")
