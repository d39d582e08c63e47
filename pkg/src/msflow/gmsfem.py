"""Coarse multiscale systems: space construction, triple-product assembly, solve.

The coarse operator is built as R A R^T with A the fine assembly of the weak
form and R the matrix whose rows are the fine nodal vectors of the coarse
basis functions; since those are piecewise bilinear on the fine mesh this is
the exact coarse assembly. Dirichlet data enters through coefficients fixed
to the boundary values of the level-1 (partition of unity) functions.
"""

import numpy as np
import scipy.sparse as sp

from . import fem


class CoarseSpace:
    """Ordered (vertex, level) dofs with the fine-grid projection operator.

    Dofs are ordered by level first, so the level-1 block is shared by all
    enrichment levels and coarse matrices are nested as L grows.
    """

    def __init__(self, grid, classes, dofs, R):
        self.grid = grid
        self.classes = classes
        self.dofs = dofs
        self.R = R.tocsr()
        vid_of = {d: i for i, d in enumerate(dofs)}
        self.dirichlet_dofs = np.array(
            [vid_of[(int(z), 1)] for z in classes.z_d], dtype=int
        )

    @property
    def n_dofs(self):
        return len(self.dofs)

    def dirichlet_values(self, bcs):
        """Boundary values of the fixed coefficients, one per Dirichlet vertex."""
        mesh = self.classes.mesh
        xy = mesh.vertex_coords()
        vals = np.zeros(mesh.n_vertices)
        for side in bcs.dirichlet_sides():
            ids = mesh.boundary_vertex_ids(side)
            vals[ids] = bcs.value(side, xy[ids, 0], xy[ids, 1])
        return vals[self.classes.z_d]


def build_coarse_space(basis, classes, L):
    """Span of the enriched functions up to level L.

    Every vertex contributes its level-1 function; vertices whose basis was
    enriched contribute levels 2..L as well. With uniform interior enrichment
    the dof count is n_vertices + (L-1) * n_interior_vertices.
    """
    grid = basis.grid
    if L < 1:
        raise ValueError("enrichment level must be >= 1")
    if L > basis.max_level():
        raise ValueError(f"basis holds {basis.max_level()} levels, asked for {L}")
    nv = grid.coarse.n_vertices
    dofs, rows, cols, vals = [], [], [], []
    for ell in range(1, L + 1):
        for z in range(nv):
            if ell > basis.levels[z]:
                continue
            I, J = z % (grid.nx + 1), z // (grid.nx + 1)
            phi = basis.phi_global((I, J), ell)
            nz = np.flatnonzero(phi)
            rows.extend([len(dofs)] * nz.size)
            cols.extend(nz.tolist())
            vals.extend(phi[nz].tolist())
            dofs.append((z, ell))
    R = sp.coo_matrix(
        (vals, (rows, cols)), shape=(len(dofs), grid.fine.n_vertices)
    )
    return CoarseSpace(grid, classes, dofs, R)


def msfem_space(grid, classes, chi_all):
    """Coarse space built directly from the harmonic basis (no eigenfunctions)."""
    nv = grid.coarse.n_vertices
    dofs, rows, cols, vals = [], [], [], []
    for z in range(nv):
        I, J = z % (grid.nx + 1), z // (grid.nx + 1)
        phi = np.zeros(grid.fine.n_vertices)
        for (Ie, Je) in grid.patch_elements(I, J):
            e = grid.coarse.cid(Ie, Je)
            corners = [
                grid.coarse.vid(Ie, Je),
                grid.coarse.vid(Ie + 1, Je),
                grid.coarse.vid(Ie + 1, Je + 1),
                grid.coarse.vid(Ie, Je + 1),
            ]
            phi[grid.element_fine_vertex_ids(Ie, Je)] = chi_all[e, corners.index(z)]
        nz = np.flatnonzero(phi)
        rows.extend([len(dofs)] * nz.size)
        cols.extend(nz.tolist())
        vals.extend(phi[nz].tolist())
        dofs.append((z, 1))
    R = sp.coo_matrix((vals, (rows, cols)), shape=(len(dofs), grid.fine.n_vertices))
    return CoarseSpace(grid, classes, dofs, R)


def assemble_coarse(space, lamk_cells, q, bcs):
    """Coarse LinearSystem via the triple product, with Dirichlet lifting."""
    grid = space.grid
    A_fine = fem.stiffness_matrix(grid.fine, lamk_cells)
    b_fine = fem.load_vector(grid.fine, q)
    for side in bcs.neumann_sides():
        b_fine -= fem.neumann_load(grid.fine, side, bcs.sides[side][1])
    A_c = (space.R @ A_fine @ space.R.T).tocsr()
    b_c = space.R @ b_fine
    A_c, b_c = fem.apply_dirichlet(A_c, b_c, space.dirichlet_dofs, space.dirichlet_values(bcs))
    return fem.LinearSystem(
        A_c, b_c, grid.coarse, space.dirichlet_dofs, space.dirichlet_values(bcs),
        labels=space.dofs,
    )


def assemble_and_solve_coarse(space, lamk_cells, q, bcs):
    """Solve the coarse problem; returns the full coefficient vector
    (fixed Dirichlet coefficients included)."""
    system = assemble_coarse(space, lamk_cells, q, bcs)
    return fem.solve_spd(system)


def project_to_fine(space, coeffs):
    """Fine nodal pressure from coarse coefficients (lifting included)."""
    return space.R.T @ np.asarray(coeffs, dtype=float)


def solve_projected(space, lamk_cells, q, bcs):
    """Coarse solve followed by projection; returns (fine nodal p, coefficients)."""
    coeffs = assemble_and_solve_coarse(space, lamk_cells, q, bcs)
    return project_to_fine(space, coeffs), coeffs


def energy_error(grid, lamk_cells, p, p_ref):
    """Energy-norm distance between two fine nodal fields, relative to the
    energy norm of the reference."""
    A = fem.stiffness_matrix(grid.fine, lamk_cells)
    d = np.asarray(p) - np.asarray(p_ref)
    num = float(d @ (A @ d))
    den = float(np.asarray(p_ref) @ (A @ np.asarray(p_ref)))
    return np.sqrt(max(num, 0.0) / max(den, 1e-300))


def dump_solution(space, coeffs, path):
    """Coarse dof list and coefficients in text form."""
    with open(path, "w") as fh:
        fh.write(f"dofs {space.n_dofs}\n")
        for (z, ell), c in zip(space.dofs, coeffs):
            fh.write(f"{z} {ell} {c:.17g}\n")
