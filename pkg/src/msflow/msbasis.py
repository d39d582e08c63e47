"""Multiscale partition-of-unity basis, energy weight, and spectral enrichment.

Per coarse element the four harmonic basis functions solve a coefficient-
weighted Laplace problem with bilinear boundary data; per coarse vertex a
generalized eigenproblem (coefficient-weighted stiffness against energy-
weighted mass) supplies the enrichment functions. All per-element and
per-patch solves are independent, so the build is trivially parallel; this
implementation runs them sequentially with vectorized kernels.
"""

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from . import fem


def bilinear_corner_values(mesh):
    """Values of the four corner bilinear functions at all mesh vertices.

    Returns shape (4, n_vertices) in corner order (bl, br, tr, tl).
    """
    xy = mesh.vertex_coords()
    xi = (xy[:, 0] - mesh.x0) / mesh.lx
    eta = (xy[:, 1] - mesh.y0) / mesh.ly
    return np.stack(
        [(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta]
    )


def harmonic_basis(grid, k_field, I, J):
    """The four multiscale basis functions of coarse element (I, J).

    Each solves the k-weighted Laplace equation on the element's fine submesh
    with the bilinear trace of one corner as Dirichlet data. Returns fine
    nodal values, shape (4, (r+1)**2); the four functions sum to one.
    """
    sub = grid.element_submesh(I, J)
    cells = grid.element_fine_cell_ids(I, J)
    k_cells = k_field.cells()[cells]
    data = bilinear_corner_values(sub)
    if grid.r == 1:
        return data
    bnd = np.unique(
        np.concatenate([sub.boundary_vertex_ids(s) for s in ("left", "right", "bottom", "top")])
    )
    interior = np.setdiff1d(np.arange(sub.n_vertices), bnd)
    A = fem.stiffness_matrix(sub, k_cells)
    solve = spla.factorized(A[interior][:, interior].tocsc())
    chi = data.copy()
    A_ib = A[interior][:, bnd]
    for c in range(4):
        chi[c, interior] = solve(-A_ib @ data[c, bnd])
    # renormalize so the partition of unity holds to round-off even at high
    # contrast, where the four solves individually lose digits
    chi /= chi.sum(axis=0)
    return chi


def build_all_harmonic(grid, k_field):
    """Harmonic basis of every coarse element, shape (n_elements, 4, (r+1)**2)."""
    nn = (grid.r + 1) ** 2
    chi = np.empty((grid.coarse.n_cells, 4, nn))
    for J in range(grid.ny):
        for I in range(grid.nx):
            chi[grid.coarse.cid(I, J)] = harmonic_basis(grid, k_field, I, J)
    return chi


def _element_corner_vertices(grid, I, J):
    """Coarse vertex ids of element (I, J) in corner order."""
    c = grid.coarse
    return np.array([c.vid(I, J), c.vid(I + 1, J), c.vid(I + 1, J + 1), c.vid(I, J + 1)])


def energy_weight(grid, k_field, chi_all, classes):
    """Energy weight per fine cell: k times the coarse-h-scaled squared
    gradients of the overlapping basis functions (interior and Neumann
    vertices only), gradients evaluated at fine-cell centers.

    Cells where every overlapping basis function is locally constant get a
    zero weight; the spectral solver regularizes the mass in that case.
    """
    r = grid.r
    sub_conn = grid.element_submesh(0, 0).conn()
    hfx, hfy = grid.fine.hx, grid.fine.hy
    ktilde = np.zeros(grid.fine.n_cells)
    keep = classes.mask_in | classes.mask_n
    k_cells = k_field.cells()
    for J in range(grid.ny):
        for I in range(grid.nx):
            e = grid.coarse.cid(I, J)
            chi_c = chi_all[e][:, sub_conn]  # (4, r*r, 4)
            gx = (chi_c[..., 1] - chi_c[..., 0] + chi_c[..., 2] - chi_c[..., 3]) / (2 * hfx)
            gy = (chi_c[..., 3] - chi_c[..., 0] + chi_c[..., 2] - chi_c[..., 1]) / (2 * hfy)
            g2 = gx * gx + gy * gy
            mask = keep[_element_corner_vertices(grid, I, J)]
            cells = grid.element_fine_cell_ids(I, J)
            ktilde[cells] = k_cells[cells] * grid.h**2 * g2[mask].sum(axis=0)
    return ktilde.reshape(grid.Ny, grid.Nx)


def local_spectral(grid, k_field, ktilde, z, n_eigs, reg=1e-10):
    """Lowest eigenpairs of the patch eigenproblem around coarse vertex z.

    Solves K psi = mu M psi on the fine submesh of the element patch, with K
    the k-weighted stiffness (natural boundary conditions) and M the energy-
    weighted mass, by a dense symmetric-definite solve. Eigenvalues ascend;
    the first pair is (0, constant). A semidefinite M is regularized by
    adding ``reg`` times the k-weighted mass.

    Returns (values, vectors, patch vertex ids, patch mesh, info dict);
    vectors are M-orthonormal columns.
    """
    I, J = z
    sub, vids, cids = grid.submesh(*grid.patch_fine_bounds(I, J))
    if n_eigs > sub.n_vertices:
        raise ValueError(f"requested {n_eigs} eigenpairs on a {sub.n_vertices}-dof patch")
    k_cells = k_field.cells()[cids]
    kt_cells = ktilde.ravel()[cids]
    K = fem.stiffness_matrix(sub, k_cells).toarray()
    M = fem.mass_matrix(sub, kt_cells).toarray()
    info = {"regularized": False, "patch_dofs": sub.n_vertices}
    try:
        vals, vecs = sla.eigh(K, M, subset_by_index=[0, n_eigs - 1])
    except (sla.LinAlgError, np.linalg.LinAlgError):
        M = M + reg * fem.mass_matrix(sub, k_cells).toarray()
        info["regularized"] = True
        vals, vecs = sla.eigh(K, M, subset_by_index=[0, n_eigs - 1])
    # backward-stable pencils leave residuals proportional to the operator
    # norm; the near-null pairs the enrichment targets have |K psi| -> 0, so
    # the relative term alone would reject perfectly good solves
    floor = 1e-9 * np.linalg.norm(K) * np.linalg.norm(vecs, axis=0)
    for i in range(n_eigs):
        r = np.linalg.norm(K @ vecs[:, i] - vals[i] * (M @ vecs[:, i]))
        if r > 1e-8 * np.linalg.norm(K @ vecs[:, i]) + floor[i]:
            raise fem.SolverError(
                f"eigenpair {i} at vertex {z} failed the residual check: {r:.3e}"
            )
    return vals, vecs, vids, sub, info


class EnrichedBasisSet:
    """Per-vertex enriched basis: harmonic functions times patch eigenvectors.

    ``chi`` holds the per-element restrictions of the harmonic basis (these
    are also the level-1 enriched functions). ``psi`` holds, per enriched
    vertex, eigenvectors on the vertex patch with the first one replaced by
    the exact constant one, so the level-1 product reproduces chi exactly.
    """

    def __init__(self, grid, classes, chi, ktilde, levels):
        self.grid = grid
        self.classes = classes
        self.chi = chi
        self.ktilde = ktilde
        self.levels = levels
        self.psi = {}
        self.eigvals = {}
        self.patch_vids = {}

    def max_level(self):
        return int(self.levels.max())

    def chi_global(self, z):
        """Fine nodal values of the harmonic basis of coarse vertex z, full grid."""
        I, J = z
        out = np.zeros(self.grid.fine.n_vertices)
        for (Ie, Je) in self.grid.patch_elements(I, J):
            e = self.grid.coarse.cid(Ie, Je)
            corner = list(
                _element_corner_vertices(self.grid, Ie, Je)
            ).index(self.grid.coarse.vid(I, J))
            out[self.grid.element_fine_vertex_ids(Ie, Je)] = self.chi[e, corner]
        return out

    def phi_global(self, z, ell):
        """Fine nodal values of the enriched function (z, ell), full grid.

        Computed nodewise as the product of the harmonic function and the
        eigenvector; level 1 returns the harmonic function itself.
        """
        chi = self.chi_global(z)
        if ell == 1:
            return chi
        vid = self.grid.coarse.vid(*z)
        if ell > self.levels[vid]:
            raise ValueError(f"vertex {z} has {self.levels[vid]} functions, asked for {ell}")
        psi = np.zeros(self.grid.fine.n_vertices)
        psi[self.patch_vids[vid]] = self.psi[vid][ell - 1]
        return chi * psi

    def partition_of_unity_defect(self):
        """Max deviation of the nodal sum of all harmonic functions from one."""
        total = np.zeros(self.grid.fine.n_vertices)
        for J in range(self.grid.ny + 1):
            for I in range(self.grid.nx + 1):
                total += self.chi_global((I, J))
        return float(np.abs(total - 1.0).max())


def build_enriched(grid, k_field, classes, L, enrich_neumann=False):
    """Construct the enriched basis set with a uniform enrichment level.

    Every vertex contributes its harmonic function; interior vertices (and
    Neumann vertices too when ``enrich_neumann`` is set) also contribute
    eigenfunction products up to level L.
    """
    if L < 1:
        raise ValueError("enrichment level must be >= 1")
    chi = build_all_harmonic(grid, k_field)
    ktilde = energy_weight(grid, k_field, chi, classes)
    nv = grid.coarse.n_vertices
    levels = np.ones(nv, dtype=int)
    levels[classes.z_in] = L
    if enrich_neumann:
        levels[classes.z_n] = L
    basis = EnrichedBasisSet(grid, classes, chi, ktilde, levels)
    if L > 1:
        for vid in np.flatnonzero(levels > 1):
            I, J = vid % (grid.nx + 1), vid // (grid.nx + 1)
            vals, vecs, vids, _, _ = local_spectral(grid, k_field, ktilde, (I, J), L)
            psi = vecs.T.copy()
            spread = np.ptp(psi[0]) / max(np.abs(psi[0]).max(), 1e-300)
            if spread > 1e-2:
                raise fem.SolverError(
                    f"first eigenvector at vertex {(I, J)} is not constant "
                    f"(relative spread {spread:.3e})"
                )
            psi[0] = 1.0
            basis.psi[vid] = psi
            basis.eigvals[vid] = vals
            basis.patch_vids[vid] = vids
    return basis


def dump_basis(basis, path):
    """Per-vertex, per-element fine nodal values of the harmonic basis, text format."""
    grid = basis.grid
    with open(path, "w") as fh:
        fh.write(f"elements {grid.coarse.n_cells} corners 4 nodes {(grid.r + 1) ** 2}\n")
        for J in range(grid.ny):
            for I in range(grid.nx):
                e = grid.coarse.cid(I, J)
                for c in range(4):
                    vals = " ".join(f"{v:.12g}" for v in basis.chi[e, c])
                    fh.write(f"element {I} {J} corner {c} {vals}\n")
