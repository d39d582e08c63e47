"""Permeability field ingestion and generation, and two-phase constitutive relations.

Permeability is piecewise constant per fine cell, stored as a (Ny, Nx) array
indexed [j, i]. Field files are plain text, row-major, one value per fine
cell, with a "rows cols" header line. Saturation snapshots reuse the format.
"""

import warnings

import numpy as np
from scipy import ndimage


class CoefficientField:
    """Positive scalar coefficient, one value per fine cell. Immutable by convention."""

    def __init__(self, grid, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.Ny, grid.Nx):
            raise ValueError(
                f"field shape {values.shape} does not match fine grid "
                f"({grid.Ny}, {grid.Nx})"
            )
        if not np.all(values > 0.0):
            raise ValueError("coefficient field must be strictly positive")
        self.grid = grid
        self.values = values
        self.kmin = float(values.min())
        self.kmax = float(values.max())

    @property
    def contrast(self):
        return self.kmax / self.kmin

    def cells(self):
        """Per-cell values as a flat array in fine cell order."""
        return self.values.ravel()


def save_field(path, values):
    """Write a (rows, cols) array in the field file format."""
    values = np.asarray(values, dtype=float)
    with open(path, "w") as fh:
        fh.write(f"{values.shape[0]} {values.shape[1]}\n")
        for row in values:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_field(path, grid):
    """Read a coefficient field; the file size must match the fine grid."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: expected 'rows cols' header")
        rows, cols = int(header[0]), int(header[1])
        data = np.loadtxt(fh)
    if data.size != rows * cols:
        raise ValueError(f"{path}: header promises {rows}x{cols} values, found {data.size}")
    if (rows, cols) != (grid.Ny, grid.Nx):
        raise ValueError(
            f"{path}: file is {rows}x{cols} but the fine grid is {grid.Ny}x{grid.Nx}"
        )
    return CoefficientField(grid, data.reshape(rows, cols))


def load_array(path):
    """Read a field file without a grid check (snapshots, comparisons)."""
    with open(path) as fh:
        header = fh.readline().split()
        rows, cols = int(header[0]), int(header[1])
        data = np.loadtxt(fh)
    return data.reshape(rows, cols)


def gen_inclusions(grid, background, features):
    """Deterministic field: a background value overwritten inside axis-aligned boxes.

    ``features`` is a list of (x0, y0, x1, y1, value) boxes; later features win
    where boxes overlap. Cells are assigned by cell-center membership.
    """
    if background <= 0:
        raise ValueError("background must be positive")
    vals = np.full((grid.Ny, grid.Nx), float(background))
    xc = (np.arange(grid.Nx) + 0.5) * grid.fine.hx
    yc = (np.arange(grid.Ny) + 0.5) * grid.fine.hy
    for x0, y0, x1, y1, v in features:
        if v <= 0:
            raise ValueError(f"feature value must be positive, got {v}")
        if not (0 <= x0 < x1 <= grid.coarse.lx and 0 <= y0 < y1 <= grid.coarse.ly):
            raise ValueError(f"feature box ({x0},{y0},{x1},{y1}) outside the domain")
        ii = (xc > x0) & (xc < x1)
        jj = (yc > y0) & (yc < y1)
        vals[np.ix_(jj, ii)] = v
    return CoefficientField(grid, vals)


def deterministic_features(kmax=2.0e4):
    """Built-in high-contrast feature set: channels and blocks that straddle
    coarse-grid lines without connecting the inflow and outflow boundaries."""
    return [
        (0.08, 0.21, 0.92, 0.26, kmax),
        (0.05, 0.52, 0.68, 0.57, 0.5 * kmax),
        (0.63, 0.30, 0.68, 0.78, kmax),
        (0.18, 0.72, 0.34, 0.86, 0.05 * kmax),
        (0.41, 0.06, 0.47, 0.16, kmax),
        (0.25, 0.35, 0.33, 0.43, 0.05 * kmax),
        (0.75, 0.62, 0.90, 0.67, 0.5 * kmax),
    ]


def gen_channelized(grid, seed, corr_x=0.20, corr_y=0.025, threshold=0.75,
                    contrast=1.8e6, mask_weight=0.5, mask_smooth=3.0):
    """Random channelized field: smoothed, thresholded Gaussian noise with
    anisotropic correlation, exponentiated to hit the target contrast.

    Reproducible for a fixed seed. ``corr_x``/``corr_y`` are correlation
    lengths in domain units; corr_x >> corr_y yields horizontally elongated
    channels. ``threshold`` is the quantile above which cells belong to the
    channel mask, whose edges are softened over ``mask_smooth`` cells. The
    realized contrast equals ``contrast`` by construction.
    """
    if contrast < 1:
        raise ValueError("contrast must be >= 1")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((grid.Ny, grid.Nx))
    sig_x = max(corr_x / grid.fine.hx, 1e-9)
    sig_y = max(corr_y / grid.fine.hy, 1e-9)
    g = ndimage.gaussian_filter(noise, sigma=(sig_y, sig_x), mode="reflect")
    g = (g - g.min()) / (g.max() - g.min())
    mask = (g > np.quantile(g, threshold)).astype(float)
    if mask_smooth > 0:
        mask = ndimage.gaussian_filter(mask, sigma=mask_smooth, mode="reflect")
    u = mask_weight * mask + (1.0 - mask_weight) * g
    u = (u - u.min()) / (u.max() - u.min())
    vals = np.exp(np.log(contrast) * u)
    return CoefficientField(grid, vals)


def _default_krw(s):
    return s * s


def _default_kro(s):
    return (1.0 - s) * (1.0 - s)


class MobilityModel:
    """Total mobility and fractional flow of the water/oil system.

    Defaults to quadratic relative permeabilities krw = S^2, kro = (1-S)^2
    with viscosities mu_w = 1 and mu_o = 5. Saturations outside [0, 1] are
    clamped with a warning.
    """

    def __init__(self, mu_w=1.0, mu_o=5.0, k_rw=None, k_ro=None):
        if mu_w <= 0 or mu_o <= 0:
            raise ValueError("viscosities must be positive")
        self.mu_w = float(mu_w)
        self.mu_o = float(mu_o)
        self.k_rw = k_rw if k_rw is not None else _default_krw
        self.k_ro = k_ro if k_ro is not None else _default_kro

    def _clamp(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < -1e-12) or np.any(s > 1 + 1e-12):
            warnings.warn("saturation outside [0, 1] clamped", stacklevel=3)
        return np.clip(s, 0.0, 1.0)

    def mobility(self, s):
        """lambda(S) = krw(S)/mu_w + kro(S)/mu_o."""
        s = self._clamp(s)
        return self.k_rw(s) / self.mu_w + self.k_ro(s) / self.mu_o

    def frac_flow(self, s):
        """f(S) = (krw(S)/mu_w) / lambda(S)."""
        s = self._clamp(s)
        lam = self.k_rw(s) / self.mu_w + self.k_ro(s) / self.mu_o
        return (self.k_rw(s) / self.mu_w) / lam

    def max_dfrac(self, n=1001):
        """Max |f'(S)| over an n-point grid of [0, 1] (finite differences)."""
        s = np.linspace(0.0, 1.0, n)
        f = self.frac_flow(s)
        return float(np.max(np.abs(np.gradient(f, s))))
