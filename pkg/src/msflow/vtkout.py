"""Legacy-format VTK writers for fields, saturations, and velocities.

ASCII STRUCTURED_POINTS for per-cell and per-vertex scalars and a point
vector array for velocities reconstructed from dual-edge fluxes. Output is
byte-stable for identical input.
"""

import numpy as np


def _fmt(v):
    return f"{v:.12g}"


def write_cell_scalar(path, name, values, spacing, origin=(0.0, 0.0)):
    """Per-cell scalar array (rows, cols) as CELL_DATA on a structured grid."""
    values = np.asarray(values, dtype=float)
    ny, nx = values.shape
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("msflow cell field\n")
        fh.write("ASCII\n")
        fh.write("DATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx + 1} {ny + 1} 1\n")
        fh.write(f"ORIGIN {_fmt(origin[0])} {_fmt(origin[1])} 0\n")
        fh.write(f"SPACING {_fmt(spacing[0])} {_fmt(spacing[1])} 1\n")
        fh.write(f"CELL_DATA {nx * ny}\n")
        fh.write(f"SCALARS {name} double 1\n")
        fh.write("LOOKUP_TABLE default\n")
        for row in values:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def write_point_scalar(path, name, values, spacing, origin=(0.0, 0.0)):
    """Per-vertex scalar array (nvy, nvx) as POINT_DATA."""
    values = np.asarray(values, dtype=float)
    nvy, nvx = values.shape
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("msflow point field\n")
        fh.write("ASCII\n")
        fh.write("DATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nvx} {nvy} 1\n")
        fh.write(f"ORIGIN {_fmt(origin[0])} {_fmt(origin[1])} 0\n")
        fh.write(f"SPACING {_fmt(spacing[0])} {_fmt(spacing[1])} 1\n")
        fh.write(f"POINT_DATA {nvx * nvy}\n")
        fh.write(f"SCALARS {name} double 1\n")
        fh.write("LOOKUP_TABLE default\n")
        for row in values:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def velocity_vertices(flux):
    """Velocity vectors per vertex, averaged from the incident dual-face flux
    densities (flux divided by face length); boundary faces included.

    Returns (vx, vy) arrays of shape (nvy, nvx).
    """
    m = flux.mesh
    dv = flux.Fv / flux.face_lengths_v()
    dh = flux.Fh / flux.face_lengths_h()
    vx = np.zeros((m.nvy, m.nvx))
    cx = np.zeros((m.nvy, m.nvx))
    vx[:, :-1] += dv
    cx[:, :-1] += 1
    vx[:, 1:] += dv
    cx[:, 1:] += 1
    # outward boundary fluxes: on the left side outward is -x
    vx[:, 0] += -flux.bleft / m.cv_side_lengths("left")
    cx[:, 0] += 1
    vx[:, -1] += flux.bright / m.cv_side_lengths("right")
    cx[:, -1] += 1
    vx /= cx
    vy = np.zeros((m.nvy, m.nvx))
    cy = np.zeros((m.nvy, m.nvx))
    vy[:-1, :] += dh
    cy[:-1, :] += 1
    vy[1:, :] += dh
    cy[1:, :] += 1
    vy[0, :] += -flux.bbottom / m.cv_side_lengths("bottom")
    cy[0, :] += 1
    vy[-1, :] += flux.btop / m.cv_side_lengths("top")
    cy[-1, :] += 1
    vy /= cy
    return vx, vy


def write_velocity(path, flux):
    """Per-vertex velocity vectors of a flux field, legacy STRUCTURED_GRID."""
    m = flux.mesh
    vx, vy = velocity_vertices(flux)
    x = m.x0 + m.hx * np.arange(m.nvx)
    y = m.y0 + m.hy * np.arange(m.nvy)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("msflow velocity\n")
        fh.write("ASCII\n")
        fh.write("DATASET STRUCTURED_GRID\n")
        fh.write(f"DIMENSIONS {m.nvx} {m.nvy} 1\n")
        fh.write(f"POINTS {m.nvx * m.nvy} double\n")
        for yj in y:
            for xi in x:
                fh.write(f"{_fmt(xi)} {_fmt(yj)} 0\n")
        fh.write(f"POINT_DATA {m.nvx * m.nvy}\n")
        fh.write("VECTORS velocity double\n")
        for j in range(m.nvy):
            for i in range(m.nvx):
                fh.write(f"{_fmt(vx[j, i])} {_fmt(vy[j, i])} 0\n")
