"""Sensor arrays, source grids and the single-sphere MEG lead field.

Coordinates are in metres in the head frame; lead fields are in tesla per
ampere-metre.  A gain table stores one ``M x 3`` block per grid point,
column ``j`` being the sensor readings of a unit dipole along axis ``j``.
"""

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGrid, FormatError, InvalidGeometry

MU0_OVER_4PI = 1e-7


@dataclass(frozen=True)
class SensorArray:
    positions: np.ndarray
    orientations: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        ori = np.asarray(self.orientations, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or ori.shape != pos.shape:
            raise InvalidGeometry("positions and orientations must both be (M, 3)")
        if pos.shape[0] < 4:
            raise InvalidGeometry(f"need at least 4 sensors, got {pos.shape[0]}")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(ori))):
            raise InvalidGeometry("sensor geometry contains non-finite values")
        if np.any(np.abs(np.linalg.norm(ori, axis=1) - 1.0) > 1e-12):
            raise InvalidGeometry("sensor orientations must be unit vectors")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "orientations", ori)

    @property
    def count(self):
        return self.positions.shape[0]


@dataclass(frozen=True)
class Dipole:
    position: np.ndarray
    orientation: np.ndarray
    amplitude: np.ndarray = None
    fixed: bool = True
    index: int = -1

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-12:
            raise ValueError("dipole orientation must be a unit vector")
        object.__setattr__(self, "orientation", q)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class SourceSpace:
    """Candidate dipole locations with an optional precomputed gain table.

    ``gain`` has shape ``(G, M, 3)``.  ``neighbors`` is an optional list of
    index arrays; when absent a lattice neighbourhood is inferred from the
    nearest-neighbour spacing of ``points``.
    """

    points: np.ndarray
    gain: np.ndarray = None
    neighbors: list = field(default=None, repr=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise DegenerateGrid(f"points must be a non-empty (G, 3) array, got {pts.shape}")
        object.__setattr__(self, "points", pts)
        if self.gain is not None:
            gain = np.ascontiguousarray(self.gain, dtype=np.float64)
            if gain.ndim != 3 or gain.shape[0] != pts.shape[0] or gain.shape[2] != 3:
                raise ValueError(f"gain must have shape ({pts.shape[0]}, M, 3), got {gain.shape}")
            if not np.all(np.isfinite(gain)):
                raise ValueError("gain table contains non-finite values")
            object.__setattr__(self, "gain", gain)

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def n_sensors(self):
        return self.gain.shape[1]

    def topographies(self, orientation):
        """``(M, G)`` matrix of topographies for one orientation shared by all points."""
        return np.ascontiguousarray((self.gain @ np.asarray(orientation, dtype=np.float64)).T)

    @cached_property
    def flat_gain(self):
        """Gain as an ``(M, 3G)`` matrix; columns ``3g:3g+3`` belong to point ``g``."""
        G, M, _ = self.gain.shape
        return np.ascontiguousarray(self.gain.transpose(1, 0, 2).reshape(M, 3 * G))

    @cached_property
    def block_gram(self):
        """Per-point ``L^T L`` blocks, shape ``(G, 3, 3)``."""
        return np.einsum("gmi,gmj->gij", self.gain, self.gain)

    @cached_property
    def block_norm2(self):
        """Largest eigenvalue of each ``L^T L`` block (squared gain norm)."""
        return np.linalg.eigvalsh(self.block_gram)[:, -1]

    @cached_property
    def adjacency(self):
        if self.neighbors is not None:
            return [np.asarray(n, dtype=np.intp) for n in self.neighbors]
        return lattice_neighbors(self.points)


def lattice_neighbors(points, slack=1.01):
    """Neighbours within ``slack`` times the typical nearest-neighbour spacing.

    On a cubic lattice this is the 6-neighbourhood.
    """
    if len(points) < 2:
        return [np.zeros(0, dtype=np.intp) for _ in range(len(points))]
    tree = cKDTree(points)
    d, _ = tree.query(points, k=2)
    spacing = float(np.median(d[:, 1]))
    pairs = tree.query_pairs(spacing * slack, output_type="ndarray")
    nbrs = [[] for _ in range(len(points))]
    for i, j in pairs:
        nbrs[i].append(j)
        nbrs[j].append(i)
    return [np.array(sorted(n), dtype=np.intp) for n in nbrs]


def default_sensor_array(count=102, radius=0.12, cap_fraction=0.6, center=(0.0, 0.0, 0.0)):
    """Radial magnetometers on the upper ``cap_fraction`` of a sphere (Fibonacci rule)."""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * cap_fraction * i / count
    rho = np.sqrt(np.clip(1.0 - z**2, 0.0, None))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    u = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return SensorArray(np.asarray(center, dtype=np.float64) + radius * u, u)


def _lead_fields(points, sensors, center):
    """Vectorised Sarvas single-sphere lead field, shape ``(P, M, 3)``."""
    rq = np.asarray(points, dtype=np.float64)[:, None, :] - center
    r = (sensors.positions - center)[None, :, :]
    n = sensors.orientations[None, :, :]
    rn = np.sqrt(np.sum(r * r, axis=-1))
    av = r - rq
    a = np.sqrt(np.sum(av * av, axis=-1))
    a_dot_r = np.sum(av * r, axis=-1)
    rq_dot_r = np.sum(rq * r, axis=-1)
    F = a * (rn * a + rn**2 - rq_dot_r)
    coef_r = a**2 / rn + a_dot_r / a + 2.0 * a + 2.0 * rn
    coef_q = a + 2.0 * rn + a_dot_r / a
    gradF_n = coef_r * np.sum(r * n, axis=-1) - coef_q * np.sum(rq * n, axis=-1)
    # B.n = mu0/(4 pi F^2) * moment . (F (rq x n) - (gradF.n) (rq x r))
    row = F[..., None] * np.cross(rq, n) - gradF_n[..., None] * np.cross(rq, r)
    return MU0_OVER_4PI * row / (F**2)[..., None]


def _check_geometry(points, sensors, center, offset=0):
    r_s = np.linalg.norm(sensors.positions - center, axis=1)
    if np.any(r_s == 0.0):
        raise InvalidGeometry("sensor located at the conductor centre")
    r_p = np.linalg.norm(np.asarray(points) - center, axis=1)
    bad = np.nonzero(r_p >= r_s.min())[0]
    if bad.size:
        raise InvalidGeometry("source point not strictly inside the sensor radius", offset + int(bad[0]))


def sphere_lead_field(p, sensors, center=(0.0, 0.0, 0.0)):
    """``M x 3`` lead field of a dipole at ``p`` inside a spherical conductor.

    A dipole at the centre, or any radial moment, produces no external field.
    """
    center = np.asarray(center, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    _check_geometry(p, sensors, center)
    return _lead_fields(p, sensors, center)[0]


def topography(L, q):
    return np.asarray(L) @ np.asarray(q)


def build_spherical_grid(radius, resolution, center=(0.0, 0.0, 0.0)):
    """Closed-ball cubic lattice centred on ``center``, ordered by (z, y, x).

    Points with ``|p - center| <= radius`` are kept (relative slack 1e-12 on
    the boundary so lattice points exactly on the sphere survive rounding).
    """
    if not 0.0 < resolution <= radius:
        raise DegenerateGrid(f"need 0 < resolution <= radius, got {resolution}, {radius}")
    center = np.asarray(center, dtype=np.float64)
    ratio = radius / resolution
    n = int(np.floor(ratio * (1.0 + 1e-12)))
    k = np.arange(-n, n + 1)
    kz, ky, kx = np.meshgrid(k, k, k, indexing="ij")
    ijk = np.column_stack([kx.ravel(), ky.ravel(), kz.ravel()])
    inside = np.sum(ijk**2, axis=1) <= ratio**2 * (1.0 + 1e-12)
    pts = center + resolution * ijk[inside].astype(np.float64)
    if len(pts) < 2:
        raise DegenerateGrid("grid has fewer than 2 points")
    return SourceSpace(pts)


def precompute_gain(points, sensors, center=(0.0, 0.0, 0.0), threads=1, chunk=2048):
    """Gain table for every point; output is independent of ``threads``."""
    if isinstance(points, SourceSpace):
        neighbors = points.neighbors
        points = points.points
    else:
        neighbors = None
    center = np.asarray(center, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    _check_geometry(points, sensors, center)
    starts = range(0, len(points), chunk)

    def work(s):
        return _lead_fields(points[s:s + chunk], sensors, center)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            blocks = list(pool.map(work, starts))
    else:
        blocks = [work(s) for s in starts]
    return SourceSpace(points, np.concatenate(blocks, axis=0), neighbors)


_GAIN_HEADER = re.compile(rb"APGAIN v1 M=(\d+) G=(\d+)\n")


def save_gain_table(space, path):
    """Write ``space`` in the APGAIN v1 format (see README)."""
    G, M, _ = space.gain.shape
    rec = np.empty((G, 3 + 3 * M), dtype="<f8")
    rec[:, :3] = space.points
    rec[:, 3:] = space.gain.transpose(0, 2, 1).reshape(G, 3 * M)
    with open(path, "wb") as fh:
        fh.write(f"APGAIN v1 M={M} G={G}\n".encode("ascii"))
        fh.write(rec.tobytes())


def _read_header(buf, pattern, name):
    end = buf.find(b"\n")
    if end < 0 or end > 256:
        raise FormatError(f"missing {name} header line", 0)
    m = pattern.fullmatch(buf[:end + 1])
    if m is None:
        raise FormatError(f"malformed {name} header {buf[:end]!r}", 0)
    return m, end + 1


def _read_f8(buf, offset, count, what):
    nbytes = 8 * count
    if len(buf) - offset < nbytes:
        raise FormatError(f"truncated {what}: need {nbytes} bytes, have {len(buf) - offset}", len(buf))
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64)
    bad = np.nonzero(~np.isfinite(arr))[0]
    if bad.size:
        raise FormatError(f"non-finite value in {what}", offset + 8 * int(bad[0]))
    return arr


def load_gain_table(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    m, off = _read_header(buf, _GAIN_HEADER, "APGAIN")
    M, G = int(m.group(1)), int(m.group(2))
    if M < 1 or G < 1:
        raise FormatError(f"invalid dimensions M={M} G={G}", 0)
    width = 3 + 3 * M
    expected = off + 8 * width * G
    arr = _read_f8(buf, off, width * G, "gain records").reshape(G, width)
    if len(buf) != expected:
        raise FormatError(f"dimension mismatch: {len(buf) - expected} trailing bytes", expected)
    gain = arr[:, 3:].reshape(G, 3, M).transpose(0, 2, 1)
    return SourceSpace(arr[:, :3].copy(), gain)
