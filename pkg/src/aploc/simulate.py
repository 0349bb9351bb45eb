"""Correlated source waveforms, sensor data at exact SNR, and time-course fits.

Random draws use Philox (counter-based) generators keyed by
``(seed, *key, stream)`` so waveform, noise, placement and orientation
draws never share a stream and trials can be generated in any order.
"""

import re
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DegenerateWaveforms, FormatError, InvalidData, SilentSources, SingularSystem
from .forward import Dipole, SourceSpace, _read_f8, _read_header, sphere_lead_field

STREAM_WAVEFORM = 0
STREAM_NOISE = 1
STREAM_PLACEMENT = 2
STREAM_ORIENTATION = 3


def make_rng(seed, stream, *key):
    """Philox generator for ``stream``; ``seed`` is an int or a tuple of ints."""
    seed = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    ss = np.random.SeedSequence([*(int(s) for s in seed), *(int(k) for k in key), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class WaveformSet:
    S: np.ndarray
    rho: float

    @property
    def n_samples(self):
        return self.S.shape[1]

    @property
    def n_sources(self):
        return self.S.shape[0]


@dataclass(frozen=True, eq=False)
class Dataset:
    Y: np.ndarray
    truth: tuple = ()
    snr_db: float = None
    noise_seed: object = 0
    noise: np.ndarray = None

    @property
    def realized_snr_db(self):
        if self.noise is None or not np.any(self.noise):
            return float("inf")
        signal = self.Y - self.noise
        return 20.0 * np.log10(np.linalg.norm(signal) / np.linalg.norm(self.noise))


def correlation(a, b):
    """Normalised inner product of two waveforms (no mean removal)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidData("correlation of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _sinusoid_bank(rng, rows, N, n_sinusoids, freq_range):
    t = np.arange(N) / N
    f = rng.uniform(*freq_range, size=(rows, n_sinusoids, 1))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(rows, n_sinusoids, 1))
    amp = rng.uniform(0.5, 1.0, size=(rows, n_sinusoids, 1))
    return np.sum(amp * np.sin(2.0 * np.pi * f * t + phase), axis=1)


def make_waveforms(Q, N, rho, seed, n_sinusoids=3, freq_range=(1.0, 8.0)):
    """``Q`` unit-norm sinusoid mixtures whose pairwise correlations all equal ``rho``.

    The raw mixtures are orthonormalised and recombined with the Cholesky
    factor of the equicorrelation matrix, so the target correlation is met
    to rounding error.  ``rho == 1`` yields ``Q`` identical rows and only
    needs ``N >= 1``.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if Q < 1 or N < 1:
        raise ValueError("Q and N must be positive")
    base = 1 if rho == 1.0 else Q
    if N < base:
        raise DegenerateWaveforms(f"N={N} samples cannot hold {base} independent waveforms")
    raw = _sinusoid_bank(make_rng(seed, STREAM_WAVEFORM), base, N, n_sinusoids, freq_range)
    Qm, R = np.linalg.qr(raw.T)
    d = np.abs(np.diag(R))
    if d.min() <= 1e-10 * d.max():
        raise DegenerateWaveforms("sinusoid bank is rank deficient; increase N")
    E = (Qm * np.sign(np.diag(R))).T
    if base == 1:
        return WaveformSet(np.repeat(E, Q, axis=0), float(rho))
    target = np.full((Q, Q), rho) + (1.0 - rho) * np.eye(Q)
    chol = scipy.linalg.cholesky(target, lower=True)
    return WaveformSet(chol @ E, float(rho))


def mixing_matrix(sources, forward, center=(0.0, 0.0, 0.0)):
    """``M x Q`` topographies of ``sources``.

    ``forward`` is either a :class:`SensorArray` (sphere model) or a
    :class:`SourceSpace` with gains, in which case each dipole's ``index``
    selects its gain block.
    """
    cols = []
    for d in sources:
        if isinstance(forward, SourceSpace):
            L = forward.gain[d.index]
        else:
            L = sphere_lead_field(d.position, forward, center)
        cols.append(L @ d.orientation)
    return np.column_stack(cols)


def synthesize(sources, waveforms, forward, snr_db, seed, center=(0.0, 0.0, 0.0)):
    """Sensor data ``Y = A S + N`` with white noise scaled to an exact Frobenius SNR.

    ``snr_db`` of ``None`` or ``inf`` gives noiseless data.
    """
    S = waveforms.S
    if len(sources) != S.shape[0]:
        raise ValueError(f"{len(sources)} dipoles but {S.shape[0]} waveforms")
    A = mixing_matrix(sources, forward, center)
    Y0 = A @ S
    scale = sum(
        np.linalg.norm(forward.gain[d.index] if isinstance(forward, SourceSpace)
                       else sphere_lead_field(d.position, forward, center)) * np.linalg.norm(s)
        for d, s in zip(sources, S))
    y0n = np.linalg.norm(Y0)
    if y0n <= 1e-12 * scale or y0n == 0.0:
        raise SilentSources("sources produce no measurable field")
    truth = tuple(Dipole(d.position, d.orientation, s.copy(), d.fixed, d.index)
                  for d, s in zip(sources, S))
    if snr_db is None or np.isinf(snr_db):
        return Dataset(Y0, truth, None, seed, np.zeros_like(Y0))
    noise = make_rng(seed, STREAM_NOISE).standard_normal(Y0.shape)
    noise *= y0n / (np.linalg.norm(noise) * 10.0 ** (snr_db / 20.0))
    return Dataset(Y0 + noise, truth, float(snr_db), seed, noise)


def estimate_timecourses(Y, A, ridge=False):
    """Least-squares source waveforms ``(A^T A + delta I)^{-1} A^T Y``.

    With ``ridge`` enabled ``delta = 1e-4 * trace(A^T A)``; otherwise
    ``delta = 0`` and a rank-deficient ``A`` raises :class:`SingularSystem`.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    Y = np.asarray(Y, dtype=np.float64)
    gram = A.T @ A
    if ridge:
        gram = gram + 1e-4 * np.trace(gram) * np.eye(gram.shape[0])
    else:
        s = np.linalg.svd(A, compute_uv=False)
        if s[0] == 0.0 or s[-1] <= 1e-10 * s[0]:
            raise SingularSystem("topographies are linearly dependent")
    return np.linalg.solve(gram, A.T @ Y)


_DATA_HEADER = re.compile(rb"APDATA v1 M=(\d+) N=(\d+)\n")
_TRUTH_HEADER = re.compile(rb"TRUTH Q=(\d+)\n")
_TRUTH_RECORD = 6 * 8 + 1


def save_dataset(ds, path):
    """Write ``ds`` in the APDATA v1 format (see README)."""
    M, N = ds.Y.shape
    with open(path, "wb") as fh:
        fh.write(f"APDATA v1 M={M} N={N}\n".encode("ascii"))
        fh.write(np.asarray(ds.Y, dtype="<f8").tobytes(order="F"))
        if ds.truth:
            fh.write(f"TRUTH Q={len(ds.truth)}\n".encode("ascii"))
            for d in ds.truth:
                fh.write(np.concatenate([d.position, d.orientation]).astype("<f8").tobytes())
                fh.write(bytes([1 if d.fixed else 0]))


def load_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    m, off = _read_header(buf, _DATA_HEADER, "APDATA")
    M, N = int(m.group(1)), int(m.group(2))
    if M < 1 or N < 1:
        raise FormatError(f"invalid dimensions M={M} N={N}", 0)
    Y = _read_f8(buf, off, M * N, "data matrix").reshape((M, N), order="F")
    off += 8 * M * N
    truth = ()
    if off < len(buf):
        end = buf.find(b"\n", off)
        m = _TRUTH_HEADER.fullmatch(buf[off:end + 1]) if end >= 0 else None
        if m is None:
            raise FormatError("malformed TRUTH block header", off)
        Q = int(m.group(1))
        off = end + 1
        if len(buf) - off != Q * _TRUTH_RECORD:
            raise FormatError(f"truth block size mismatch for Q={Q}", off)
        dips = []
        for _ in range(Q):
            v = _read_f8(buf, off, 6, "truth record")
            flag = buf[off + 48]
            if flag not in (0, 1):
                raise FormatError(f"invalid orientation flag {flag}", off + 48)
            q = v[3:] / np.linalg.norm(v[3:])
            dips.append(Dipole(v[:3], q, None, bool(flag)))
            off += _TRUTH_RECORD
        truth = tuple(dips)
    return Dataset(np.ascontiguousarray(Y), truth)
