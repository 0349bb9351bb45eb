"""Projection matrices, covariance and small symmetric eigenproblems.

All matrices are dense ``float64`` numpy arrays in C (row-major) order.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidData, NumericalError, SingularPencil

RANK_RTOL = 1e-10
PENCIL_RTOL = 1e-10


@dataclass(frozen=True)
class Projector:
    """Orthogonal projector ``P`` together with the rank of the spanned subspace."""

    matrix: np.ndarray
    basis_rank: int

    @property
    def dim(self):
        return self.matrix.shape[0]


@dataclass(frozen=True)
class SubspaceDecomp:
    """Top eigenpairs of a covariance matrix, eigenvalues in descending order."""

    Us: np.ndarray
    eigenvalues: np.ndarray

    @property
    def u1(self):
        return self.Us[:, 0]

    @property
    def Lambda(self):
        return np.diag(self.eigenvalues)

    def truncate(self, k):
        """Keep the first ``k`` components."""
        if not 1 <= k <= self.Us.shape[1]:
            raise ValueError(f"truncation {k} outside [1, {self.Us.shape[1]}]")
        return SubspaceDecomp(self.Us[:, :k].copy(), self.eigenvalues[:k].copy())


def _as_finite(a, name):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidData(f"{name} contains non-finite entries")
    return a


def covariance(Y):
    """Data covariance ``C = Y Y^T`` (no normalisation by the sample count)."""
    Y = _as_finite(Y, "Y")
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.ndim != 2 or min(Y.shape) < 1:
        raise InvalidData(f"Y must be a non-empty matrix, got shape {Y.shape}")
    C = Y @ Y.T
    return 0.5 * (C + C.T)


def orthonormal_basis(A, rtol=RANK_RTOL):
    """Orthonormal basis for the column span of ``A`` via column-pivoted QR.

    Columns whose pivoted diagonal falls below ``rtol * sigma_max(A)`` are
    treated as dependent, so duplicated or nearly coincident topographies
    give a well-defined (lower-rank) basis.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    M, k = A.shape
    if k == 0:
        return np.zeros((M, 0))
    smax = np.linalg.norm(A, 2)
    if smax == 0.0:
        return np.zeros((M, 0))
    Qm, R, _ = scipy.linalg.qr(A, mode="economic", pivoting=True)
    rank = int(np.sum(np.abs(np.diag(R)) > rtol * smax))
    return Qm[:, :rank]


def projector(A, rtol=RANK_RTOL):
    """Projector onto the column span of ``A``; rank-deficient input is allowed."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    U = orthonormal_basis(A, rtol)
    P = U @ U.T
    return Projector(0.5 * (P + P.T), U.shape[1])


def complement(P):
    """``I - P`` for a :class:`Projector`."""
    M = P.matrix.shape[0]
    return Projector(np.eye(M) - P.matrix, M - P.basis_rank)


def _sign_fix(V):
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def signal_subspace(C, Q):
    """Top-``Q`` eigenpairs of symmetric ``C``.

    Eigenvectors are sign-normalised so their largest-magnitude entry is
    positive, which keeps outputs reproducible across LAPACK builds.
    """
    C = _as_finite(C, "C")
    M = C.shape[0]
    if not 1 <= Q <= M:
        raise ValueError(f"Q={Q} must satisfy 1 <= Q <= {M}")
    try:
        w, V = np.linalg.eigh(0.5 * (C + C.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(w)[::-1][:Q]
    w = np.clip(w[order], 0.0, None)
    return SubspaceDecomp(_sign_fix(V[:, order]), w)


def psd_factor(K, rtol=1e-13):
    """Return ``W`` with ``W W^T = K`` for symmetric PSD ``K``, dropping null directions."""
    w, V = np.linalg.eigh(0.5 * (K + K.T))
    if w.size == 0 or w[-1] <= 0.0:
        return np.zeros((K.shape[0], 0))
    keep = w > rtol * w[-1]
    return V[:, keep] * np.sqrt(w[keep])


def max_generalized_eig(F, G, rtol=PENCIL_RTOL, atol=0.0):
    """Largest generalised eigenpair of the symmetric pencil ``(F, G)``.

    ``G`` may be singular: the problem is deflated to the eigenvectors of
    ``G`` whose eigenvalues exceed ``rtol * lambda_max(G)``, which removes the
    spurious infinite eigenvalues a silent (e.g. radial) direction would
    otherwise create.

    Returns
    -------
    lam : float
    v : ndarray
        Unit-norm eigenvector in the retained range of ``G``.
    """
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    F = 0.5 * (F + F.T)
    G = 0.5 * (G + G.T)
    wg, Vg = np.linalg.eigh(G)
    gmax = wg[-1]
    if not np.isfinite(gmax) or gmax <= atol or gmax <= 0.0:
        raise SingularPencil("G is numerically zero")
    keep = wg > rtol * gmax
    T = Vg[:, keep] / np.sqrt(wg[keep])
    H = T.T @ F @ T
    mu, Hv = np.linalg.eigh(0.5 * (H + H.T))
    v = T @ Hv[:, -1]
    v = _sign_fix((v / np.linalg.norm(v))[:, None])[:, 0]
    return float(mu[-1]), v
