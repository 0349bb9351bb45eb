"""Grid-scanning dipole localizers.

Every method here maximises a ratio of quadratic forms in the (projected)
topography ``l`` of a candidate grid point::

    value(l) = (Q l)^T K (Q l) / (Q l)^T (Q l)

where ``Q`` projects out the topographies of the other sources and ``K`` is
the method's kernel: the data covariance for least squares (AP), the
weighted or unweighted signal subspace for AP-wMUSIC / AP-MUSIC, and the
principal eigenvector for the synchronous variant.  Alternating projection
cycles over the sources, re-fitting each one with the others held fixed,
until a full sweep moves no estimate.

For freely oriented dipoles ``l = L(p) q`` and the ratio is maximised over
``q`` too, which is the largest generalised eigenvalue of a 3x3 pencil per
grid point.  Fixed orientations are given either per source or as a field
over the grid (one known orientation per point, shared by all sources).
The RAP beamformer uses the same scan with numerator ``Q`` and
denominator kernel ``(Q C Q)^+``.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InsufficientGrid, SilentSources
from .linalg import PENCIL_RTOL, orthonormal_basis, psd_factor, signal_subspace

log = logging.getLogger(__name__)

TIE_RTOL = 1e-12
ANNIHILATED_RTOL = 1e-14
SILENT_RTOL = 1e-20
PINV_RTOL = 1e-10


class Method(str, Enum):
    AP_LS = "ap"
    AP_MUSIC = "ap-music"
    AP_WMUSIC = "ap-wmusic"
    AP_SYNC = "ap-sync"
    MUSIC = "music"
    RAP_MUSIC = "rap-music"
    RAP_BEAMFORMER = "rap-beamformer"


AP_FAMILY = (Method.AP_LS, Method.AP_MUSIC, Method.AP_WMUSIC, Method.AP_SYNC)


@dataclass(frozen=True)
class ScanObjective:
    kind: Method
    orientation: str = "free"

    def __post_init__(self):
        object.__setattr__(self, "kind", Method(self.kind))
        if self.orientation not in ("fixed", "free"):
            raise ValueError(f"orientation must be 'fixed' or 'free', got {self.orientation!r}")


@dataclass(frozen=True)
class SolverConfig:
    """Alternating-projection controls.

    ``convergence`` is ``"samePoint"`` (stop when a sweep moves no grid
    index) or ``"maxDisplacement"`` (stop when every estimate moved less
    than ``epsilon`` metres).  ``refine=False`` runs the initialisation pass
    only, i.e. the sequential (S-MUSIC / RAP style) scan.
    """

    Q: int
    max_sweeps: int = 20
    convergence: str = "samePoint"
    epsilon: float = 0.0
    refine: bool = True

    def __post_init__(self):
        if self.Q < 1:
            raise ValueError("Q must be at least 1")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if self.convergence not in ("samePoint", "maxDisplacement"):
            raise ValueError(f"unknown convergence rule {self.convergence!r}")

    @classmethod
    def sequential(cls, Q):
        return cls(Q, max_sweeps=1, refine=False)


@dataclass(frozen=True, eq=False)
class LocalizationResult:
    method: str
    indices: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray
    objective_trace: np.ndarray
    sweeps: int
    converged: bool
    initial_indices: np.ndarray
    peak_values: np.ndarray
    history: tuple = ()
    flags: frozenset = field(default_factory=frozenset)

    def indices_after_sweep(self, k):
        """Grid indices after sweep ``k`` (``0`` is the initialisation pass)."""
        if k == 0 or not self.history:
            return self.initial_indices
        return self.history[min(k, len(self.history)) - 1]


def scan_argmax(values, rtol=TIE_RTOL):
    """Index and value of the maximum; near-ties resolve to the lowest index.

    Values within ``rtol * |max|`` of the maximum count as ties, so a
    localizer that is constant up to rounding returns index 0.
    """
    values = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(values)
    if not ok.any():
        raise SilentSources("localizer is undefined at every grid point")
    vmax = values[ok].max()
    idx = int(np.flatnonzero(ok & (values >= vmax - rtol * abs(vmax)))[0])
    return idx, float(values[idx])


def _pair_products(X):
    """Per-point 3x3 Gram matrices of an ``(R, G, 3)`` stack."""
    out = np.empty((X.shape[1], 3, 3))
    for i in range(3):
        for j in range(i, 3):
            v = np.einsum("rg,rg->g", X[:, :, i], X[:, :, j])
            out[:, i, j] = v
            out[:, j, i] = v
    return out


def batched_pencil(F, G, valid, gmin=None):
    """Largest generalised eigenpairs of a stack of 3x3 pencils ``(F, G)``.

    Each ``G`` is deflated to its eigen-directions above ``PENCIL_RTOL``
    times its largest eigenvalue; ``F`` must be PSD.  Entries where
    ``valid`` is false, or whose largest ``G`` eigenvalue does not exceed
    ``gmin``, get ``-inf``.
    """
    wg, Vg = np.linalg.eigh(G)
    gmax = wg[:, -1:]
    if gmin is not None:
        valid = valid & (gmax[:, 0] > gmin)
    keep = (wg > PENCIL_RTOL * gmax) & valid[:, None]
    inv = np.zeros_like(wg)
    inv[keep] = 1.0 / np.sqrt(wg[keep])
    T = Vg * inv[:, None, :]
    H = np.swapaxes(T, 1, 2) @ F @ T
    mu, Hv = np.linalg.eigh(0.5 * (H + np.swapaxes(H, 1, 2)))
    lam = mu[:, -1].copy()
    v = np.einsum("gij,gj->gi", T, Hv[:, :, -1])
    nrm = np.linalg.norm(v, axis=1)
    nrm[nrm == 0.0] = 1.0
    v /= nrm[:, None]
    big = np.argmax(np.abs(v), axis=1)
    v *= np.where(v[np.arange(len(v)), big] < 0, -1.0, 1.0)[:, None]
    lam[~valid] = -np.inf
    return lam, v


class _Scanner:
    """Evaluates one localizer over every grid point for a given excluded basis."""

    def __init__(self, space, orientations=None, field=None):
        if space.gain is None:
            raise ValueError("source space has no gain table")
        self.space = space
        self.M = space.gain.shape[1]
        self.G = space.size
        self.field = None
        self.free = orientations is None and field is None
        if self.free:
            self.L = space.flat_gain
            self.norms = [space.block_norm2]
        elif field is not None:
            self.field = _check_field(field, space)
            T = np.ascontiguousarray(np.einsum("gmk,gk->mg", space.gain, self.field))
            self.topos = [T]
            self.norms = [np.sum(T * T, axis=0)]
        else:
            self.orientations = np.asarray(orientations, dtype=np.float64).reshape(-1, 3)
            self.topos = [space.topographies(o) for o in self.orientations]
            self.norms = [np.sum(t * t, axis=0) for t in self.topos]

    @property
    def slots(self):
        return 1 if self.field is not None else len(self.orientations)

    def topography(self, idx, orientation):
        return self.space.gain[idx] @ orientation

    def evaluate(self, U, slot=0, num=None, den=None):
        """Localizer values and orientations for every point.

        ``num`` / ``den`` are factors ``W`` with kernel ``W W^T`` applied to
        the projected topography; ``None`` means the identity kernel.
        """
        if self.field is not None:
            slot = 0
        L = self.L if self.free else self.topos[slot]
        QL = L - U @ (U.T @ L) if U.shape[1] else L
        norm2 = self.norms[0 if self.free else slot]
        audible = norm2 > SILENT_RTOL * norm2.max()
        if self.free:
            QQ = _pair_products(QL.reshape(self.M, self.G, 3)) if U.shape[1] else self.space.block_gram
            Fm = QQ if num is None else _pair_products((num.T @ QL).reshape(-1, self.G, 3))
            if den is None:
                return batched_pencil(Fm, QQ, audible, ANNIHILATED_RTOL * norm2)
            valid = audible & (np.linalg.eigvalsh(QQ)[:, -1] > ANNIHILATED_RTOL * norm2)
            Gm = _pair_products((den.T @ QL).reshape(-1, self.G, 3))
            gden = np.linalg.eigvalsh(Gm)[:, -1]
            return batched_pencil(Fm, Gm, valid, ANNIHILATED_RTOL * gden[valid].max(initial=0.0))
        proj = np.sum(QL * QL, axis=0)
        valid = audible & (proj > ANNIHILATED_RTOL * norm2)
        n = proj if num is None else np.sum((num.T @ QL) ** 2, axis=0)
        d = proj if den is None else np.sum((den.T @ QL) ** 2, axis=0)
        if den is not None:
            valid &= d > ANNIHILATED_RTOL * d[valid].max(initial=0.0)
        vals = np.full(self.G, -np.inf)
        vals[valid] = n[valid] / d[valid]
        if self.field is not None:
            return vals, self.field
        return vals, np.broadcast_to(self.orientations[slot], (self.G, 3))


def _check_field(field, space):
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (space.size, 3):
        raise ValueError(f"orientation field must have shape ({space.size}, 3), got {field.shape}")
    if np.any(np.abs(np.linalg.norm(field, axis=1) - 1.0) > 1e-12):
        raise ValueError("orientation field must hold unit vectors")
    return field


def _fixed_args(Q, orientations, field):
    if orientations is not None and field is not None:
        raise ValueError("give per-source orientations or an orientation field, not both")
    if orientations is not None and np.shape(orientations) != (Q, 3):
        raise ValueError(f"fixed mode needs one orientation per source, shape ({Q}, 3)")


def _objective(A, K):
    U = orthonormal_basis(A)
    return float(np.sum(U * (K @ U)))


def _pick(vals, first, kernel_scale, flags):
    idx, val = scan_argmax(vals)
    finite = vals[np.isfinite(vals)]
    if val <= 1e-12 * kernel_scale:
        if first:
            raise SilentSources("localizer is zero everywhere; no source energy in the kernel")
        flags.add("lowConfidence")
    elif finite.max() - finite.min() <= 1e-9 * abs(val):
        flags.add("lowConfidence")
    return idx, val


def _check(space, Q, M):
    if space.size < Q:
        raise InsufficientGrid(f"grid has {space.size} points but Q={Q}")
    if Q >= M:
        raise ValueError(f"Q={Q} must be smaller than the sensor count M={M}")


def _alternate(name, space, cfg, W, K, orientations=None, field=None):
    """Alternating projection with kernel ``K = W W^T``."""
    Q = cfg.Q
    M = space.gain.shape[1]
    _check(space, Q, M)
    if W.shape[1] == 0:
        raise SilentSources("kernel is numerically zero")
    _fixed_args(Q, orientations, field)
    scanner = _Scanner(space, orientations, field)
    scale = float(np.linalg.norm(W, 2) ** 2)
    idx = np.full(Q, -1)
    ori = np.zeros((Q, 3))
    A = np.zeros((M, Q))
    peaks = np.zeros(Q)
    trace = []
    flags = set()

    def update(q, U, first=False):
        vals, vs = scanner.evaluate(U, q, num=W)
        g, val = _pick(vals, first, scale, flags)
        idx[q], ori[q], peaks[q] = g, vs[g], val
        A[:, q] = scanner.topography(g, vs[g])

    for q in range(Q):
        update(q, orthonormal_basis(A[:, :q]), first=(q == 0))
        trace.append(_objective(A[:, :q + 1], K))
    initial = idx.copy()

    history = []
    sweeps = 0
    converged = not cfg.refine
    if cfg.refine:
        for _ in range(cfg.max_sweeps):
            prev_idx = idx.copy()
            prev_pos = space.points[idx].copy()
            for q in range(Q):
                others = np.delete(A, q, axis=1)
                update(q, orthonormal_basis(others))
                trace.append(_objective(A, K))
            sweeps += 1
            history.append(idx.copy())
            if cfg.convergence == "samePoint":
                done = np.array_equal(idx, prev_idx)
            else:
                done = np.all(np.linalg.norm(space.points[idx] - prev_pos, axis=1) < cfg.epsilon)
            if done:
                converged = True
                break
        if not converged:
            flags.add("nonConverged")
    if len(set(idx.tolist())) < Q:
        flags.add("duplicateSources")
        log.warning("%s: two or more estimates share a grid point", name)
    return LocalizationResult(
        method=name,
        indices=idx,
        positions=space.points[idx].copy(),
        orientations=ori,
        objective_trace=np.array(trace),
        sweeps=sweeps,
        converged=converged,
        initial_indices=initial,
        peak_values=peaks,
        history=tuple(history),
        flags=frozenset(flags),
    )


def ap_localize(C, space, cfg, orientations=None, orientation_field=None):
    """Least-squares localisation by alternating projection.

    Parameters
    ----------
    C : ndarray, shape (M, M)
        Data covariance ``Y Y^T``.
    space : SourceSpace
        Grid with gain table.
    cfg : SolverConfig
    orientations : ndarray, shape (Q, 3), optional
        Known per-source orientations (fixed mode).  When omitted, each
        source's orientation is estimated with the generalised-eigenvalue
        solution (free mode).
    orientation_field : ndarray, shape (G, 3), optional
        Known orientation at every grid point (e.g. cortical normals).  Every
        source then shares the same topography dictionary.
    """
    C = np.asarray(C, dtype=np.float64)
    return _alternate(Method.AP_LS.value, space, cfg, psd_factor(C), C, orientations,
                      orientation_field)


def ap_music(Us, space, cfg, orientations=None, orientation_field=None):
    """AP with the unweighted signal-subspace kernel ``Us Us^T``."""
    Us = np.asarray(Us, dtype=np.float64).reshape(space.gain.shape[1], -1)
    return _alternate(Method.AP_MUSIC.value, space, cfg, Us, Us @ Us.T, orientations,
                      orientation_field)


def ap_wmusic(Us, eigenvalues, space, cfg, orientations=None, orientation_field=None):
    """AP with the eigenvalue-weighted subspace kernel ``Us diag(lam) Us^T``."""
    Us = np.asarray(Us, dtype=np.float64).reshape(space.gain.shape[1], -1)
    W = Us * np.sqrt(np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None))
    return _alternate(Method.AP_WMUSIC.value, space, cfg, W, W @ W.T, orientations,
                      orientation_field)


def ap_sync(u1, space, cfg, orientations=None, orientation_field=None):
    """AP for synchronous sources: rank-one kernel ``u1 u1^T``."""
    u1 = np.asarray(u1, dtype=np.float64).reshape(-1, 1)
    if u1.shape[0] != space.gain.shape[1]:
        raise ValueError("u1 must be a single M-vector (rank-one subspace)")
    return _alternate(Method.AP_SYNC.value, space, cfg, u1, u1 @ u1.T, orientations,
                      orientation_field)


def rap_music(Us, space, Q, orientations=None, orientation_field=None):
    """Recursive MUSIC scan: one pass, projecting out sources already found."""
    Us = np.asarray(Us, dtype=np.float64).reshape(space.gain.shape[1], -1)
    return _alternate(Method.RAP_MUSIC.value, space, SolverConfig.sequential(Q), Us, Us @ Us.T,
                      orientations, orientation_field)


def music_spectrum(Us, space, orientations=None, orientation_field=None):
    """MUSIC pseudo-spectrum ``l^T Us Us^T l / l^T l`` at every grid point.

    With per-source orientations the spectrum at a point is the best value
    over the supplied orientation set.
    """
    Us = np.asarray(Us, dtype=np.float64).reshape(space.gain.shape[1], -1)
    if orientations is not None and orientation_field is not None:
        raise ValueError("give per-source orientations or an orientation field, not both")
    scanner = _Scanner(space, orientations, orientation_field)
    empty = np.zeros((space.gain.shape[1], 0))
    if scanner.free or scanner.field is not None:
        return scanner.evaluate(empty, num=Us)
    best = np.full(space.size, -np.inf)
    best_ori = np.zeros((space.size, 3))
    for s in range(scanner.slots):
        vals, vs = scanner.evaluate(empty, s, num=Us)
        better = vals > best
        best[better] = vals[better]
        best_ori[better] = vs[better]
    return best, best_ori


def local_maxima(values, adjacency):
    """Indices whose value strictly exceeds every finite neighbour value."""
    out = []
    for g, nbrs in enumerate(adjacency):
        v = values[g]
        if not np.isfinite(v):
            continue
        nv = values[nbrs]
        nv = nv[np.isfinite(nv)]
        if nv.size == 0 or np.all(v > nv):
            out.append(g)
    return np.array(out, dtype=np.intp)


def classic_music(Us, space, Q, orientations=None, orientation_field=None):
    """Single-scan MUSIC returning the ``Q`` largest local maxima.

    When fewer than ``Q`` strict local maxima exist the result is padded with
    the next-highest points not adjacent to any already chosen, and the
    ``paddedPeaks`` flag is set.
    """
    M = space.gain.shape[1]
    _check(space, Q, M)
    _fixed_args(Q, orientations, orientation_field)
    vals, vs = music_spectrum(Us, space, orientations, orientation_field)
    if not np.any(np.isfinite(vals)):
        raise SilentSources("MUSIC spectrum undefined everywhere")
    adj = space.adjacency
    peaks = local_maxima(vals, adj)
    # stable sort keeps the lowest index first among equal peaks
    peaks = peaks[np.argsort(-vals[peaks], kind="stable")]
    chosen = list(peaks[:Q])
    flags = set()
    if len(chosen) < Q:
        flags.add("paddedPeaks")
        order = np.argsort(-np.where(np.isfinite(vals), vals, -np.inf), kind="stable")
        blocked = set(chosen)
        for c in chosen:
            blocked.update(adj[c].tolist())
        for g in order:
            if len(chosen) == Q:
                break
            if g not in blocked:
                chosen.append(g)
                blocked.add(g)
                blocked.update(adj[g].tolist())
        for g in order:
            if len(chosen) == Q:
                break
            if g not in chosen:
                chosen.append(g)
    idx = np.array(chosen, dtype=np.intp)
    A = np.column_stack([space.gain[g] @ vs[g] for g in idx])
    Us2 = np.asarray(Us).reshape(M, -1)
    obj = _objective(A, Us2 @ Us2.T)
    return LocalizationResult(
        method=Method.MUSIC.value, indices=idx, positions=space.points[idx].copy(),
        orientations=vs[idx].copy(), objective_trace=np.array([obj]), sweeps=0,
        converged=True, initial_indices=idx.copy(), peak_values=vals[idx].copy(),
        flags=frozenset(flags))


def _pinv_factor(K, rtol=PINV_RTOL):
    """``Wd`` with ``Wd Wd^T = K^+`` (eigenvalues below ``rtol * max`` discarded)."""
    w, V = np.linalg.eigh(0.5 * (K + K.T))
    if w[-1] <= 0.0:
        return np.zeros((K.shape[0], 0))
    keep = w > rtol * w[-1]
    return V[:, keep] / np.sqrt(w[keep])


def rap_beamformer(C, space, Q, orientations=None, orientation_field=None):
    """Recursively applied and projected beamformer.

    Maximises ``l^T Q l / l^T (Q C Q)^+ l`` once per source, projecting out
    the sources already found.  Rank-deficient covariance (e.g. synchronous
    sources or very few samples) runs but sets the ``degraded`` flag.
    """
    C = np.asarray(C, dtype=np.float64)
    M = space.gain.shape[1]
    _check(space, Q, M)
    _fixed_args(Q, orientations, orientation_field)
    w = np.linalg.eigvalsh(C)
    if w[-1] <= 0.0:
        raise SilentSources("covariance is zero")
    flags = set()
    rank = int(np.sum(w > PINV_RTOL * w[-1]))
    if rank <= Q:
        flags.add("degraded")
        log.warning("rap-beamformer: covariance rank %d <= Q=%d; LCMV-type scans are unreliable", rank, Q)
    scanner = _Scanner(space, orientations, orientation_field)
    idx = np.full(Q, -1)
    ori = np.zeros((Q, 3))
    A = np.zeros((M, Q))
    peaks = np.zeros(Q)
    trace = []
    for q in range(Q):
        U = orthonormal_basis(A[:, :q])
        Qm = np.eye(M) - U @ U.T
        Wd = _pinv_factor(Qm @ C @ Qm)
        if Wd.shape[1] == 0:
            raise SilentSources("projected covariance vanished")
        vals, vs = scanner.evaluate(U, q, num=None, den=Wd)
        g, val = _pick(vals, False, 0.0, flags)
        idx[q], ori[q], peaks[q] = g, vs[g], val
        A[:, q] = scanner.topography(g, vs[g])
        trace.append(_objective(A[:, :q + 1], C))
    return LocalizationResult(
        method=Method.RAP_BEAMFORMER.value, indices=idx, positions=space.points[idx].copy(),
        orientations=ori, objective_trace=np.array(trace), sweeps=0, converged=True,
        initial_indices=idx.copy(), peak_values=peaks, flags=frozenset(flags))


def localize(method, C, space, Q, orientations=None, max_sweeps=20, truncation=None,
             convergence="samePoint", epsilon=0.0, orientation_field=None):
    """Dispatch one of the :class:`Method` engines on covariance ``C``.

    Subspace methods use the top-``Q`` eigenvectors of ``C``, optionally
    truncated to the first ``truncation`` components.
    """
    method = Method(method)
    cfg = SolverConfig(Q, max_sweeps, convergence, epsilon)
    fixed = dict(orientations=orientations, orientation_field=orientation_field)
    if method is Method.AP_LS:
        return ap_localize(C, space, cfg, **fixed)
    if method is Method.RAP_BEAMFORMER:
        return rap_beamformer(C, space, Q, **fixed)
    sub = signal_subspace(C, Q)
    if truncation is not None:
        sub = sub.truncate(min(truncation, Q))
    if method is Method.AP_MUSIC:
        return ap_music(sub.Us, space, cfg, **fixed)
    if method is Method.AP_WMUSIC:
        return ap_wmusic(sub.Us, sub.eigenvalues, space, cfg, **fixed)
    if method is Method.AP_SYNC:
        return ap_sync(sub.u1, space, cfg, **fixed)
    if method is Method.MUSIC:
        return classic_music(sub.Us, space, Q, **fixed)
    return rap_music(sub.Us, space, Q, **fixed)
