import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aploc.errors import InsufficientGrid, SilentSources
from aploc.forward import Dipole, SourceSpace
from aploc.linalg import (covariance, max_generalized_eig, orthonormal_basis, psd_factor,
                          signal_subspace)
from aploc.localizers import (SolverConfig, _Scanner, ap_localize, ap_music, ap_sync, ap_wmusic,
                              classic_music, local_maxima, localize, music_spectrum, rap_beamformer,
                              rap_music, scan_argmax)
from aploc.simulate import make_waveforms, synthesize

TANGENTIAL = np.array([0.0, 1.0, 0.0])


def _tangential(p, rng):
    q = np.cross(p, rng.standard_normal(3))
    return q / np.linalg.norm(q)


def _data(space, idx, rho, N, snr, seed, rng=None):
    rng = np.random.default_rng(seed) if rng is None else rng
    dips = [Dipole(space.points[g], _tangential(space.points[g], rng), index=g) for g in idx]
    ds = synthesize(dips, make_waveforms(len(idx), N, rho, seed), space, snr, seed)
    return covariance(ds.Y), dips


def _pair_values(T0, T1, C):
    """tr(P_A C) for every ordered pair of columns of ``T0`` and ``T1`` (closed form)."""
    n0 = np.sum(T0 * T0, 0)
    n1 = np.sum(T1 * T1, 0)
    g = T0.T @ T1
    c00 = np.sum(T0 * (C @ T0), 0)
    c11 = np.sum(T1 * (C @ T1), 0)
    c01 = T0.T @ C @ T1
    det = n0[:, None] * n1[None, :] - g**2
    ok = det > 1e-10 * n0[:, None] * n1[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        val = (n1[None, :] * c00[:, None] + n0[:, None] * c11[None, :] - 2 * g * c01) / det
    return np.where(ok, val, -np.inf)


def test_scan_argmax_ties_pick_lowest_index():
    v = np.array([1.0, 3.0, 3.0 * (1 - 1e-14), 2.0, 3.0])
    assert scan_argmax(v)[0] == 1
    assert scan_argmax(np.array([-np.inf, 0.5, -np.inf]))[0] == 1
    with pytest.raises(SilentSources):
        scan_argmax(np.full(3, -np.inf))


def test_single_fixed_dipole_exact(small_space):
    g = 57
    q = _tangential(small_space.points[g], np.random.default_rng(0))
    y = small_space.gain[g] @ q
    res = ap_localize(np.outer(y, y), small_space, SolverConfig(1), orientations=q[None, :])
    assert res.indices.tolist() == [g]
    assert res.sweeps == 1 and res.converged


def test_single_free_dipole_orientation(small_space):
    rng = np.random.default_rng(3)
    for g in (20, 57, 101):
        q = _tangential(small_space.points[g], rng)
        y = small_space.gain[g] @ q
        res = ap_localize(np.outer(y, y), small_space, SolverConfig(1))
        assert res.indices.tolist() == [g]
        assert abs(res.orientations[0] @ q) >= 1 - 1e-8


def _field(space, seed):
    rng = np.random.default_rng(seed)
    return np.array([_tangential(p, rng) if np.linalg.norm(p) > 0 else np.array([1.0, 0.0, 0.0])
                     for p in space.points])


def _field_data(space, idx, rho, N, snr, seed, field):
    dips = [Dipole(space.points[g], field[g], index=g) for g in idx]
    ds = synthesize(dips, make_waveforms(len(idx), N, rho, seed), space, snr, seed)
    return covariance(ds.Y)


def test_field_pair_matches_exhaustive_oracle(small_space):
    rng = np.random.default_rng(5)
    field = _field(small_space, 5)
    cand = np.flatnonzero(np.linalg.norm(small_space.points, axis=1) >= 0.02)
    for seed in range(20):
        idx = rng.choice(cand, 2, replace=False)
        C = _field_data(small_space, idx, 0.3, 20, None, seed, field)
        res = ap_localize(C, small_space, SolverConfig(2), orientation_field=field)
        T = np.einsum('gmk,gk->mg', small_space.gain, field)
        val = _pair_values(T, T, C)
        i, j = np.unravel_index(np.argmax(val), val.shape)
        assert abs(res.objective_trace[-1] - val[i, j]) <= 1e-9 * val[i, j]
        assert sorted(res.indices.tolist()) == sorted([i, j]) == sorted(idx.tolist())
        np.testing.assert_array_equal(res.orientations, field[res.indices])


def test_per_source_result_is_coordinatewise_maximum(small_space):
    # with per-source orientations AP may stop at a local maximum, but never
    # at a point that a single-coordinate move could improve
    rng = np.random.default_rng(6)
    cand = np.flatnonzero(np.linalg.norm(small_space.points, axis=1) >= 0.02)
    hits = 0
    for seed in range(20):
        idx = rng.choice(cand, 2, replace=False)
        C, dips = _data(small_space, idx, 0.3, 20, None, seed)
        O = np.array([d.orientation for d in dips])
        res = ap_localize(C, small_space, SolverConfig(2), orientations=O)
        val = _pair_values(small_space.topographies(O[0]), small_space.topographies(O[1]), C)
        i, j = res.indices
        assert np.isclose(res.objective_trace[-1], val[i, j], rtol=1e-9)
        assert val[i, j] >= val[:, j].max() * (1 - 1e-12)
        assert val[i, j] >= val[i, :].max() * (1 - 1e-12)
        hits += res.indices.tolist() == idx.tolist()
    assert hits >= 10


def test_field_mode_validation(small_space):
    C = np.eye(small_space.n_sensors)
    with pytest.raises(ValueError):
        ap_localize(C, small_space, SolverConfig(1), orientation_field=np.ones((3, 3)))
    field = _field(small_space, 0)
    with pytest.raises(ValueError):
        ap_localize(C, small_space, SolverConfig(1), orientations=field[:1], orientation_field=field)


def test_free_pair_noiseless_recovery(small_space):
    C, dips = _data(small_space, (12, 95), 0.5, 30, None, 4)
    res = ap_localize(C, small_space, SolverConfig(2))
    assert sorted(res.indices.tolist()) == [12, 95]
    assert res.objective_trace[-1] <= np.trace(C) * (1 + 1e-12)
    assert res.objective_trace[-1] >= np.trace(C) * (1 - 1e-4)


def test_batched_pencil_matches_pointwise_solver(small_space):
    C, _ = _data(small_space, (10, 70), 0.2, 15, 5.0, 1)
    W = psd_factor(C)
    U = orthonormal_basis(small_space.gain[70] @ TANGENTIAL)
    vals, vs = _Scanner(small_space).evaluate(U, num=W)
    P = np.eye(len(C)) - U @ U.T
    for g in (3, 10, 44, 99):
        L = small_space.gain[g]
        lam, v = max_generalized_eig(L.T @ P @ C @ P @ L, L.T @ P @ P @ L)
        assert np.isclose(vals[g], lam, rtol=1e-8)
        assert abs(abs(v @ vs[g]) - 1) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.0, 0.5, 1.0]), st.sampled_from([-5.0, 0.0, 10.0]))
def test_objective_trace_never_decreases(small_space, seed, rho, snr):
    rng = np.random.default_rng(seed)
    cand = np.flatnonzero(np.linalg.norm(small_space.points, axis=1) >= 0.02)
    idx = rng.choice(cand, 3, replace=False)
    C, _ = _data(small_space, idx, rho, 10, snr, seed, rng)
    res = ap_localize(C, small_space, SolverConfig(3))
    assert np.all(np.diff(res.objective_trace) >= -1e-9 * np.trace(C))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.floats(1e-6, 1e6))
def test_covariance_scale_invariance(small_space, seed, s):
    C, _ = _data(small_space, (20, 80), 0.5, 10, 0.0, seed)
    a = ap_localize(C, small_space, SolverConfig(2))
    b = ap_localize(s * C, small_space, SolverConfig(2))
    assert a.indices.tolist() == b.indices.tolist()


@pytest.mark.parametrize("method", ["ap", "ap-music", "ap-wmusic", "ap-sync"])
def test_single_sample_runs(small_space, method):
    C, _ = _data(small_space, (15, 88), 1.0, 1, 10.0, 2)
    res = localize(method, C, small_space, 2)
    assert len(res.indices) == 2 and res.sweeps >= 1


def test_subspace_localizer_is_one_at_truth(small_space):
    C, dips = _data(small_space, (15, 88), 0.0, 20, None, 6)
    sub = signal_subspace(C, 2)
    vals, _ = music_spectrum(sub.Us, small_space)
    assert abs(vals[15] - 1.0) < 1e-9 and abs(vals[88] - 1.0) < 1e-9
    assert np.nanmax(vals[np.isfinite(vals)]) <= 1 + 1e-12


def test_rank_one_truncation_identity(small_space):
    C, _ = _data(small_space, (25, 70, 110), 1.0, 20, 0.0, 3)
    sub = signal_subspace(C, 3).truncate(1)
    cfg = SolverConfig(3)
    a = ap_music(sub.Us, small_space, cfg)
    b = ap_wmusic(sub.Us, sub.eigenvalues, small_space, cfg)
    c = ap_sync(sub.u1, small_space, cfg)
    assert a.indices.tolist() == b.indices.tolist() == c.indices.tolist()


def test_rap_music_is_initial_pass_of_ap_music(small_space):
    C, _ = _data(small_space, (25, 70), 0.5, 20, -5.0, 8)
    sub = signal_subspace(C, 2)
    r = rap_music(sub.Us, small_space, 2)
    a = ap_music(sub.Us, small_space, SolverConfig(2))
    assert r.indices.tolist() == a.initial_indices.tolist()
    assert r.sweeps == 0


def test_classic_music_finds_separated_sources(small_space):
    C, _ = _data(small_space, (12, 95), 0.0, 50, 20.0, 9)
    sub = signal_subspace(C, 2)
    res = classic_music(sub.Us, small_space, 2)
    assert sorted(res.indices.tolist()) == [12, 95]
    assert "paddedPeaks" not in res.flags


def test_local_maxima_and_padding():
    pts = np.arange(5, dtype=float)[:, None] * np.array([[1.0, 0.0, 0.0]])
    vals = np.array([0.1, 0.5, 0.9, 0.4, 0.2])
    adj = [np.array([1]), np.array([0, 2]), np.array([1, 3]), np.array([2, 4]), np.array([3])]
    assert local_maxima(vals, adj).tolist() == [2]
    gain = np.zeros((5, 6, 3))
    rng = np.random.default_rng(0)
    for g in range(5):
        gain[g] = rng.standard_normal((6, 3)) * 1e-3
    space = SourceSpace(pts, gain, adj)
    C = np.eye(6)
    res = classic_music(signal_subspace(C, 3).Us, space, 3)
    assert len(set(res.indices.tolist())) == 3


def test_rap_beamformer_degrades_on_rank_one(small_space):
    C, _ = _data(small_space, (15, 88), 1.0, 1, 10.0, 2)
    res = rap_beamformer(C, small_space, 2)
    assert "degraded" in res.flags
    C, _ = _data(small_space, (15, 88), 0.0, 200, 20.0, 2)
    res = rap_beamformer(C, small_space, 2)
    assert "degraded" not in res.flags
    assert sorted(res.indices.tolist()) == [15, 88]


def test_grid_and_rank_guards(small_space):
    pts = small_space.points[:2]
    tiny = SourceSpace(pts, small_space.gain[:2])
    C = np.eye(small_space.n_sensors)
    with pytest.raises(InsufficientGrid):
        ap_localize(C, tiny, SolverConfig(3))
    with pytest.raises(ValueError):
        ap_localize(C, small_space, SolverConfig(small_space.n_sensors))
    with pytest.raises(SilentSources):
        ap_localize(np.zeros_like(C), small_space, SolverConfig(1))


def test_convergence_controls(small_space):
    C, _ = _data(small_space, (25, 70, 110), 0.7, 20, -5.0, 11)
    res = ap_localize(C, small_space, SolverConfig(3, max_sweeps=1))
    assert res.sweeps == 1
    assert res.converged == ("nonConverged" not in res.flags)
    d = ap_localize(C, small_space, SolverConfig(3, convergence="maxDisplacement", epsilon=1.0))
    assert d.sweeps == 1 and d.converged
    assert len(d.history) == 1
    np.testing.assert_array_equal(d.indices_after_sweep(0), d.initial_indices)


def test_dispatch_truncation(small_space):
    C, _ = _data(small_space, (25, 70, 110), 1.0, 20, 0.0, 3)
    a = localize("ap-music", C, small_space, 3, truncation=1)
    b = localize("ap-sync", C, small_space, 3)
    assert a.indices.tolist() == b.indices.tolist()
