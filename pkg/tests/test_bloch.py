import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgblasso.bloch import (
    AnalyticModel, EpgModel, FispSequence, ProjectedModel, analytic_expo, default_sequence, epg_fisp,
    epg_fisp_batch, epg_fisp_jacobian, log_grid, read_flip_schedule, synthetic_flip_schedule,
)
from sgblasso.errors import BoundaryError, DomainError


def isochromat_fisp(seq, theta, n_spins):
    """Brute-force Bloch simulation: ``n_spins`` isochromats spread over one
    gradient dephasing cycle, hard pulses about x, relaxation between events."""
    t1, t2 = theta
    phase = 2 * np.pi * np.arange(n_spins) / n_spins
    mx = np.zeros(n_spins)
    my = np.zeros(n_spins)
    mz = np.full(n_spins, 1.0 - 2.0 * np.exp(-seq.ti_ms / t1))
    out = []
    for a in seq.flip_angles:
        my, mz = my * np.cos(a) - mz * np.sin(a), my * np.sin(a) + mz * np.cos(a)
        for dt, record in ((seq.te_ms, True), (seq.tr_ms - seq.te_ms, False)):
            e1, e2 = np.exp(-dt / t1), np.exp(-dt / t2)
            mx, my = mx * e2, my * e2
            mz = mz * e1 + 1.0 - e1
            if record:
                out.append(-my.mean())
        c, s = np.cos(phase), np.sin(phase)
        mx, my = c * mx - s * my, s * mx + c * my
    return np.array(out)


def fd_jac(fun, theta, rel):
    theta = np.asarray(theta, float)
    cols = []
    for j in range(2):
        h = rel * theta[j]
        e = np.zeros(2)
        e[j] = h
        cols.append((fun(theta + e) - fun(theta - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_zero_flips_give_zero_signal_and_jacobian():
    seq = FispSequence(np.zeros(50))
    assert np.all(epg_fisp(seq, (800.0, 80.0)) == 0)
    assert np.all(epg_fisp_jacobian(seq, (800.0, 80.0)) == 0)


def test_single_excitation_after_full_recovery():
    seq = FispSequence(np.array([np.pi / 2]), ti_ms=1e6)
    sig = epg_fisp(seq, (1000.0, 100.0))
    assert sig[0] == pytest.approx(np.exp(-1.9 / 100.0), rel=1e-12)
    np.testing.assert_allclose(sig, isochromat_fisp(seq, (1000.0, 100.0), 8), rtol=1e-12)


@pytest.mark.parametrize("theta", [(784.0, 77.0), (4083.0, 1394.0), (300.0, 20.0)])
def test_epg_matches_isochromat_oracle(theta):
    rng = np.random.Generator(np.random.Philox(7))
    seq = FispSequence(np.deg2rad(rng.uniform(5, 80, 40)), tr_ms=12.0, te_ms=3.0, ti_ms=25.0)
    np.testing.assert_allclose(epg_fisp(seq, theta), isochromat_fisp(seq, theta, 4 * 40), atol=1e-12)


def test_distinct_compartments_have_distinct_atoms():
    seq = default_sequence()
    a = epg_fisp(seq, (784.0, 77.0), normalize=True)
    b = epg_fisp(seq, (4083.0, 1394.0), normalize=True)
    assert abs(a @ b) < 1 - 1e-3


def test_errors():
    with pytest.raises(ValueError):
        FispSequence(np.array([]))
    with pytest.raises(DomainError):
        epg_fisp(default_sequence(10), (50.0, 80.0))
    with pytest.raises(DomainError):
        epg_fisp(default_sequence(10), (-5.0, -8.0))
    with pytest.raises(BoundaryError):
        epg_fisp_jacobian(default_sequence(10), (100.0, 99.995))


def test_epg_jacobian_step_sizes_agree(short_seq):
    j1 = epg_fisp_jacobian(short_seq, (784.0, 77.0), rel_step=1e-4)
    j2 = epg_fisp_jacobian(short_seq, (784.0, 77.0), rel_step=1e-3)
    assert np.all(np.linalg.norm(j1, axis=0) > 0)
    np.testing.assert_allclose(j1, j2, rtol=1e-3, atol=1e-3 * np.abs(j1).max())
    j3 = epg_fisp_jacobian(short_seq, (1216.0, 96.0))
    assert np.linalg.norm(j3 - j1) > 1e-3 * np.linalg.norm(j1)


def test_state_cap_beyond_exact_is_invariant():
    seq = default_sequence()
    th = np.array([[784.0, 77.0], [1216.0, 96.0]])
    full = epg_fisp_batch(seq, th)
    more = epg_fisp_batch(seq, th, n_states=seq.length + 5)
    assert np.max(np.abs(more - full)) <= 1e-8 * np.abs(full).max()


def test_t1_changes_fingerprint(short_seq):
    t1s = np.geomspace(100, 5000, 10)
    sig = epg_fisp_batch(short_seq, np.stack([t1s, np.full(10, 60.0)], axis=1))
    assert np.all(np.linalg.norm(np.diff(sig, axis=0), axis=1) > 0)


def test_analytic_closed_form_limits():
    phi, jac = analytic_expo((800.0, 80.0), [0.0, 10.0])
    assert phi[0] == -1.0
    assert np.all(jac[0] == 0)
    t = np.linspace(0, 500, 20)
    phi, _ = analytic_expo((1e9, 50.0), t)
    np.testing.assert_allclose(phi, -np.exp(-t / 50.0), atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(np.log(50.0), np.log(5000.0)),
    st.floats(0.05, 0.9),
    st.lists(st.floats(0.0, 4000.0), min_size=1, max_size=30),
)
def test_analytic_jacobian_matches_fd(log_t1, ratio, grid):
    theta = np.array([np.exp(log_t1), ratio * np.exp(log_t1)])
    t = np.array(grid)
    phi, jac = analytic_expo(theta, t)
    fd = fd_jac(lambda th: analytic_expo(th, t)[0], theta, 1e-6)
    # cancellation in the difference quotient is ~ eps |phi| / h
    roundoff = 1e-15 * np.abs(phi)[:, None] / (1e-6 * theta) + 1e-280  # subnormals carry no precision
    assert np.all(np.abs(fd - jac) <= 1e-6 * np.abs(jac).max(axis=0) + roundoff)


def _model_fd_check(model, thetas, rel, tol):
    jac = model.jacobians(thetas)
    for k, th in enumerate(thetas):
        fd = fd_jac(lambda p: model.atoms(p[None])[:, 0], th, rel)
        err = np.linalg.norm(fd - jac[k], axis=0) / np.linalg.norm(fd, axis=0)
        assert np.all(err <= tol), (th, err)


def test_model_jacobians_are_consistent(analytic, epg_short):
    thetas = np.array([[784.0, 77.0], [1216.0, 96.0], [2500.0, 600.0], [300.0, 40.0]])
    _model_fd_check(analytic, thetas, 1e-5, 1e-6)
    _model_fd_check(epg_short, thetas, 3e-5, 1e-3)
    basis, _ = np.linalg.qr(np.random.Generator(np.random.Philox(0)).standard_normal((200, 8)))
    _model_fd_check(ProjectedModel(epg_short, basis), thetas, 3e-5, 1e-3)


def test_atoms_are_unit_norm(analytic, epg_short):
    th = log_grid(8)
    np.testing.assert_allclose(np.linalg.norm(analytic.atoms(th), axis=0), 1.0, rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(epg_short.atoms(th), axis=0), 1.0, rtol=1e-12)
    jac = analytic.jacobians(th)
    assert np.max(np.abs(np.einsum("nk,knd->kd", analytic.atoms(th), jac))) < 1e-10


def test_read_flip_schedule(tmp_path):
    p = tmp_path / "fa.txt"
    p.write_text("# degrees\n10\n20.5  # trailing\n\n90\n", encoding="utf-8")
    np.testing.assert_allclose(read_flip_schedule(p), np.deg2rad([10, 20.5, 90]))
    (tmp_path / "empty.txt").write_text("# nothing\n")
    with pytest.raises(ValueError):
        read_flip_schedule(tmp_path / "empty.txt")


def test_synthetic_schedule_range():
    fa = np.rad2deg(synthetic_flip_schedule(1000))
    assert fa.min() == pytest.approx(10.0) and fa.max() == pytest.approx(70.0)


def test_log_grid_filters_constraint():
    g = log_grid(10)
    assert np.all(g[:, 0] > g[:, 1])
    assert len(g) == 58
