import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopdist.errors import ConfigError, IntegrationError, TrainingError
from koopdist.ndmath import Mlp, make_rng
from koopdist.teacher import (
    OUTSIDE,
    CheckerboardSpec,
    Teacher,
    TeacherConfig,
    boundary_distance,
    cell_of,
    generate_pairs,
    karras_grid,
    sample_checkerboard,
    sample_ode,
    teacher_from_arrays,
    teacher_to_arrays,
    train_teacher_edm,
    train_teacher_fm,
)
from oracles import brute_boundary_distance, exact_denoiser

SPEC = CheckerboardSpec()


class FieldTeacher(Teacher):
    """Teacher whose denoiser / velocity is a plain Python function."""

    def __init__(self, kind, fn, spec=SPEC, n_classes=0):
        super().__init__(kind, Mlp.init([2, 2], make_rng(0)), spec, n_classes=n_classes)
        self.fn = fn

    def evaluate(self, x, level, labels=None):
        return self.fn(np.atleast_2d(x), level)


# -- data -------------------------------------------------------------------------

def test_sample_checkerboard_empty():
    pts, labels = sample_checkerboard(SPEC, 0, make_rng(0))
    assert pts.shape == (0, 2) and labels.shape == (0,)


def test_small_grid_uses_two_cells():
    spec = CheckerboardSpec(grid=2, extent=1.0)
    pts, labels = sample_checkerboard(spec, 2000, make_rng(1))
    assert set(np.unique(labels)) == {0, 1}
    # odd parity: cells (1, 0) and (0, 1), i.e. x > 0 > y or x < 0 < y
    assert np.all((pts[:, 0] > 0) != (pts[:, 1] > 0))
    np.testing.assert_array_equal(cell_of(spec, pts), labels)


def test_cell_occupancy_is_binomial():
    n = 80_000
    _, labels = sample_checkerboard(SPEC, n, make_rng(2))
    counts = np.bincount(labels, minlength=8)
    p = 1 / 8
    assert np.all(np.abs(counts - n * p) <= 3 * math.sqrt(n * p * (1 - p)))


def test_negative_count_rejected():
    with pytest.raises(ConfigError):
        sample_checkerboard(SPEC, -1, make_rng(0))


@pytest.mark.parametrize("grid,extent", [(3, 4.0), (0, 4.0), (4, 0.0), (4, -1.0)])
def test_bad_spec(grid, extent):
    with pytest.raises(ConfigError):
        CheckerboardSpec(grid, extent)


def test_cell_centers_round_trip():
    for label in range(SPEC.n_cells):
        assert cell_of(SPEC, SPEC.cell_center(label)) == label


def test_labels_are_row_major():
    # bottom row holds columns 1 and 3
    assert SPEC.occupied_cells()[:2] == [(1, 0), (3, 0)]
    assert cell_of(SPEC, [-1.0, -3.0]) == 0
    assert cell_of(SPEC, [3.0, -3.0]) == 1
    assert cell_of(SPEC, [-3.0, -1.0]) == 2


@pytest.mark.parametrize("p", [(5.0, 0.5), (-5.0, 0.5), (0.5, 5.0), (0.5, -5.0)])
def test_beyond_extent_is_outside(p):
    assert cell_of(SPEC, p) == OUTSIDE


@pytest.mark.parametrize("p", [(0.0, 1.0), (-2.0, -3.0), (1.0, 2.0), (4.0, 1.0), (-4.0, -3.0)])
def test_edges_are_outside(p):
    assert cell_of(SPEC, p) == OUTSIDE


def test_unoccupied_cell_is_outside():
    assert cell_of(SPEC, [-3.0, -3.0]) == OUTSIDE


def test_boundary_distance_examples():
    assert boundary_distance(SPEC, [0.0, 1.0]) == 0.0
    assert boundary_distance(SPEC, SPEC.cell_center(3)) == pytest.approx(1.0, abs=1e-15)


def test_boundary_distance_matches_brute_force():
    pts = make_rng(4).uniform(-6, 6, (300, 2))
    got = boundary_distance(SPEC, pts)
    want = [brute_boundary_distance(SPEC, p) for p in pts]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


# -- schedule ---------------------------------------------------------------------

def test_karras_single_step():
    np.testing.assert_array_equal(karras_grid(1, 0.002, 10.0).sigmas, [10.0, 0.0])


def test_karras_matches_formula():
    sched = karras_grid(5, 0.002, 10.0, 7.0)
    want = [(10.0 ** (1 / 7) + i / 4 * (0.002 ** (1 / 7) - 10.0 ** (1 / 7))) ** 7 for i in range(5)]
    np.testing.assert_allclose(sched.sigmas[:-1], want, rtol=1e-13)
    assert sched.sigmas[0] == 10.0 and sched.sigmas[-2] == 0.002 and sched.sigmas[-1] == 0.0
    assert sched.n_steps == 5


@given(st.integers(2, 200), st.floats(1e-4, 1.0), st.floats(1.5, 100.0), st.floats(0.5, 10.0))
def test_karras_strictly_decreasing(n, smin, smax, rho):
    s = karras_grid(n, smin, smax, rho).sigmas
    assert np.all(np.diff(s) < 0)


@pytest.mark.parametrize("args", [(0, 0.002, 10.0, 7.0), (5, 0.0, 10.0, 7.0), (5, 2.0, 1.0, 7.0),
                                  (5, 0.002, 10.0, 0.0)])
def test_karras_rejects_bad_parameters(args):
    with pytest.raises(ConfigError):
        karras_grid(*args)


# -- sampler ----------------------------------------------------------------------

def test_identity_denoiser_is_a_fixed_point():
    t = FieldTeacher("edm", lambda x, s: x)
    x = make_rng(0).standard_normal((16, 2)) * 10
    traj = sample_ode(t, x, nfe=10)
    np.testing.assert_array_equal(traj[-1], x)
    assert traj.shape == (6, 16, 2)


@pytest.mark.parametrize("sign,factor", [(1.0, math.exp(-1.0)), (-1.0, math.e)])
def test_fm_linear_field_exponential(sign, factor):
    # t runs 1 -> 0, so v = +x decays by e^-1 and v = -x grows by e
    t = FieldTeacher("fm", lambda x, _: sign * x)
    x = np.array([[1.0, -2.0]])
    out = sample_ode(t, x, nfe=40)[-1]
    np.testing.assert_allclose(out, factor * x, rtol=5e-4)


def test_heun_is_second_order():
    t = FieldTeacher("fm", lambda x, _: x)
    x = np.array([[1.0, 0.5]])
    exact = math.exp(-1.0) * x
    errs = [np.abs(sample_ode(t, x, nfe)[-1] - exact).max() for nfe in (8, 16, 32, 64)]
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(ratios >= 3.8), ratios


def test_exact_denoiser_gives_sharp_samples():
    t = FieldTeacher("edm", lambda x, s: exact_denoiser(SPEC, x, s))
    x = 10.0 * make_rng(3).standard_normal((2000, 2))
    out = sample_ode(t, x, nfe=10)[-1]
    assert np.mean(cell_of(SPEC, out) >= 0) >= 0.99


def test_sample_ode_deterministic():
    t = train_teacher_fm(SPEC, TeacherConfig(kind="fm", iterations=3, hidden=(8,)))
    x = make_rng(1).standard_normal((5, 2))
    a, b = sample_ode(t, x, 7), sample_ode(t, x, 7)
    assert a.tobytes() == b.tobytes()


def test_single_point_trajectory_shape():
    t = FieldTeacher("fm", lambda x, _: 0 * x)
    assert sample_ode(t, np.zeros(2), nfe=4).shape == (3, 2)


def test_nonfinite_state_reports_step():
    t = FieldTeacher("edm", lambda x, s: np.full_like(x, np.nan) if s < 1.0 else x)
    sig = karras_grid(5, t.sigma_min, t.sigma_max, t.rho).sigmas
    # the Heun corrector of step i already looks at sigma_{i+1}
    first_bad = int(np.argmax(sig[1:] < 1.0))
    with pytest.raises(IntegrationError, match=f"step {first_bad}:"):
        sample_ode(t, np.ones((2, 2)), nfe=10)


def test_nfe_must_be_positive():
    with pytest.raises(ConfigError):
        sample_ode(FieldTeacher("fm", lambda x, _: x), np.ones(2), nfe=0)


# -- training ---------------------------------------------------------------------

@pytest.mark.parametrize("train,kind", [(train_teacher_edm, "edm"), (train_teacher_fm, "fm")])
def test_zero_iterations_returns_initial_net(train, kind):
    cfg = TeacherConfig(kind=kind, iterations=0, hidden=(16, 16))
    a = train(SPEC, cfg)
    b = Mlp.init([2 + 4 * cfg.fourier, 16, 16, 2], make_rng(cfg.seed), embed_dim=a.net.embed_dim)
    assert all(np.array_equal(p, q) for p, q in zip(a.net.params(), b.params()))
    assert a.kind == kind


def test_divergence_reports_iteration():
    huge = CheckerboardSpec(extent=1e200)
    with pytest.raises(TrainingError, match="iteration 0"):
        train_teacher_fm(huge, TeacherConfig(kind="fm", iterations=5, hidden=(8,)))


def test_preconditioning_with_zero_net():
    t = train_teacher_edm(SPEC, TeacherConfig(iterations=0, hidden=(8,)))
    for p in t.net.params():
        p[...] = 0.0
    x = np.array([[1.0, 2.0]])
    sd = SPEC.extent / math.sqrt(3)
    for s in (0.01, 1.0, 10.0):
        np.testing.assert_allclose(t.evaluate(x, s), sd ** 2 / (s ** 2 + sd ** 2) * x, rtol=1e-14)


def test_trained_edm_high_noise_is_near_mean(small_edm_teacher):
    x = 10.0 * make_rng(8).standard_normal((200, 2))
    d = small_edm_teacher.evaluate(x, 10.0)
    assert np.linalg.norm(d.mean(axis=0)) < 0.5


def test_fm_gaussian_field_is_linear():
    m, s = 2.0, 0.5

    def gaussian(rng, n):
        return m + s * rng.standard_normal((n, 2)), np.zeros(n, dtype=np.int64)

    cfg = TeacherConfig(kind="fm", iterations=3000, hidden=(64, 64), lr=1e-3, seed=3)
    t = train_teacher_fm(SPEC, cfg, data_sampler=gaussian)
    for tt in (0.25, 0.5, 0.75):
        mu, var = (1 - tt) * m, (1 - tt) ** 2 * s ** 2 + tt ** 2
        slope = (tt - (1 - tt) * s ** 2) / var
        x = mu + math.sqrt(var) * np.linspace(-2, 2, 41)
        pts = np.stack([x, np.full_like(x, mu)], axis=1)
        v = t.evaluate(pts, tt)[:, 0]
        fit = np.polyfit(x, v, 1)
        resid = v - np.polyval(fit, x)
        assert np.sqrt(np.mean(resid ** 2)) < 0.05 * np.std(v) + 0.02
        assert fit[0] == pytest.approx(slope, abs=0.15)


def test_teacher_checkpoint_round_trip(small_edm_teacher):
    arrays, meta = teacher_to_arrays(small_edm_teacher)
    back = teacher_from_arrays(arrays, meta)
    x = make_rng(0).standard_normal((4, 2))
    assert back.evaluate(x, 0.5).tobytes() == small_edm_teacher.evaluate(x, 0.5).tobytes()


# -- harvest ----------------------------------------------------------------------

def test_single_pair_reproducible(small_fm_teacher):
    a = generate_pairs(small_fm_teacher, 1, nfe=4, seed=11)
    b = generate_pairs(small_fm_teacher, 1, nfe=4, seed=11)
    assert a == b and len(a) == 1


def test_threads_do_not_change_pairs(small_fm_teacher):
    a = generate_pairs(small_fm_teacher, 50, nfe=4, seed=2, threads=1, chunk=7)
    b = generate_pairs(small_fm_teacher, 50, nfe=4, seed=2, threads=4, chunk=7)
    c = generate_pairs(small_fm_teacher, 50, nfe=4, seed=2, threads=1, chunk=50)
    assert a.x_0.tobytes() == b.x_0.tobytes()
    # a different chunking only changes BLAS blocking, not the draws
    assert a.x_T.tobytes() == c.x_T.tobytes()
    np.testing.assert_allclose(a.x_0, c.x_0, rtol=0, atol=1e-12)


def test_pair_prefix_is_stable(small_fm_teacher):
    short = generate_pairs(small_fm_teacher, 10, nfe=4, seed=5)
    long = generate_pairs(small_fm_teacher, 30, nfe=4, seed=5)
    assert short.x_T.tobytes() == long.x_T[:10].tobytes()


def test_edm_prior_scale(small_edm_teacher):
    ps = generate_pairs(small_edm_teacher, 400, nfe=2, seed=0)
    assert 8.5 < ps.x_T.std() < 11.5
    assert ps.meta.prior_std == 10.0


def test_conditional_harvest_labels(small_fm_teacher):
    ps = generate_pairs(small_fm_teacher, 40, nfe=4, seed=0, conditional=True)
    np.testing.assert_array_equal(ps.labels, cell_of(SPEC, ps.x_0))
    assert ps.meta.conditional


def test_conditional_teacher_needs_conditional_harvest():
    t = train_teacher_fm(SPEC, TeacherConfig(kind="fm", iterations=0, hidden=(8,), conditional=True))
    assert t.conditional and t.net.embed_dim == 16 + 8
    with pytest.raises(ConfigError):
        generate_pairs(t, 4)
    ps = generate_pairs(t, 4, nfe=2, conditional=True)
    assert len(ps) == 4


@settings(deadline=None, max_examples=5)
@given(st.integers(0, 10_000))
def test_pairs_are_finite(seed):
    t = FieldTeacher("edm", lambda x, s: exact_denoiser(SPEC, x, s))
    ps = generate_pairs(t, 8, nfe=6, seed=seed)
    assert np.all(np.isfinite(ps.x_T)) and np.all(np.isfinite(ps.x_0))
