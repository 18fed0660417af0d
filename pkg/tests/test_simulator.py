import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlabayes import _backend, _fallback
from qlabayes.errors import PreconditionError, SimulationExplosionError
from qlabayes.models import DiffusionModel, ParameterBox, TrueParameter, get_model, poly_trig_model
from qlabayes.simulator import (
    ObservationSet,
    PathConfig,
    derive_seed,
    gaussian_increments,
    read_csv,
    simulate_long_path,
    simulate_observations,
    write_csv,
)

try:
    from qlabayes import _kernels
except ImportError:  # pragma: no cover - fallback-only install
    _kernels = None


def test_zero_noise_single_step(ou):
    model, _ = ou
    truth = TrueParameter([1.0], [1.0], [1.0])
    obs = simulate_observations(model, truth, PathConfig(1, 0.1, 1, 0), zero_noise=True)
    assert obs.values[1, 0] == pytest.approx(0.9, abs=1e-15)


def test_zero_noise_is_the_euler_recursion(ou):
    model, _ = ou
    truth = TrueParameter([1.0], [0.7], [2.0])
    obs = simulate_observations(model, truth, PathConfig(20, 0.1, 4, 0), zero_noise=True)
    x, ref = 2.0, [2.0]
    for _ in range(20):
        for _ in range(4):
            x = x + 0.025 * (-0.7 * x)
        ref.append(x)
    assert obs.values[:, 0].tolist() == ref


@pytest.mark.parametrize("kw", [dict(n=0, h=0.1), dict(n=5, h=0.0), dict(n=5, h=0.1, substeps=0)])
def test_pathconfig_rejects_invalid(kw):
    with pytest.raises(PreconditionError):
        PathConfig(**kw)


def test_from_gamma_step():
    assert PathConfig.from_gamma(1000, 0.6, seed=7).h == pytest.approx(1000 ** -0.6, rel=1e-15)
    with pytest.raises(PreconditionError, match=r"gamma must be in \(0.5, 1\)"):
        PathConfig.from_gamma(1000, 0.4)


def test_ou_stationary_variance(ou):
    model, truth = ou
    obs = simulate_observations(model, truth, PathConfig(100_000, 0.05, 10, 11))
    var = float(np.var(obs.values[:, 0]))
    assert abs(var / 0.5 - 1.0) < 0.05


def test_long_path_mean(ou):
    model, truth = ou
    obs = simulate_long_path(model, truth, 5000.0, 0.01, seed=3)
    assert abs(float(np.mean(obs.values))) < 0.05
    assert obs.n == 500_000


def test_long_path_rejects_zero_time(ou):
    with pytest.raises(PreconditionError):
        simulate_long_path(ou[0], ou[1], 0.0, 0.01, seed=1)


def test_bou_second_moment_stable_across_seeds(bou):
    model, truth = bou
    m = [float(np.mean(simulate_long_path(model, truth, 5000.0, 0.01, seed=s).values ** 2)) for s in (1, 2)]
    assert all(math.isfinite(v) for v in m)
    assert abs(m[0] / m[1] - 1.0) < 0.10


def test_seed_determinism(bou):
    model, truth = bou
    cfg = PathConfig(500, 0.01, 10, 123)
    a = simulate_observations(model, truth, cfg)
    b = simulate_observations(model, truth, cfg)
    assert a == b
    assert a.values.tobytes() == b.values.tobytes()


def test_distinct_seeds_distinct_paths(ou):
    model, truth = ou
    for s in range(10):
        a = simulate_observations(model, truth, PathConfig(10, 0.1, 10, 2 * s))
        b = simulate_observations(model, truth, PathConfig(10, 0.1, 10, 2 * s + 1))
        assert np.any(a.values != b.values)


def test_derive_seed_properties():
    seeds = {derive_seed(20240607, n, r) for n in (2000, 8000, 32000) for r in range(400)}
    assert len(seeds) == 1200
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert all(0 <= s < 2**64 for s in seeds)


def test_philox_stream_is_counter_based():
    long = gaussian_increments(99, 1000)
    short = gaussian_increments(99, 10)
    assert np.array_equal(long[:10], short)


def test_explosion_reports_step():
    # a(x) = +x^3: finite-time blow-up
    m = poly_trig_model("blowup", drift=[0.0, 0.0, 0.0, -1.0], diff=[1.0, 0.0])
    truth = TrueParameter([1.0], [1.0], [3.0])
    with pytest.raises(SimulationExplosionError) as exc:
        simulate_observations(m, truth, PathConfig(10, 1.0, 1, 0), zero_noise=True)
    assert exc.value.step >= 1
    assert str(exc.value.step) in str(exc.value)


def _bou_terminal(dw_fine, substeps_coarse, fine):
    group = fine // substeps_coarse
    dw = dw_fine.reshape(substeps_coarse, group).sum(axis=1)
    out, bad = _backend.euler_polytrig(0.5, 1.5, 0.5, np.array([0.0, 1.0]), 1.0, 0.9,
                                       1.0 / substeps_coarse, substeps_coarse, dw)
    assert bad == -1
    return out[-1]


def test_strong_euler_order_half():
    # b = 1.5 (1 + 0.9 cos x), a = -0.5 x: the multiplicative noise term
    # dominates the O(delta) drift error, so the strong order 1/2 is visible.
    # With the milder BOU coefficients the drift error hides it at these steps.
    fine, paths = 256, 100
    levels = [2, 4, 8, 16, 32]
    err = np.zeros(len(levels))
    for p in range(paths):
        dw = gaussian_increments(derive_seed(5, p), fine) * math.sqrt(1.0 / fine)
        ref = _bou_terminal(dw, fine, fine)
        for i, k in enumerate(levels):
            err[i] += (_bou_terminal(dw, k, fine) - ref) ** 2
    rms = np.sqrt(err / paths)
    slope = np.polyfit(np.log(1.0 / np.array(levels)), np.log(rms), 1)[0]
    assert 0.3 <= slope <= 0.7, (slope, rms)


def test_csv_round_trip_bit_exact(tmp_path, bou):
    model, truth = bou
    obs = simulate_observations(model, truth, PathConfig(300, 0.0137, 10, 4))
    write_csv(obs, tmp_path / "x.csv")
    back = read_csv(tmp_path / "x.csv")
    assert back == obs
    assert back.values.tobytes() == obs.values.tobytes()
    assert back.h == obs.h
    assert (tmp_path / "x.csv").read_text().splitlines()[0] == "t,x_1"


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=2, max_size=30),
       st.floats(min_value=1e-6, max_value=10.0))
def test_csv_round_trip_property(tmp_path_factory, values, h):
    obs = ObservationSet(np.array(values).reshape(-1, 1), h)
    path = tmp_path_factory.mktemp("csv") / "o.csv"
    write_csv(obs, path)
    back = read_csv(path)
    assert back.values.tobytes() == obs.values.tobytes()


def test_csv_multidimensional(tmp_path):
    obs = ObservationSet(np.arange(12.0).reshape(4, 3) / 7.0, 0.25)
    write_csv(obs, tmp_path / "m.csv")
    assert read_csv(tmp_path / "m.csv") == obs


def test_generic_model_path_matches_polytrig_kernel(ou):
    from conftest import generic_scalar_model

    model, truth = ou
    cfg = PathConfig(50, 0.02, 5, 8)
    a = simulate_observations(model, truth, cfg)
    b = simulate_observations(generic_scalar_model(), truth, cfg)
    np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-13)


@pytest.mark.skipif(_kernels is None, reason="compiled extension not built")
def test_kernel_matches_fallback():
    rng = np.random.default_rng(0)
    dw = rng.standard_normal(5000) * 0.03
    drift = np.array([0.1, 1.0, -0.2, 0.3])
    out_c, bad_c = _kernels.euler_polytrig(0.2, 0.8, 1.3, drift, 1.0, 0.4, 1e-3, 10, dw)
    out_p, bad_p = _fallback.euler_polytrig(0.2, 0.8, 1.3, drift, 1.0, 0.4, 1e-3, 10, dw)
    assert bad_c == bad_p == -1
    np.testing.assert_allclose(out_c, out_p, rtol=1e-13, atol=1e-14)
    sc = _kernels.polytrig_stats(out_c, drift, 1.0, 0.4)
    sp = _fallback.polytrig_stats(out_c, drift, 1.0, 0.4)
    np.testing.assert_allclose(sc, sp, rtol=1e-11)


@pytest.mark.skipif(_kernels is None, reason="compiled extension not built")
def test_kernel_and_fallback_agree_on_explosion():
    dw = np.zeros(50)
    args = (3.0, 1.0, 1.0, np.array([0.0, 0.0, 0.0, -1.0]), 1.0, 0.0, 1.0, 1, dw)
    assert _kernels.euler_polytrig(*args)[1] == _fallback.euler_polytrig(*args)[1] >= 0


def test_pure_python_switch():
    env = dict(os.environ, QLA_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from qlabayes import _backend; print(_backend.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
