import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gaitprior.environment import EnvConfig
from gaitprior.metrics import (
    TRACKING_PROFILES,
    OracleAgent,
    Trace,
    compare_rows,
    count_safety_violations,
    fgd,
    footfall_stats,
    integrate_path,
    pca_embed,
    read_report,
    sprint_violations,
    steps_to_distance,
    stance_overlap,
    trace_violations,
    tracking_eval,
    tracking_from_velocities,
    tracking_steps,
    tracking_suite,
    write_report,
)

CFG = EnvConfig()


def sqrtm_denman_beavers(a, iters=60):
    y, z = a.copy(), np.eye(len(a))
    for _ in range(iters):
        y, z = 0.5 * (y + np.linalg.inv(z)), 0.5 * (z + np.linalg.inv(y))
    return y


def fgd_oracle(a, b):
    ma, mb = a.mean(0), b.mean(0)
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    return float(np.sum((ma - mb) ** 2) + np.trace(ca + cb - 2 * sqrtm_denman_beavers(ca @ cb)))


# -- FGD --------------------------------------------------------------------------------

def test_fgd_identical_sets_is_zero(rng):
    x = rng.normal(size=(500, 6))
    assert fgd(x, x) < 1e-8


def test_fgd_one_dimensional_closed_form(rng):
    a, b = rng.normal(1.0, 2.0, 400), rng.normal(-0.5, 0.5, 300)
    expect = (a.mean() - b.mean()) ** 2 + (a.std(ddof=1) - b.std(ddof=1)) ** 2
    assert fgd(a, b) == pytest.approx(expect, rel=1e-9)


def test_fgd_matches_iterative_sqrtm_oracle(rng):
    a = rng.normal(size=(400, 5)) @ rng.normal(size=(5, 5))
    b = rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5)) + 0.3
    assert fgd(a, b) == pytest.approx(fgd_oracle(a, b), rel=1e-6)


def test_fgd_symmetric(rng):
    a, b = rng.normal(size=(200, 4)), rng.normal(size=(150, 4)) * 2
    assert fgd(a, b) == pytest.approx(fgd(b, a), rel=1e-9)


@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_fgd_monotone_in_mean_shift(d1, d2):
    x = np.random.default_rng(0).normal(size=(200, 3))
    lo, hi = sorted((d1, d2))
    assert fgd(x, x + lo) <= fgd(x, x + hi) + 1e-9


def test_fgd_rejects_empty():
    with pytest.raises(ValueError):
        fgd(np.zeros((0, 3)), np.zeros((5, 3)))


# -- tracking ----------------------------------------------------------------------------

def test_oracle_agent_tracks_exactly():
    for name, rep in tracking_suite(OracleAgent(), CFG).items():
        assert rep.position_deviation == pytest.approx(0.0, abs=1e-9), name
        assert rep.heading_drift == 0.0
        assert rep.progress == pytest.approx(TRACKING_PROFILES[name][1], rel=0.02)


def test_yaw_bias_drift_is_rate_times_duration():
    b, n, dt = 0.05, 400, 0.02
    v = np.tile([1.0, 0.0, b], (n, 1))
    _, drift, _ = tracking_from_velocities(v, (1.0, 0.0, 0.0), dt)
    assert drift == pytest.approx(b * n * dt, rel=1e-12)


def test_lateral_offset_deviation_by_hand():
    # constant sideways slip of 0.1 m/s while commanded forward: offset grows linearly
    n, dt = 100, 0.1
    v = np.tile([1.0, 0.1, 0.0], (n, 1))
    dev, drift, prog = tracking_from_velocities(v, (1.0, 0.0, 0.0), dt)
    assert dev == pytest.approx(np.mean(0.1 * dt * np.arange(1, n + 1)))
    assert drift == 0.0 and prog == pytest.approx(n * dt)


def test_integrate_path_circle():
    n, dt, w = 628, 0.01, 1.0
    pos, heading = integrate_path(np.tile([1.0, 0.0, w], (n, 1)), dt)
    assert heading[-1] == pytest.approx(n * dt * w)
    assert np.max(np.abs(np.linalg.norm(pos - [0.0, 1.0], axis=1) - 1.0)) < 0.01


def test_tracking_steps():
    assert tracking_steps((1.0, 0.0, 0.0), 40.0, 0.02) == 2000
    with pytest.raises(ValueError):
        tracking_steps((0.0, 0.0, 1.0), 5.0, 0.02)


class _StandAgent:
    def rollout(self, command, steps, cfg, smooth=True):
        return Trace(np.zeros((steps + 1, 20)), np.tile(command, (steps, 1)), np.zeros((steps, 8)))


class _DivergingAgent(_StandAgent):
    def rollout(self, command, steps, cfg, smooth=True):
        tr = super().rollout(command, 3, cfg)
        tr.diverged = True
        return tr


def test_stalled_agent_fails_and_divergence_is_reported():
    rep = tracking_eval(_StandAgent(), CFG, (1.0, 0.0, 0.0), 5.0)
    assert rep.failed and rep.position_deviation is None and rep.progress == 0.0
    bad = tracking_eval(_DivergingAgent(), CFG, (1.0, 0.0, 0.0), 5.0)
    assert bad.failed and bad.position_deviation is None


class _SlowSlipAgent(_StandAgent):
    """Half the commanded speed with a constant sideways slip."""

    def rollout(self, command, steps, cfg, smooth=True):
        tr = super().rollout(command, steps, cfg)
        tr.states[1:, :3] = [0.5, 0.05, 0.0]
        return tr


def test_deviation_is_accumulated_until_distance_is_covered():
    dt, dist = CFG.dt, 5.0
    rep = tracking_eval(_SlowSlipAgent(), CFG, (1.0, 0.0, 0.0), dist)
    n = steps_to_distance(np.tile([0.5, 0.05, 0.0], (1000, 1)), (1.0, 0.0, 0.0), dist, dt)
    assert n == 500
    assert not rep.failed and rep.progress == pytest.approx(dist)
    assert rep.position_deviation == pytest.approx(np.mean(0.05 * dt * np.arange(1, n + 1)))
    # a tighter budget makes the same agent fail
    assert tracking_eval(_SlowSlipAgent(), CFG, (1.0, 0.0, 0.0), dist, time_budget=1.5).failed


# -- safety -------------------------------------------------------------------------------

def test_injected_violations_are_counted():
    T = 50
    states = np.zeros((T + 1, 20))
    tau = np.zeros((T, 8))
    tau[[3, 10, 40], 2] = CFG.tau_lim + 1.0
    tau[10, 5] = -(CFG.tau_lim + 2.0)  # same step, counted once
    states[8, 13] = CFG.dq_lim * 1.5
    assert trace_violations(Trace(states, np.zeros((T, 3)), tau), CFG) == \
        {"position": 0, "velocity": 1, "torque": 3}


def test_count_at_limit_is_not_violation():
    lim = CFG.limits()
    out = count_safety_violations(lim.tau_lim[None], lim.dq_lim[None], lim.q_lim[None], lim)
    assert out == {"position": 0, "velocity": 0, "torque": 0}


def test_oracle_sprint_is_clean():
    out = sprint_violations(OracleAgent(), CFG)
    assert out == {"position": 0, "velocity": 0, "torque": 0, "diverged": False}


# -- footfall ----------------------------------------------------------------------------------

def test_footfall_intervals_by_hand():
    s = np.zeros((8, 20))
    s[2:5, 12] = -1.0   # FL stance on steps 2..4
    s[6:, 12] = -1.0    # and again to the end
    s[2:5, 18] = -1.0   # RR shares the first window only
    stats = footfall_stats(s)
    assert stats.intervals["FL"] == [(2, 5), (6, 8)]
    assert stats.intervals["RR"] == [(2, 5)]
    assert stats.support.tolist() == [0, 0, 2, 2, 2, 0, 1, 1]
    assert stance_overlap(stats, "FL", "RR") == pytest.approx(3 / 5)
    assert stance_overlap(stats, "FR", "RL") == 1.0


# -- PCA ---------------------------------------------------------------------------------------

def test_pca_matches_eigh_oracle(rng):
    x = rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6))
    emb = pca_embed(x, 2)
    w, v = np.linalg.eigh(np.cov(x, rowvar=False))
    order = np.argsort(w)[::-1]
    assert np.allclose(emb.explained, w[order[:2]] / w.sum(), rtol=1e-9)
    for i in range(2):
        assert abs(abs(emb.components[i] @ v[:, order[i]]) - 1) < 1e-9
    assert np.allclose(emb.points, emb.project(x))


def test_pca_degenerate_rank_one():
    x = np.outer(np.arange(10.0), [1.0, 2.0, 0.0])
    emb = pca_embed(x, 2)
    assert emb.degenerate
    assert np.allclose(emb.components[1], 0.0)
    assert emb.explained[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        pca_embed(np.zeros((1, 3)), 2)


# -- report -------------------------------------------------------------------------------------

def _report(variant="full", fgd_value=1.5):
    return {"variant": variant, "tracking": {"forward_walk": {"position_deviation": 0.1, "heading_drift": 0.2}},
            "fgd": fgd_value, "violations": {"torque": 0, "velocity": 1, "position": 2}}


def test_report_roundtrip(tmp_path):
    path = tmp_path / "r.json"
    write_report(path, _report())
    doc = read_report(path)
    assert doc["schema_version"] == 1 and doc["fgd"] == 1.5


def test_report_rejects_bad_schema(tmp_path):
    path = tmp_path / "r.json"
    write_report(path, dict(_report(), schema_version=9))
    with pytest.raises(ValueError):
        read_report(path)


def test_compare_rows():
    rows = compare_rows([_report("full", 1.0), _report("no_sacc", math.inf)])
    assert [r["variant"] for r in rows] == ["full", "no_sacc"]
    assert rows[0]["tracking_err"] == 0.1 and rows[1]["fgd"] == math.inf
    assert rows[0]["position_violations"] == 2
