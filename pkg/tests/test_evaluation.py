import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stairclimb.evaluation import (
    NA,
    TRANSFER_COLUMNS,
    EvalReport,
    critic_heatmap,
    cross_matrix,
    episode_outcomes,
    goal_adjacent_mask,
    lattice_shape,
    level_sweep,
    random_policy,
    rate,
    scripted_policy,
    success_rate,
    total_success,
    transferability,
    wall_adjacent_mask,
    write_heatmap,
    write_level_csv,
    write_transfer_csv,
)
from stairclimb.env import StepEvent
from stairclimb.net import PolicyParams
from stairclimb.terrain import Mode, StairKind, difficulty_to_spec, generate

percent = st.floats(0, 100)


def test_rate_example():
    assert rate(274, 300) == pytest.approx(91.3333, abs=1e-4)
    assert round(rate(274, 300), 2) == 91.33
    with pytest.raises(ValueError):
        rate(0, 0)


def test_total_success_examples():
    assert total_success(91.3, 87.7) == pytest.approx(89.5)
    assert total_success(2.0, 1.0) == 1.5
    with pytest.raises(ValueError):
        total_success(101.0, 3.0)


@given(percent)
def test_total_success_idempotent(x):
    assert total_success(x, x) == pytest.approx(x)


@given(percent, percent)
def test_total_between_levels(a, b):
    assert min(a, b) <= total_success(a, b) <= max(a, b)


def test_transferability_examples():
    assert transferability(1.5, 89.5) == pytest.approx(1.676, abs=1e-3)
    assert round(transferability(1.5, 89.5), 1) == 1.7
    assert round(transferability(0.9, 89.5), 1) == 1.0
    assert transferability(89.5, 89.5) == 100.0
    assert transferability(3.0, 0.0) is None


def test_report_validation():
    with pytest.raises(ValueError):
        EvalReport(StairKind.STRAIGHT, 1, 10, 11, 110.0)


def test_scripted_walker_always_succeeds():
    rep = success_rate(scripted_policy(), "straight", 1, n_episodes=20, seed=1, mode="train")
    assert rep.success_rate == 100.0 and rep.successes == 20


def test_random_policy_fails_u_shaped():
    rep = success_rate(random_policy(0), "u_shaped", 3, n_episodes=20, seed=2)
    assert rep.success_rate <= 5.0


def test_outcomes_are_terminal_and_seeded():
    a = episode_outcomes(random_policy(3), "straight", 2, 12, seed=4)
    b = episode_outcomes(random_policy(3), "straight", 2, 12, seed=4)
    assert np.array_equal(a, b)
    assert all(StepEvent(int(e)).terminal for e in a)
    with pytest.raises(ValueError):
        episode_outcomes(random_policy(3), "straight", 2, 0, seed=4)


def test_level_sweep_csv(tmp_path):
    reports = level_sweep(scripted_policy(), "straight", [1, 2], n_episodes=4, seed=0)
    path = tmp_path / "levels.csv"
    write_level_csv(path, reports)
    rows = list(csv.DictReader(open(path)))
    assert [int(r["level"]) for r in rows] == [1, 2]
    assert all(r["terrain"] == "straight" for r in rows)
    assert float(rows[0]["success_rate"]) == reports[0].success_rate


def _fake_eval(table):
    def evaluate(params, kind, level):
        return table[(int(params.flat[0]), kind, level)]

    return evaluate


def _tagged(tag):
    p = PolicyParams.zeros()
    p.flat[0] = tag
    return p


def test_cross_matrix_against_hand_computation():
    kinds = [StairKind.U_SHAPED, StairKind.STRAIGHT]
    table = {
        (0, StairKind.U_SHAPED, 3): 91.3, (0, StairKind.U_SHAPED, 4): 87.7,
        (0, StairKind.STRAIGHT, 3): 98.0, (0, StairKind.STRAIGHT, 4): 96.3,
        (1, StairKind.U_SHAPED, 3): 2.0, (1, StairKind.U_SHAPED, 4): 1.0,
        (1, StairKind.STRAIGHT, 3): 99.0, (1, StairKind.STRAIGHT, 4): 100.0,
    }
    models = {"u": (_tagged(0), StairKind.U_SHAPED), "straight": (_tagged(1), StairKind.STRAIGHT)}
    rows = {(r.model, r.terrain): r for r in cross_matrix(models, kinds, evaluate=_fake_eval(table))}
    assert len(rows) == 4
    assert rows[("u", StairKind.U_SHAPED)].transferability is None
    assert rows[("straight", StairKind.STRAIGHT)].transferability is None
    r = rows[("straight", StairKind.U_SHAPED)]
    assert r.total == 1.5
    assert r.transferability == pytest.approx(100 * 1.5 / 89.5)
    r = rows[("u", StairKind.STRAIGHT)]
    assert r.total == pytest.approx(97.15)
    assert r.transferability == pytest.approx(100 * 97.15 / 99.5)


def test_cross_matrix_single_cell_and_missing_model(tmp_path):
    table = {(0, StairKind.SPIRAL, 3): 10.0, (0, StairKind.SPIRAL, 4): 20.0}
    rows = cross_matrix({"m": (_tagged(0), StairKind.U_SHAPED)}, ["spiral"], evaluate=_fake_eval(table))
    assert len(rows) == 1
    assert rows[0].cells() == ["m", "spiral", "10.0", "20.0", "15.0", NA]
    rows += cross_matrix({"gone": None}, ["spiral"], evaluate=_fake_eval(table))
    assert rows[1].cells()[2:] == [NA] * 4
    path = tmp_path / "t.csv"
    write_transfer_csv(path, rows)
    lines = list(csv.reader(open(path)))
    assert lines[0] == TRANSFER_COLUMNS
    assert all(len(line) == len(TRANSFER_COLUMNS) for line in lines)


@pytest.fixture(scope="module")
def u_test3():
    return generate(difficulty_to_spec("u_shaped", 3, Mode.TEST))


def test_heatmap_dimensions_and_finiteness(u_test3):
    params = PolicyParams.init(0)
    before = params.flat.copy()
    heat = critic_heatmap(params, u_test3, spacing=0.1)
    assert np.array_equal(params.flat, before)
    ex, ey = u_test3.extent
    assert heat.values.shape == (math.ceil(ex / 0.1 - 1e-9), math.ceil(ey / 0.1 - 1e-9))
    assert heat.values.shape == lattice_shape(u_test3, 0.1)
    assert np.all(np.isfinite(heat.values))
    assert np.array_equal(heat.values, critic_heatmap(params, u_test3, spacing=0.1).values)


def test_heatmap_fixed_yaw_and_errors(u_test3):
    params = PolicyParams.init(0)
    fixed = critic_heatmap(params, u_test3, spacing=0.5, yaw_mode="fixed", fixed_yaw=0.0)
    facing = critic_heatmap(params, u_test3, spacing=0.5)
    assert fixed.values.shape == facing.values.shape
    assert not np.array_equal(fixed.values, facing.values)
    with pytest.raises(ValueError):
        critic_heatmap(params, u_test3, spacing=0.0)
    with pytest.raises(ValueError):
        critic_heatmap(params, u_test3, yaw_mode="spin")


def test_cell_sets(u_test3):
    heat = critic_heatmap(PolicyParams.init(0), u_test3, spacing=0.1)
    goal = goal_adjacent_mask(u_test3, heat)
    wall = wall_adjacent_mask(u_test3, heat)
    assert goal.any() and wall.any()
    assert not (goal & wall).any()
    px, py = heat.points()
    gx, gy = u_test3.goal_pose[:2]
    assert np.all(np.hypot(px[goal] - gx, py[goal] - gy) <= 0.5)
    # every wall-adjacent point has a wall cell within one spacing (brute force)
    wx, wy = np.nonzero(u_test3.wall_mask)
    cx, cy = (wx + 0.5) * u_test3.cell_size, (wy + 0.5) * u_test3.cell_size
    for x, y in list(zip(px[wall], py[wall]))[::25]:
        ix, iy = int(x // u_test3.cell_size), int(y // u_test3.cell_size)
        d = np.hypot(wx - ix, wy - iy).min() * u_test3.cell_size
        assert d <= 0.1 + 1e-9
        assert np.hypot(cx - x, cy - y).min() < 0.2


def test_write_heatmap(tmp_path, u_test3):
    heat = critic_heatmap(PolicyParams.init(0), u_test3, spacing=0.5)
    paths = write_heatmap(heat, tmp_path, "heatmap_u", {"terrain": "u_shaped"})
    assert sorted(p.suffix for p in paths) == [".csv", ".json", ".pgm"]
    meta = json.loads((tmp_path / "heatmap_u.json").read_text())
    assert meta["shape"] == list(heat.values.shape) and meta["terrain"] == "u_shaped"
