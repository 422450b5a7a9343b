import math

import numpy as np
import pytest

from diffac.diffusion import ScoreModel, make_linear_schedule, sample
from diffac.errors import ContractError
from diffac.io import (fmt, read_buffer_csv, read_csv, read_json, read_metrics_csv, write_csv,
                       write_json, write_metrics_csv, write_trajectories_csv)
from diffac.rl import SampleBuffer


def test_fmt_seventeen_digits_round_trip(rng):
    vals = np.concatenate([rng.standard_normal(200) * 10.0 ** rng.integers(-30, 30, 200),
                           [0.1, 1 / 3, -0.0, 5e-324, 1.7976931348623157e308]])
    for v in vals:
        assert float(fmt(v)) == v
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(3) == "3" and fmt(True) == "1" and fmt("x") == "x"


def test_write_csv_roundtrip(tmp_path):
    write_csv(tmp_path / "a.csv", ["a", "b"], [(1, 0.5), (2, 1 / 3)])
    header, rows = read_csv(tmp_path / "a.csv")
    assert header == ["a", "b"] and float(rows[1][1]) == 1 / 3
    assert (tmp_path / "a.csv").read_text().endswith("\n")


def test_read_empty_csv(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(ContractError):
        read_csv(tmp_path / "e.csv")


def test_buffer_roundtrip_bit_exact(tmp_path, rng):
    buf = SampleBuffer(3)
    buf.push_many(rng.standard_normal((20, 3)), rng.standard_normal(20), 4)
    buf.to_csv(tmp_path / "b.csv")
    back = SampleBuffer.from_csv(tmp_path / "b.csv")
    assert np.array_equal(back.x, buf.x) and np.array_equal(back.rewards, buf.rewards)
    assert np.array_equal(back.arrays()[2], buf.arrays()[2])
    write_csv(tmp_path / "bad.csv", ["x0", "y"], [(1, 2)])
    with pytest.raises(ContractError):
        read_buffer_csv(tmp_path / "bad.csv")


def test_metrics_roundtrip(tmp_path):
    rows = [{"iter": i, "estimator": "sde-ddpg", "mean_reward": -1.0 / (i + 3),
             "critic_loss": 0.1, "score_loss": 0.2, "kl_to_ref": 0.0, "grad_norm": 2.0,
             "wallclock_ms": 0.0} for i in range(4)]
    write_metrics_csv(rows, tmp_path / "m.csv")
    assert read_metrics_csv(tmp_path / "m.csv") == rows


def test_trajectories_csv_layout(tmp_path, rng):
    s = make_linear_schedule(4, 0.1, 0.3)
    m = ScoreModel.init(2, 4, (4,), rng)
    _, tr = sample(m, s, 3, rng, record=True)
    write_trajectories_csv(tr, tmp_path / "t.csv")
    header, rows = read_csv(tmp_path / "t.csv")
    assert header == ["traj_id", "tau", "x0", "x1"] and len(rows) == 3 * 5
    assert [int(r[1]) for r in rows[:5]] == [4, 3, 2, 1, 0]
    assert float(rows[4][2]) == tr.x0[0, 0]


def test_json_deterministic_and_strict(tmp_path):
    obj = {"b": np.float64(0.1), "a": [np.int64(2), np.array([1.5, 2.5])]}
    write_json(obj, tmp_path / "x.json")
    write_json(dict(reversed(list(obj.items()))), tmp_path / "y.json")
    assert (tmp_path / "x.json").read_bytes() == (tmp_path / "y.json").read_bytes()
    assert read_json(tmp_path / "x.json") == {"a": [2, [1.5, 2.5]], "b": 0.1}
    with pytest.raises(ContractError):
        write_json({"v": math.nan}, tmp_path / "z.json")
