import json

import numpy as np
import pytest

from p4o.compare import run_compare, welch_one_tailed
from p4o.config import load_config
from p4o.diagnostics import histogram, r_squared

from oracles import welch_t_one_tailed


# ------------------------------------------------------------- r squared


def test_r_squared_perfect_prediction_is_one():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 8))
    assert abs(r_squared(x.copy(), x) - 1.0) < 1e-12


def test_r_squared_mean_prediction_is_zero():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 8))
    pred = np.broadcast_to(x.mean(axis=0), x.shape)
    assert abs(r_squared(pred, x)) < 1e-12


def test_r_squared_zero_variance_undefined():
    x = np.ones((10, 4))
    with pytest.warns(UserWarning, match="zero-variance"):
        assert r_squared(x.copy(), x) is None


def test_histogram_counts_sum_to_sample_count():
    rng = np.random.default_rng(2)
    values = rng.normal(size=(37, 5)) * 3.0  # lots of out-of-range values
    counts, edges = histogram(values)
    assert counts.sum() == values.size
    assert len(edges) == len(counts) + 1
    assert edges[0] == -1.0 and edges[-1] == 1.0


# ------------------------------------------------------------- welch t


def test_welch_matches_quadrature_oracle():
    rng = np.random.default_rng(3)
    a = (rng.normal(size=8) + 0.8).tolist()
    b = rng.normal(size=6).tolist()
    got = welch_one_tailed(a, b)
    t_ref, dof_ref, p_ref = welch_t_one_tailed(a, b)
    assert abs(got["t"] - t_ref) < 1e-12
    assert abs(got["dof"] - dof_ref) < 1e-12
    assert abs(got["p_value"] - p_ref) < 1e-6


def test_welch_synthetic_known_gap_direction():
    rng = np.random.default_rng(4)
    a = (rng.normal(size=10) * 0.1 + 1.0).tolist()
    b = (rng.normal(size=10) * 0.1).tolist()
    got = welch_one_tailed(a, b)
    assert got["t"] > 5 and got["p_value"] < 1e-4
    flipped = welch_one_tailed(b, a)
    assert flipped["p_value"] > 0.999


def test_welch_identical_samples_degenerate():
    got = welch_one_tailed([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
    assert got["t"] == 0.0 and got["p_value"] == 0.5


# ------------------------------------------------------------- compare


def cmp_overrides(out, **kw):
    base = dict(env="tmaze", num_envs=2, batch_steps=10, minibatches=2, epochs=2,
                batches=2, precision=64, deterministic=True, out=str(out))
    base.update(kw)
    return base


def test_compare_identical_configs_zero_mean_difference(tmp_path):
    cfg = load_config(None, cmp_overrides(tmp_path / "side"))
    report = run_compare(cfg, cfg, [0, 1], tmp_path / "cmp", log=None)
    assert report["mean_difference"] == 0.0
    assert report["finals_a"] == report["finals_b"]
    for artifact in ("compare.json", "compare.csv", "compare.png"):
        assert (tmp_path / "cmp" / artifact).exists()


def test_compare_requires_two_seeds(tmp_path):
    from p4o.errors import ConfigError

    cfg = load_config(None, cmp_overrides(tmp_path / "x"))
    with pytest.raises(ConfigError, match="seeds"):
        run_compare(cfg, cfg, [0], tmp_path / "cmp2")


def test_compare_report_produced_for_p4o_vs_baseline(tmp_path):
    cfg_a = load_config(None, cmp_overrides(tmp_path / "a", variant="p4o"))
    cfg_b = load_config(None, cmp_overrides(tmp_path / "b", variant="lstm-ppo-1024"))
    report = run_compare(cfg_a, cfg_b, [0, 1], tmp_path / "cmp3", log=None)
    assert report["label_a"] == "p4o" and report["label_b"] == "lstm-ppo-1024"
    saved = json.loads((tmp_path / "cmp3" / "compare.json").read_text())
    assert saved["seeds"] == [0, 1]
    assert len(saved["finals_a"]) == 2
    csv_text = (tmp_path / "cmp3" / "compare.csv").read_text().splitlines()
    assert csv_text[0] == "side,seed,frames,rolling_mean,stderr"
    assert len(csv_text) == 1 + 2 * 2 * 2  # header + sides * seeds * batches
