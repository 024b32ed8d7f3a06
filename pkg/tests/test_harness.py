import json

import numpy as np
import pytest

from noisy_ot.errors import ValidationError
from noisy_ot.harness import (build_channel, flagship_config, formulation_labels, newsvendor_loss, run_experiment,
                              triangular, validate_config)
from noisy_ot.io import sha256_file

G4 = [0.0, 1.0, 2.0, 3.0]


def small_config(**kw):
    cfg = {
        "name": "small",
        "channel": {"source": G4, "obs": G4, "sigma": 0.7},
        "p_true": triangular(G4, 1.5).tolist(),
        "loss": newsvendor_loss(G4).tolist(),
        "r": 0.05,
        "delta": [0.05, 0.1],
        "n_grid": [10, 20],
        "reps": 300,
        "seed": 3,
    }
    cfg.update(kw)
    return cfg


def test_newsvendor_and_triangular():
    L = newsvendor_loss([0, 1, 2])
    np.testing.assert_array_equal(L, [[0, 2, 4], [1, 0, 2], [2, 1, 0]])
    w = triangular(range(9), 4.0)
    assert w.sum() == pytest.approx(1.0) and np.argmax(w) == 4 and np.all(w > 0)
    np.testing.assert_allclose(w, w[::-1])


def test_build_channel_variants():
    assert build_channel({"noiseless": 3}).n_obs == 3
    ch = build_channel({"cost": [[0, "inf"], ["inf", 0]]})
    np.testing.assert_array_equal(ch.kernel, np.eye(2))
    assert build_channel({"source": [0, 1], "obs": [0, 1, 2], "sigma": 1.0}).kernel.shape == (2, 3)


@pytest.mark.parametrize("bad", [
    {"reps": 0},
    {"r": 0.0},
    {"n_grid": [20, 10]},
    {"delta": -0.1},
    {"p_true": [0.5, 0.5]},
    {"formulations": ["Oracle"]},
    {"loss": [[0.0, 1.0]]},
    {"stages": ["htrates"]},
    {"extra_field": 1},
])
def test_validation_errors(bad):
    with pytest.raises(ValidationError) as exc:
        validate_config(small_config(**bad))
    assert exc.value.errors


def test_labels_expand_delta_sweep():
    cfg = validate_config(small_config(formulations=["SAA_plugin", "OTDRO"]))
    assert [lab for lab, _, _ in formulation_labels(cfg)] == ["SAA_plugin", "OTDRO(delta=0.05)", "OTDRO(delta=0.1)"]


def test_run_experiment_outputs_and_rerun(tmp_path):
    m1 = run_experiment(small_config(), tmp_path / "a")
    m2 = run_experiment(small_config(), tmp_path / "b", threads=2)
    assert m1["completed"] and m1["files"] == m2["files"]
    assert set(m1["files"]) == {"config.json", "disappoint.csv", "slopes.csv", "disappoint.json"}
    for name, digest in m1["files"].items():
        assert sha256_file(tmp_path / "a" / name) == digest
    rows = (tmp_path / "a" / "disappoint.csv").read_text().splitlines()
    assert rows[0] == "formulation,N,disappointments,reps,log_freq,budget_mean"
    # 3 single formulations plus OTDRO at two radii, each at two sample sizes
    assert len(rows) == 1 + 5 * 2
    slopes = (tmp_path / "a" / "slopes.csv").read_text().splitlines()
    assert slopes[0] == "formulation,slope,slope_stderr,slope_kind,target_rate,method"
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["stages"]["disappoint"]["status"] == "done" and man["version"]


def test_htrates_stage(tmp_path):
    cfg = small_config(channel={"noiseless": 2}, p_true=[0.5, 0.5], p_alt=[0.9, 0.1], loss=[[0, 1], [1, 0]],
                       stages=["htrates"], delta=0.02, n_grid=[50, 100, 200])
    run_experiment(cfg, tmp_path)
    rows = (tmp_path / "htrates.csv").read_text().splitlines()
    assert rows[0].split(",")[:3] == ["kind", "delta", "N"]
    assert len(rows) == 1 + 2 * 3


def test_stage_failure_recorded(tmp_path):
    cfg = small_config(formulations=["SAA_plugin", "KernelDeconvolution"])
    with pytest.raises(NotImplementedError):
        run_experiment(cfg, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["completed"] is False and man["stages"]["disappoint"]["status"] == "failed"


def test_flagship_config_shape():
    cfg = flagship_config(seed=1)
    assert cfg.reps == 20_000 and cfg.n_grid == [25, 50, 100, 200] and cfg.deltas == [0.02, 0.05, 0.1]
    assert len(cfg.p_true) == 9 and np.argmax(cfg.p_true) == 4
    assert len(formulation_labels(cfg)) == 6
