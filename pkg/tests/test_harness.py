"""Harness and CLI tests on a tiny stack: every subcommand runs, reports have
the documented shape, reruns are byte-identical, exit codes map correctly."""

import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from ralab import harness
from ralab.cli import main as cli_main
from ralab.reports import read_csv

TINY = {
    "dataset": {"n_train": 80, "n_test": 30, "n_classes": 10, "seed": 7},
    "train": {"epochs": 2, "batch_size": 8, "lr": 0.001, "optimizer": "sgd",
              "momentum": 0.9, "seed": 7, "adversarial": False,
              "inner_steps": 2, "inner_random_start": True},
    "ssl_train": {"epochs": 2, "batch_size": 16, "lr": 0.001,
                  "optimizer": "adam", "seed": 7, "feature_layer": "penultimate"},
    "contrastive": {"tau": 0.2, "n_positive_views": 3, "n_negatives": 4},
    "pool": {"size": 24, "seed": 0},
    "attack": {"epsilon": 8.0 / 255.0, "norm": "linf", "steps": 2,
               "step_size": None, "random_start": True, "loss": "cross-entropy",
               "kappa": 0.0, "seed": 11, "method": "pgd"},
    "defense": {"epsilon_v": None, "steps": 2, "eta": None,
                "init_noise_scale": None, "step_rule": "sign", "seed": 13},
    "eval": {"n_examples": 12, "ls_seed": 99, "ls_draws": 1},
    "lambda_sweep": {"values": [0.0, 1.0]},
    "curve": {"epsilons": [0.0, 0.05]},
    "tradeoff": {"epsilon_v_factors": [1.0, 2.0]},
    "iters": {"values": [0, 1]},
    "pca": {"n_examples": 12},
    "layer_ablation": {"layers": ["penultimate"]},
}


@pytest.fixture(scope="module")
def stack(tmp_path_factory):
    """Tiny trained classifier + head + merged config pointing at them."""
    root = tmp_path_factory.mktemp("stack")
    cfg = harness.merge_config(harness.DEFAULT_CONFIG, TINY)
    train_out = harness.cmd_train(cfg, root)
    cfg = harness.merge_config(cfg, {"paths": {"classifier": str(train_out["checkpoint"])}})
    ssl_out = harness.cmd_train_ssl(cfg, root)
    cfg = harness.merge_config(cfg, {"paths": {"ssl_head": str(ssl_out["checkpoint"])}})
    return root, cfg


def test_gen_data(tmp_path):
    cfg = harness.merge_config(harness.DEFAULT_CONFIG, TINY)
    out = harness.cmd_gen_data(cfg, tmp_path)
    header, rows = read_csv(out["summary"])
    assert header == ["split", "label", "count"]
    train_counts = [int(r[2]) for r in rows if r[0] == "train"]
    assert sum(train_counts) == 80


def test_train_checkpoint_deterministic(tmp_path, stack):
    _, cfg = stack
    a = harness.cmd_train(cfg, tmp_path / "a")
    b = harness.cmd_train(cfg, tmp_path / "b")
    assert a["checkpoint"].read_bytes() == b["checkpoint"].read_bytes()
    assert a["log"].read_bytes() == b["log"].read_bytes()


def test_train_log_matches_reevaluation(stack):
    root, cfg = stack
    from ralab.data import load_checkpoint
    from ralab.models import classifier_from_arrays, predict
    from ralab.data import generate_synthetic
    header, rows = read_csv(root / "train_log.csv")
    final = [r for r in rows if r[0] == "final_test"][0]
    model = classifier_from_arrays(load_checkpoint(root / "classifier.ralb"))
    test = generate_synthetic(30, 10, seed=8, split="test")
    acc = float((predict(model, test.images) == test.labels).mean())
    assert float(final[2]) == acc


def test_eval_report_shape_and_gain_column(stack, tmp_path):
    _, cfg = stack
    out = harness.cmd_eval(cfg, tmp_path)
    header, rows = read_csv(out["report"])
    assert header == list(harness._EVAL_HEADER)
    per_example = [r for r in rows if not r[0].startswith("summary")]
    assert len(per_example) == 12
    summary = {r[0]: (int(r[1]), int(r[2])) for r in rows if r[0].startswith("summary")}
    gain = summary["summary_robust_accuracy_ours"][0] - summary["summary_robust_accuracy_standard"][0]
    assert summary["summary_gain"][0] == gain


def test_eval_no_defense_standard_only(stack, tmp_path):
    _, cfg = stack
    out = harness.cmd_eval(cfg, tmp_path, with_defense=False)
    _, rows = read_csv(out["report"])
    names = {r[0] for r in rows if r[0].startswith("summary")}
    assert "summary_robust_accuracy_standard" in names
    assert "summary_robust_accuracy_ours" not in names
    per_example = [r for r in rows if not r[0].startswith("summary")]
    assert all(r[4] == "" for r in per_example)  # defended_pred blank


def test_eval_rerun_byte_identical(stack, tmp_path):
    _, cfg = stack
    a = harness.cmd_eval(cfg, tmp_path / "a")
    b = harness.cmd_eval(cfg, tmp_path / "b")
    assert a["report"].read_bytes() == b["report"].read_bytes()


def test_histogram_outputs(stack, tmp_path):
    _, cfg = stack
    out = harness.cmd_histogram(cfg, tmp_path)
    header, rows = read_csv(out["report"])
    assert header == ["example_id", "L_s_clean", "L_s_attacked", "L_s_reversed"]
    assert len(rows) == 12
    assert out["svg"].exists()
    # zero-budget attack: clean and attacked distributions identical
    cfg0 = harness.merge_config(cfg, {"attack": {"epsilon": 1e-12, "steps": 1},
                                      "defense": {"epsilon_v": 0.01}})
    out0 = harness.cmd_histogram(cfg0, tmp_path / "zero")
    _, rows0 = read_csv(out0["report"])
    for r in rows0:
        assert float(r[1]) == pytest.approx(float(r[2]), abs=1e-9)


def test_lambda_sweep_shape_and_reduction(stack, tmp_path):
    _, cfg = stack
    out = harness.cmd_lambda_sweep(cfg, tmp_path)
    header, rows = read_csv(out["report"])
    assert header == ["lambda_s", "robust_acc_standard", "robust_acc_ours"]
    assert [float(r[0]) for r in rows] == [0.0, 1.0]
    # the lambda=0 row must equal a plain eval's standard robust accuracy
    ev = harness.cmd_eval(cfg, tmp_path / "ev")
    assert float(rows[0][1]) == pytest.approx(ev["summary"]["standard"], abs=1e-12)


def test_curve_zero_epsilon_equals_clean(stack, tmp_path):
    _, cfg = stack
    out = harness.cmd_curve(cfg, tmp_path)
    header, rows = read_csv(out["report"])
    assert header == ["epsilon", "robust_acc_standard", "robust_acc_ours"]
    ev = harness.cmd_eval(cfg, tmp_path / "ev")
    assert float(rows[0][1]) == pytest.approx(ev["summary"]["clean"], abs=1e-12)


def test_tradeoff_outputs(stack, tmp_path):
    _, cfg = stack
    out = harness.cmd_tradeoff(cfg, tmp_path)
    header, rows = read_csv(out["report"])
    assert header == ["epsilon_v", "clean_acc_ours", "robust_acc_ours",
                      "clean_acc_noise", "robust_acc_noise"]
    assert len(rows) == 2


def test_iters_k_zero_is_undefended(stack, tmp_path):
    _, cfg = stack
    out = harness.cmd_iters(cfg, tmp_path)
    header, rows = read_csv(out["report"])
    assert header == ["iterations", "robust_acc_ours"]
    ev = harness.cmd_eval(cfg, tmp_path / "ev")
    assert float(rows[0][1]) == pytest.approx(ev["summary"]["standard"], abs=1e-12)
    # timing sidecar exists but is not part of the deterministic report set
    assert (tmp_path / "iters_timing.csv").exists()


def test_pca_outputs_and_orthonormality(stack, tmp_path):
    _, cfg = stack
    out = harness.cmd_pca(cfg, tmp_path)
    proj = out["projection"]
    ortho = proj.components.T @ proj.components
    assert np.abs(ortho - np.eye(2)).max() < 1e-9
    assert np.all(np.diff(proj.eigenvalues) <= 1e-9)
    header, rows = read_csv(out["report"])
    stages = {r[1] for r in rows if not r[0].startswith("summary")}
    assert stages == {"clean", "attacked", "defended"}


def test_pca_zero_attack_zero_trajectories(stack, tmp_path):
    _, cfg = stack
    cfg0 = harness.merge_config(cfg, {"attack": {"epsilon": 1e-12, "steps": 1},
                                      "defense": {"epsilon_v": 1e-12, "steps": 0,
                                                  "init_noise_scale": 0.0}})
    out = harness.cmd_pca(cfg0, tmp_path)
    assert out["mean_distance_attacked"] == pytest.approx(0.0, abs=1e-9)
    assert out["mean_distance_defended"] == pytest.approx(0.0, abs=1e-9)


def test_layer_ablation_one_row_per_layer(stack, tmp_path):
    _, cfg = stack
    cfg2 = harness.merge_config(cfg, {"layer_ablation": {"layers": ["pool2", "penultimate"]}})
    out = harness.cmd_layer_ablation(cfg2, tmp_path)
    header, rows = read_csv(out["report"])
    assert header == ["layer", "robust_acc_standard", "robust_acc_ours", "gain"]
    assert [r[0] for r in rows] == ["pool2", "penultimate"]
    for r in rows:
        assert float(r[3]) == pytest.approx(float(r[2]) - float(r[1]), abs=1e-12)


def test_theory_command(tmp_path):
    joint = tmp_path / "joint.csv"
    lines = ["y,y_s,x_a,p"]
    for y in range(2):
        for ys in range(2):
            for xa in range(2):
                p = 0.5 * (0.6 if xa == y else 0.4) * (0.9 if ys == y else 0.1)
                lines.append(f"{y},{ys},{xa},{p}")
    joint.write_text("\n".join(lines))
    cfg = harness.merge_config(harness.DEFAULT_CONFIG, {"paths": {"joint_csv": str(joint)}})
    out = harness.cmd_theory(cfg, tmp_path)
    rows = dict(read_csv(out["report"])[1])
    assert float(rows["c2"]) > float(rows["c1"])
    assert rows["verdict_c2_gt_c1"] == "1"


def test_theory_degenerate_equal_bounds(tmp_path):
    joint = tmp_path / "joint.csv"
    lines = ["y,y_s,x_a,p"]
    # Ys a deterministic function of Xa: conditional MI is zero
    for y in range(2):
        for xa in range(2):
            p = 0.5 * (0.7 if xa == y else 0.3)
            lines.append(f"{y},{xa},{xa},{p}")
    joint.write_text("\n".join(lines))
    cfg = harness.merge_config(harness.DEFAULT_CONFIG, {"paths": {"joint_csv": str(joint)}})
    out = harness.cmd_theory(cfg, tmp_path)
    rows = dict(read_csv(out["report"])[1])
    assert float(rows["c1"]) == pytest.approx(float(rows["c2"]), abs=1e-9)


# ---------------------------------------------------------------------------
# CLI


def test_cli_gen_data_and_exit_codes(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(TINY))
    rc = cli_main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
    assert rc == 0
    assert (tmp_path / "o" / "dataset_summary.csv").exists()


def test_cli_missing_config_is_data_error(tmp_path):
    rc = cli_main(["gen-data", "--config", str(tmp_path / "absent.json"),
                   "--out", str(tmp_path)])
    assert rc == 3


def test_cli_malformed_joint_csv_exits_3(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,y_s,x_a,p\n0,0,0,notanumber\n")
    rc = cli_main(["theory", "--joint-csv", str(bad), "--out", str(tmp_path)])
    assert rc == 3


def test_cli_usage_error_exits_2(tmp_path, stack):
    root, _ = stack
    rc = cli_main(["eval", "--classifier", str(root / "classifier.ralb"),
                   "--ssl-head", str(root / "ssl_head.ralb"),
                   "--norm", "l7", "--out", str(tmp_path),
                   "--n-train", "80", "--n-test", "30", "--n-examples", "4",
                   "--steps", "1", "--defense-steps", "1"])
    assert rc == 2


def test_cli_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli_main(["frobnicate"])
    assert exc.value.code == 2


def test_cli_train_runs(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(TINY))
    rc = cli_main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
    assert rc == 0
    assert (tmp_path / "o" / "classifier.ralb").exists()
