"""Experiment subcommands: training, evaluation, sweeps, and analyses.

Every subcommand is a pure function of its merged configuration (defaults,
then config file, then CLI overrides): reruns produce byte-identical CSVs,
checkpoints, and SVGs. Wall-clock timings, which cannot be deterministic,
go to a separate *_timing.csv sidecar that is diagnostic only.
"""

from __future__ import annotations

import copy
import time
from pathlib import Path

import numpy as np

from . import reports
from .attacks import (AttackConfig, DefenseAwareConfig, SslContext, bim,
                      cw_attack, defense_aware_attack, fgsm, pgd)
from .data import generate_synthetic, load_checkpoint, save_checkpoint
from .defense import DefenseConfig, random_noise_baseline, reverse_attack
from .exceptions import DataError, UsageError
from .models import (ContrastiveConfig, TrainConfig, classifier_forward,
                     classifier_from_arrays, classifier_to_arrays,
                     head_from_arrays, head_to_arrays, predict,
                     ssl_loss_of_image, train_classifier, train_ssl_head)
from .pca import fit_pca
from .seeding import derive_rng
from .theory import DiscreteJoint, theorem1_check
from .views import AugmentConfig

DEFAULT_CONFIG = {
    "dataset": {"n_train": 2048, "n_test": 1000, "n_classes": 10, "seed": 7},
    "train": {"epochs": 20, "batch_size": 8, "lr": 0.001, "optimizer": "sgd",
              "momentum": 0.9, "seed": 7, "adversarial": False,
              "inner_steps": 3, "inner_random_start": True},
    "ssl_train": {"epochs": 200, "batch_size": 32, "lr": 0.001,
                  "optimizer": "adam", "seed": 7, "feature_layer": "penultimate"},
    "contrastive": {"tau": 0.2, "n_positive_views": 4, "n_negatives": 8},
    "augment": {"pad": 2, "jitter": 0.4, "grayscale_p": 0.2, "flip_p": 0.5},
    "pool": {"size": 256, "seed": 0},
    "attack": {"epsilon": 8.0 / 255.0, "norm": "linf", "steps": 20,
               "step_size": None, "random_start": True, "loss": "cross-entropy",
               "kappa": 0.0, "seed": 11, "method": "pgd"},
    "defense": {"epsilon_v": None, "steps": 40, "eta": None,
                "init_noise_scale": None, "step_rule": "sign", "seed": 13},
    "eval": {"n_examples": None, "ls_seed": 99, "ls_draws": 4},
    "lambda_sweep": {"values": [0.0, 0.5, 1.0, 2.0, 4.0, 10.0]},
    "curve": {"epsilons": [0.0, 2 / 255, 4 / 255, 8 / 255, 12 / 255, 16 / 255]},
    "tradeoff": {"epsilon_v_factors": [0.5, 1.0, 2.0, 4.0]},
    "iters": {"values": [0, 1, 5, 10, 20, 40]},
    "pca": {"n_examples": 200},
    "layer_ablation": {"layers": ["pool1", "pool2", "penultimate"]},
    "paths": {"classifier": None, "ssl_head": None, "joint_csv": None},
}


def merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# config -> objects


def _datasets(cfg):
    d = cfg["dataset"]
    train = generate_synthetic(d["n_train"], d["n_classes"], seed=d["seed"], split="train")
    test = generate_synthetic(d["n_test"], d["n_classes"], seed=d["seed"] + 1, split="test")
    return train, test


def _negative_pool(cfg, train):
    p = cfg["pool"]
    size = min(p["size"], len(train))
    idx = derive_rng(p["seed"], 909).choice(len(train), size=size, replace=False)
    return train.images[np.sort(idx)]


def _train_config(cfg):
    t = cfg["train"]
    inner = None
    if t["adversarial"]:
        a = cfg["attack"]
        inner = AttackConfig(epsilon=a["epsilon"], norm=a["norm"], steps=t["inner_steps"],
                             random_start=t["inner_random_start"], seed=0)
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                       optimizer=t["optimizer"], momentum=t["momentum"], seed=t["seed"],
                       adversarial=t["adversarial"], inner_attack=inner)


def _ssl_train_config(cfg):
    t = cfg["ssl_train"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                       optimizer=t["optimizer"], seed=t["seed"])


def _contrastive_config(cfg):
    c = cfg["contrastive"]
    return ContrastiveConfig(tau=c["tau"], n_positive_views=c["n_positive_views"],
                             n_negatives=c["n_negatives"])


def _augment_config(cfg):
    a = cfg["augment"]
    return AugmentConfig(pad=a["pad"], jitter=a["jitter"],
                         grayscale_p=a["grayscale_p"], flip_p=a["flip_p"])


def _attack_config(cfg, **overrides):
    a = dict(cfg["attack"])
    a.pop("method", None)
    a.update(overrides)
    return AttackConfig(**a)


def _defense_config(cfg, ssl_ctx, **overrides):
    d = dict(cfg["defense"])
    d.update(overrides)
    if d["epsilon_v"] is None:
        d["epsilon_v"] = 2.0 * cfg["attack"]["epsilon"]
    return DefenseConfig(epsilon_v=d["epsilon_v"], steps=d["steps"], eta=d["eta"],
                         init_noise_scale=d["init_noise_scale"],
                         step_rule=d["step_rule"], norm=cfg["attack"]["norm"],
                         ssl=ssl_ctx, seed=d["seed"])


def _load_classifier(cfg):
    path = cfg["paths"]["classifier"]
    if path is None:
        raise DataError("config paths.classifier is required for this command")
    return classifier_from_arrays(load_checkpoint(path))


def _load_head(cfg):
    path = cfg["paths"]["ssl_head"]
    if path is None:
        raise DataError("config paths.ssl_head is required for this command")
    return head_from_arrays(load_checkpoint(path))


def _ssl_context(cfg, model, head, train):
    return SslContext(backbone=model, head=head,
                      contrastive=_contrastive_config(cfg),
                      augment=_augment_config(cfg),
                      negatives=_negative_pool(cfg, train))


def _attack_fn(cfg):
    method = cfg["attack"].get("method", "pgd")
    if method == "pgd":
        return lambda m, x, y, ac: pgd(m, x, y, ac)
    if method == "bim":
        return lambda m, x, y, ac: bim(m, x, y, ac)
    if method == "cw":
        return lambda m, x, y, ac: cw_attack(m, x, y, ac)
    if method == "fgsm":
        return lambda m, x, y, ac: fgsm(m, x, y, ac.epsilon, seed=ac.seed)
    raise UsageError(f"unknown attack method {method!r}")


def _eval_slice(cfg, test):
    n = cfg["eval"]["n_examples"]
    if n is None or n >= len(test):
        return test.images, test.labels
    return test.images[:n], test.labels[:n]


def _mean_ls(model, head, ccfg, acfg, images, pool, base_seed, draws):
    """Per-example contrastive loss averaged over several view draws."""
    out = np.zeros(len(images))
    for i in range(len(images)):
        vals = [ssl_loss_of_image(model, head, ccfg, acfg, images[i], pool,
                                  (base_seed, r, i)) for r in range(draws)]
        out[i] = float(np.mean(vals))
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg, out: Path):
    """Generate the synthetic datasets and report the class histogram."""
    out = Path(out)
    train, test = _datasets(cfg)
    rows = []
    for split, d in (("train", train), ("test", test)):
        counts = np.bincount(d.labels, minlength=cfg["dataset"]["n_classes"])
        for label, count in enumerate(counts):
            rows.append((split, label, int(count)))
    path = out / "dataset_summary.csv"
    reports.write_csv(path, ("split", "label", "count"), rows)
    return {"summary": path}


def cmd_train(cfg, out: Path):
    """Train the classifier; write checkpoint and per-epoch log."""
    out = Path(out)
    train, test = _datasets(cfg)
    params, history = train_classifier(_train_config(cfg), train)
    ckpt = out / ("classifier_robust.ralb" if cfg["train"]["adversarial"]
                  else "classifier.ralb")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(classifier_to_arrays(params), ckpt)
    test_acc = float((predict(params, test.images) == test.labels).mean())
    rows = [(h["epoch"], h["loss"], h["accuracy"]) for h in history]
    rows.append(("final_test", float("nan"), test_acc))
    log = out / "train_log.csv"
    reports.write_csv(log, ("epoch", "loss", "accuracy"), rows)
    return {"checkpoint": ckpt, "log": log, "test_accuracy": test_acc}


def cmd_train_ssl(cfg, out: Path):
    """Train the contrastive head on clean data against the frozen backbone."""
    out = Path(out)
    train, _ = _datasets(cfg)
    model = _load_classifier(cfg)
    pool = _negative_pool(cfg, train)
    head, history = train_ssl_head(_ssl_train_config(cfg), _contrastive_config(cfg),
                                   _augment_config(cfg), model, train, pool,
                                   feature_layer=cfg["ssl_train"]["feature_layer"])
    ckpt = out / "ssl_head.ralb"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(head_to_arrays(head), ckpt)
    rows = [(h["epoch"], h["ssl_loss"]) for h in history]
    log = out / "ssl_train_log.csv"
    reports.write_csv(log, ("epoch", "ssl_loss"), rows)
    return {"checkpoint": ckpt, "log": log}


_EVAL_HEADER = ("example_id", "true_label", "clean_pred", "attacked_pred",
                "defended_pred", "L_s_clean", "L_s_attacked", "L_s_defended",
                "l_inf_delta", "l_inf_r")


def cmd_eval(cfg, out: Path, with_defense: bool = True):
    """Attack the test set, optionally defend, and report accuracies."""
    out = Path(out)
    train, test = _datasets(cfg)
    model = _load_classifier(cfg)
    x, y = _eval_slice(cfg, test)
    clean_pred = predict(model, x)
    attack = _attack_fn(cfg)
    acfg_attack = _attack_config(cfg)
    res = attack(model, x, y, acfg_attack)
    attacked_pred = predict(model, res.x_a)
    linf_delta = np.abs(res.delta).reshape(len(x), -1).max(axis=1)

    ccfg = _contrastive_config(cfg)
    aug = _augment_config(cfg)
    ls_seed = cfg["eval"]["ls_seed"]
    draws = cfg["eval"]["ls_draws"]
    if with_defense:
        head = _load_head(cfg)
        ssl_ctx = _ssl_context(cfg, model, head, train)
        dres = reverse_attack(model, head, res.x_a, _defense_config(cfg, ssl_ctx))
        defended_pred = dres.prediction
        linf_r = np.abs(dres.r).reshape(len(x), -1).max(axis=1)
        pool = ssl_ctx.negatives
        ls_clean = _mean_ls(model, head, ccfg, aug, x, pool, ls_seed, draws)
        ls_att = _mean_ls(model, head, ccfg, aug, res.x_a, pool, ls_seed, draws)
        ls_def = _mean_ls(model, head, ccfg, aug, dres.x_repaired, pool, ls_seed, draws)
    rows = []
    for i in range(len(x)):
        if with_defense:
            rows.append((i, int(y[i]), int(clean_pred[i]), int(attacked_pred[i]),
                         int(defended_pred[i]), float(ls_clean[i]), float(ls_att[i]),
                         float(ls_def[i]), float(linf_delta[i]), float(linf_r[i])))
        else:
            rows.append((i, int(y[i]), int(clean_pred[i]), int(attacked_pred[i]),
                         "", "", "", "", float(linf_delta[i]), ""))
    clean_correct = int((clean_pred == y).sum())
    std_correct = int((attacked_pred == y).sum())
    rows.append(("summary_clean_accuracy", clean_correct, len(x), "", "", "", "", "", "", ""))
    rows.append(("summary_robust_accuracy_standard", std_correct, len(x), "", "", "", "", "", "", ""))
    if with_defense:
        ours_correct = int((defended_pred == y).sum())
        rows.append(("summary_robust_accuracy_ours", ours_correct, len(x), "", "", "", "", "", "", ""))
        rows.append(("summary_gain", ours_correct - std_correct, len(x), "", "", "", "", "", "", ""))
    path = out / "eval.csv"
    reports.write_csv(path, _EVAL_HEADER, rows)
    summary = {"clean": clean_correct / len(x), "standard": std_correct / len(x)}
    if with_defense:
        summary["ours"] = ours_correct / len(x)
        summary["gain"] = (ours_correct - std_correct) / len(x)
    return {"report": path, "summary": summary}


def cmd_histogram(cfg, out: Path):
    """Contrastive-loss distributions for clean / attacked / reversed inputs."""
    out = Path(out)
    train, test = _datasets(cfg)
    model = _load_classifier(cfg)
    head = _load_head(cfg)
    ssl_ctx = _ssl_context(cfg, model, head, train)
    x, y = _eval_slice(cfg, test)
    res = _attack_fn(cfg)(model, x, y, _attack_config(cfg))
    dres = reverse_attack(model, head, res.x_a, _defense_config(cfg, ssl_ctx))
    ccfg, aug, pool = ssl_ctx.contrastive, ssl_ctx.augment, ssl_ctx.negatives
    seed, draws = cfg["eval"]["ls_seed"], cfg["eval"]["ls_draws"]
    ls_clean = _mean_ls(model, head, ccfg, aug, x, pool, seed, draws)
    ls_att = _mean_ls(model, head, ccfg, aug, res.x_a, pool, seed, draws)
    ls_def = _mean_ls(model, head, ccfg, aug, dres.x_repaired, pool, seed, draws)
    rows = [(i, float(ls_clean[i]), float(ls_att[i]), float(ls_def[i]))
            for i in range(len(x))]
    path = out / "histogram.csv"
    reports.write_csv(path, ("example_id", "L_s_clean", "L_s_attacked", "L_s_reversed"), rows)
    svg = out / "histogram.svg"
    reports.histogram_plot(svg, "contrastive loss distribution", "L_s",
                           {"clean": ls_clean, "attacked": ls_att, "reversed": ls_def})
    return {"report": path, "svg": svg,
            "means": {"clean": float(ls_clean.mean()), "attacked": float(ls_att.mean()),
                      "reversed": float(ls_def.mean())}}


def cmd_lambda_sweep(cfg, out: Path):
    """Defense-aware attack sweep over lambda_s."""
    out = Path(out)
    train, test = _datasets(cfg)
    model = _load_classifier(cfg)
    head = _load_head(cfg)
    ssl_ctx = _ssl_context(cfg, model, head, train)
    x, y = _eval_slice(cfg, test)
    base = _attack_config(cfg)
    rows = []
    for lam in cfg["lambda_sweep"]["values"]:
        res = defense_aware_attack(model, ssl_ctx, x, y,
                                   DefenseAwareConfig(base=base, lambda_s=float(lam)))
        std_acc = float((predict(model, res.x_a) == y).mean())
        dres = reverse_attack(model, head, res.x_a, _defense_config(cfg, ssl_ctx))
        ours_acc = float((dres.prediction == y).mean())
        rows.append((float(lam), std_acc, ours_acc))
    path = out / "lambda_sweep.csv"
    reports.write_csv(path, ("lambda_s", "robust_acc_standard", "robust_acc_ours"), rows)
    svg = out / "lambda_sweep.svg"
    reports.line_plot(svg, "defense-aware attack trade-off", "lambda_s", "robust accuracy",
                      [r[0] for r in rows],
                      {"standard": [r[1] for r in rows], "ours": [r[2] for r in rows]})
    return {"report": path, "svg": svg, "rows": rows}


def cmd_curve(cfg, out: Path):
    """Robust accuracy vs attack budget."""
    out = Path(out)
    train, test = _datasets(cfg)
    model = _load_classifier(cfg)
    head = _load_head(cfg)
    ssl_ctx = _ssl_context(cfg, model, head, train)
    x, y = _eval_slice(cfg, test)
    attack = _attack_fn(cfg)
    rows = []
    for eps in cfg["curve"]["epsilons"]:
        eps = float(eps)
        if eps == 0.0:
            std_acc = float((predict(model, x) == y).mean())
            x_a = x
        else:
            res = attack(model, x, y, _attack_config(cfg, epsilon=eps, step_size=None))
            std_acc = float((predict(model, res.x_a) == y).mean())
            x_a = res.x_a
        dcfg = _defense_config(cfg, ssl_ctx, epsilon_v=max(2.0 * eps, 1e-6))
        ours_acc = float((reverse_attack(model, head, x_a, dcfg).prediction == y).mean())
        rows.append((eps, std_acc, ours_acc))
    path = out / "curve.csv"
    reports.write_csv(path, ("epsilon", "robust_acc_standard", "robust_acc_ours"), rows)
    svg = out / "curve.svg"
    reports.line_plot(svg, "robust accuracy vs perturbation budget", "epsilon",
                      "robust accuracy", [r[0] for r in rows],
                      {"standard": [r[1] for r in rows], "ours": [r[2] for r in rows]})
    return {"report": path, "svg": svg, "rows": rows}


def cmd_tradeoff(cfg, out: Path):
    """Clean/robust accuracy of the defense vs the random-noise baseline."""
    out = Path(out)
    train, test = _datasets(cfg)
    model = _load_classifier(cfg)
    head = _load_head(cfg)
    ssl_ctx = _ssl_context(cfg, model, head, train)
    x, y = _eval_slice(cfg, test)
    res = _attack_fn(cfg)(model, x, y, _attack_config(cfg))
    eps = cfg["attack"]["epsilon"]
    rows = []
    for factor in cfg["tradeoff"]["epsilon_v_factors"]:
        eps_v = float(factor) * eps
        dcfg = _defense_config(cfg, ssl_ctx, epsilon_v=eps_v)
        ours_clean = float((reverse_attack(model, head, x, dcfg).prediction == y).mean())
        ours_rob = float((reverse_attack(model, head, res.x_a, dcfg).prediction == y).mean())
        noise_seed = cfg["defense"]["seed"]
        noise_clean = float((random_noise_baseline(model, x, eps_v, seed=noise_seed,
                                                   norm=cfg["attack"]["norm"]) == y).mean())
        noise_rob = float((random_noise_baseline(model, res.x_a, eps_v, seed=noise_seed,
                                                 norm=cfg["attack"]["norm"]) == y).mean())
        rows.append((eps_v, ours_clean, ours_rob, noise_clean, noise_rob))
    path = out / "tradeoff.csv"
    reports.write_csv(path, ("epsilon_v", "clean_acc_ours", "robust_acc_ours",
                             "clean_acc_noise", "robust_acc_noise"), rows)
    svg = out / "tradeoff.svg"
    reports.line_plot(svg, "clean vs robust trade-off", "epsilon_v", "accuracy",
                      [r[0] for r in rows],
                      {"ours clean": [r[1] for r in rows], "ours robust": [r[2] for r in rows],
                       "noise clean": [r[3] for r in rows], "noise robust": [r[4] for r in rows]})
    return {"report": path, "svg": svg, "rows": rows}


def cmd_iters(cfg, out: Path):
    """Robust accuracy vs number of defense iterations."""
    out = Path(out)
    train, test = _datasets(cfg)
    model = _load_classifier(cfg)
    head = _load_head(cfg)
    ssl_ctx = _ssl_context(cfg, model, head, train)
    x, y = _eval_slice(cfg, test)
    res = _attack_fn(cfg)(model, x, y, _attack_config(cfg))
    rows, timing = [], []
    for k in cfg["iters"]["values"]:
        k = int(k)
        t0 = time.perf_counter()
        if k == 0:
            acc = float((predict(model, res.x_a) == y).mean())
        else:
            dcfg = _defense_config(cfg, ssl_ctx, steps=k)
            acc = float((reverse_attack(model, head, res.x_a, dcfg).prediction == y).mean())
        timing.append((k, time.perf_counter() - t0))
        rows.append((k, acc))
    path = out / "iters.csv"
    reports.write_csv(path, ("iterations", "robust_acc_ours"), rows)
    # wall-clock is inherently non-deterministic: sidecar, not a report
    reports.write_csv(out / "iters_timing.csv", ("iterations", "wall_clock_s"), timing)
    svg = out / "iters.svg"
    reports.line_plot(svg, "robust accuracy vs defense iterations", "iterations",
                      "robust accuracy", [r[0] for r in rows],
                      {"ours": [r[1] for r in rows]})
    return {"report": path, "svg": svg, "rows": rows}


def cmd_pca(cfg, out: Path):
    """Project clean/attacked/defended features onto the top-2 PCA plane."""
    out = Path(out)
    train, test = _datasets(cfg)
    model = _load_classifier(cfg)
    head = _load_head(cfg)
    ssl_ctx = _ssl_context(cfg, model, head, train)
    n = min(cfg["pca"]["n_examples"], len(test))
    if n < 3:
        raise UsageError("PCA needs at least 3 examples")
    x, y = test.images[:n], test.labels[:n]
    res = _attack_fn(cfg)(model, x, y, _attack_config(cfg))
    dres = reverse_attack(model, head, res.x_a, _defense_config(cfg, ssl_ctx))

    import ralab.engine as E
    with E.no_grad():
        _, f_clean = classifier_forward(model, x)
        _, f_att = classifier_forward(model, res.x_a)
        _, f_def = classifier_forward(model, dres.x_repaired)
    proj = fit_pca(f_clean.values)
    p_clean = proj.project(f_clean.values)
    p_att = proj.project(f_att.values)
    p_def = proj.project(f_def.values)
    d_att = np.sqrt(((f_att.values - f_clean.values) ** 2).sum(axis=1))
    d_def = np.sqrt(((f_def.values - f_clean.values) ** 2).sum(axis=1))

    rows = []
    for i in range(n):
        for stage, p in (("clean", p_clean), ("attacked", p_att), ("defended", p_def)):
            rows.append((i, stage, float(p[i, 0]), float(p[i, 1])))
    rows.append(("summary_mean_distance_attacked", "", float(d_att.mean()), ""))
    rows.append(("summary_mean_distance_defended", "", float(d_def.mean()), ""))
    path = out / "pca.csv"
    reports.write_csv(path, ("example_id", "stage", "pc1", "pc2"), rows)
    svg = out / "pca.svg"
    reports.scatter_plot(svg, "feature trajectories (PCA)", "pc1", "pc2",
                         {"clean": (p_clean[:, 0], p_clean[:, 1]),
                          "attacked": (p_att[:, 0], p_att[:, 1]),
                          "defended": (p_def[:, 0], p_def[:, 1])})
    return {"report": path, "svg": svg,
            "mean_distance_attacked": float(d_att.mean()),
            "mean_distance_defended": float(d_def.mean()),
            "projection": proj}


def cmd_theory(cfg, out: Path):
    """Evaluate the accuracy-bound comparison on a joint loaded from CSV."""
    out = Path(out)
    path = cfg["paths"]["joint_csv"]
    if path is None:
        raise DataError("config paths.joint_csv is required for the theory command")
    joint = joint_from_csv(path)
    rep = theorem1_check(joint)
    rows = [("mi_y_xa", rep.mi_y_xa), ("mi_y_ys_xa", rep.mi_y_ys_xa),
            ("conditional_mi", rep.cmi), ("c1", rep.c1), ("c2", rep.c2),
            ("verdict_c2_gt_c1", int(rep.verdict)), ("uniform_y", int(rep.uniform_y))]
    report = out / "theory.csv"
    reports.write_csv(report, ("quantity", "value"), rows)
    return {"report": report, "result": rep}


def cmd_layer_ablation(cfg, out: Path):
    """Train one head per tapped layer and compare defense gains."""
    out = Path(out)
    train, test = _datasets(cfg)
    model = _load_classifier(cfg)
    pool = _negative_pool(cfg, train)
    x, y = _eval_slice(cfg, test)
    res = _attack_fn(cfg)(model, x, y, _attack_config(cfg))
    std_acc = float((predict(model, res.x_a) == y).mean())
    rows = []
    for layer in cfg["layer_ablation"]["layers"]:
        head, _ = train_ssl_head(_ssl_train_config(cfg), _contrastive_config(cfg),
                                 _augment_config(cfg), model, train, pool,
                                 feature_layer=layer)
        ssl_ctx = SslContext(backbone=model, head=head,
                             contrastive=_contrastive_config(cfg),
                             augment=_augment_config(cfg), negatives=pool)
        dres = reverse_attack(model, head, res.x_a, _defense_config(cfg, ssl_ctx))
        ours_acc = float((dres.prediction == y).mean())
        rows.append((layer, std_acc, ours_acc, ours_acc - std_acc))
    path = out / "layer_ablation.csv"
    reports.write_csv(path, ("layer", "robust_acc_standard", "robust_acc_ours", "gain"), rows)
    return {"report": path, "rows": rows}


def joint_from_csv(path) -> DiscreteJoint:
    """Load a joint table from CSV columns (y, y_s, x_a, p)."""
    header, rows = reports.read_csv(path)
    if [h.strip() for h in header] != ["y", "y_s", "x_a", "p"]:
        raise DataError(f"joint CSV must have header y,y_s,x_a,p, got {header}")
    try:
        entries = [(int(r[0]), int(r[1]), int(r[2]), float(r[3])) for r in rows]
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed joint CSV row: {exc}") from exc
    ny = max(e[0] for e in entries) + 1
    ns = max(e[1] for e in entries) + 1
    nx = max(e[2] for e in entries) + 1
    table = np.zeros((ny, ns, nx))
    for yy, ss, xx, p in entries:
        table[yy, ss, xx] += p
    return DiscreteJoint(table)
