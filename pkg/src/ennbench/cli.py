"""Command-line pipeline: shift suites, training, evaluation, temperature.

Subcommands:
    make-shifts     generate clean data, corruption grid, OOD split, and
                    (once a reference checkpoint exists) adversarial split
    train-base      one base convnet per width rung
    train-epinet    one epinet per trained base
    train-ensemble  the member pool (parallel with --jobs)
    evaluate        all metrics for every model over the suite
    tune-temp       per-model temperature on the clean validation split
    temp-report     with/without temperature ratios over the suite

A run is fully specified by one JSON config; the resolved config is
echoed into the output directory. Exit code 0 on success; failures print
one line ``<error-class>: <detail>`` to stderr.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .data import (CORRUPTION_TYPES, SEVERITIES, ShiftSuite, corrupt, generate_dataset,
                   load_suite, make_adversarial_split, make_ood_split, manifest_digest,
                   write_suite)
from .enn import restrict_classes
from .ensemble import EnsembleModel, subensemble
from .errors import (ConfigError, DigestError, EnnBenchError, FormatError,
                     MissingArtifactError)
from .metrics import (DyadicConfig, PredictiveEvaluation, Temperature, anomaly_scores, aupr,
                      mce, temperature_ratio_report, tune_temperature)
from .reporting import MetricsReport, write_report
from .training import TrainConfig, train_base, train_epinet

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/default",
    "data": {
        "classes": 10,
        "in_dist_classes": [0, 1, 2, 3, 4, 5, 6],
        "n_train": 2000,
        "n_val": 512,
        "n_test": 512,
        "noise_sigma": 0.05,
        "cycles": 3.0,
        # contrast spread and within-class orientation jitter leave an
        # irreducible pool of hard examples (otherwise every model is
        # perfect on clean data and the adversarial split is empty)
        "amplitude_range": [0.08, 0.45],
        "orientation_jitter": 0.9,
    },
    "shift": {
        "types": list(CORRUPTION_TYPES),
        "adversarial": "auto",  # auto | require | off
    },
    "models": {
        "widths": [1, 2, 3, 4],
        "base_channels": 4,
        "kernel": 3,
        "stride": 2,
        "ensemble_pool": 30,
        "ensemble_sizes": [1, 3, 10, 30],
        "epinet": {
            "index_dim": 8,
            "hidden": [50, 50],
            "prior_mlp_scale": 1.0,
            "prior_conv_scale": 0.5,
            "prior_conv_channels": 4,
        },
    },
    "train": {
        "learning_rate": 0.05,
        "momentum": 0.9,
        "batch_size": 128,
        "epochs_base": 20,
        "epochs_epinet": 10,
        "ridge": 1e-4,
        "n_train_z": 1,
    },
    "eval": {
        "n_index": 1000,
        "dyadic_tau": 10,
        "dyadic_batches": 1000,
        "ece_bins": 10,
        "failure_threshold": 0.95,
        "seed": 0,
    },
}


# -- config handling ---------------------------------------------------------


def _merge(defaults, overrides, path=""):
    out = copy.deepcopy(defaults)
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def validate_config(cfg: dict) -> dict:
    data, models, train, ev = cfg["data"], cfg["models"], cfg["train"], cfg["eval"]
    _require(1 <= data["classes"] <= 10, "data.classes must be in 1..10")
    in_dist = data["in_dist_classes"]
    _require(len(in_dist) >= 1, "data.in_dist_classes must be non-empty")
    _require(len(set(in_dist)) == len(in_dist), "data.in_dist_classes must be unique")
    _require(all(0 <= c < data["classes"] for c in in_dist),
             "data.in_dist_classes out of range for data.classes")
    _require(len(in_dist) < data["classes"],
             "data.in_dist_classes must leave at least one class out-of-distribution")
    for key in ("n_train", "n_val", "n_test"):
        _require(data[key] >= 2, f"data.{key} must be >= 2")
    lo, hi = data["amplitude_range"]
    _require(0 < lo <= hi <= 0.5, "data.amplitude_range must satisfy 0 < lo <= hi <= 0.5")
    _require(0 <= data["orientation_jitter"] <= 1,
             "data.orientation_jitter must be in [0, 1]")
    _require(all(t in CORRUPTION_TYPES for t in cfg["shift"]["types"]),
             f"shift.types must be drawn from {CORRUPTION_TYPES}")
    _require(cfg["shift"]["adversarial"] in ("auto", "require", "off"),
             "shift.adversarial must be auto, require, or off")
    _require(all(w >= 1 for w in models["widths"]), "models.widths must be positive")
    _require(models["ensemble_pool"] >= 1, "models.ensemble_pool must be >= 1")
    _require(all(1 <= k <= models["ensemble_pool"] for k in models["ensemble_sizes"]),
             "models.ensemble_sizes must fit inside models.ensemble_pool")
    _require(train["learning_rate"] > 0, "train.learning_rate must be > 0")
    _require(train["epochs_base"] >= 0 and train["epochs_epinet"] >= 0,
             "train epochs must be >= 0")
    _require(ev["n_index"] >= 1, "eval.n_index must be >= 1")
    _require(ev["dyadic_tau"] >= 2, "eval.dyadic_tau must be >= 2")
    return cfg


def load_config(path, *, out_override=None, seed_override=None) -> dict:
    if path is None:
        cfg = copy.deepcopy(DEFAULT_CONFIG)
    else:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"config file {path} not found")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        cfg = _merge(DEFAULT_CONFIG, user)
    if out_override:
        cfg["out_dir"] = str(out_override)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
        cfg["eval"]["seed"] = int(seed_override)
    return validate_config(cfg)


def echo_config(cfg: dict) -> None:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# -- paths and seeds ----------------------------------------------------------


def paths(cfg: dict) -> dict:
    out = Path(cfg["out_dir"])
    return {
        "out": out,
        "shifts": out / "shifts",
        "checkpoints": out / "checkpoints",
        "reports": out / "reports",
        "temperatures": out / "reports" / "temperatures.json",
    }


def data_seeds(cfg: dict) -> dict:
    s = int(cfg["seed"])
    return {"train": 10 * s + 1, "val": 10 * s + 2, "test": 10 * s + 3,
            "corrupt": 10 * s + 4, "base": 100 * s + 11, "epinet": 100 * s + 12,
            "ensemble": 100 * s + 13}


def base_channels(cfg: dict, width: int) -> list:
    return [cfg["models"]["base_channels"] * width]


def checkpoint_path(cfg: dict, model_id: str) -> Path:
    return paths(cfg)["checkpoints"] / f"{model_id}.ennck"


def _reference_id() -> str:
    return "member_00"


# -- dataset assembly -----------------------------------------------------------


def clean_splits(cfg: dict):
    """(train_in, val_in, test_in, ood) filtered to the configured classes."""
    d = cfg["data"]
    seeds = data_seeds(cfg)
    kwargs = dict(noise_sigma=d["noise_sigma"], cycles=d["cycles"],
                  amplitude_range=tuple(d["amplitude_range"]),
                  orientation_jitter=d["orientation_jitter"])
    train_pool = generate_dataset(d["n_train"], d["classes"], seeds["train"], split="train", **kwargs)
    val_pool = generate_dataset(d["n_val"], d["classes"], seeds["val"], split="val", **kwargs)
    test_pool = generate_dataset(d["n_test"], d["classes"], seeds["test"], split="test", **kwargs)
    in_dist = d["in_dist_classes"]
    train_in, _ = make_ood_split(d["classes"], in_dist, train_pool)
    val_in, _ = make_ood_split(d["classes"], in_dist, val_pool)
    test_in, ood = make_ood_split(d["classes"], in_dist, test_pool)
    return train_in, val_in, test_in, ood


# -- subcommands -------------------------------------------------------------------


def cmd_make_shifts(cfg: dict, args) -> None:
    echo_config(cfg)
    p = paths(cfg)
    _, _, test_in, ood = clean_splits(cfg)
    seeds = data_seeds(cfg)
    grid = {(ctype, sev): corrupt(test_in, ctype, sev, seeds["corrupt"])
            for ctype in cfg["shift"]["types"] for sev in SEVERITIES}

    adversarial = None
    mode = cfg["shift"]["adversarial"]
    ref_path = checkpoint_path(cfg, _reference_id())
    if mode != "off":
        if ref_path.exists():
            reference = load_checkpoint(ref_path)
            adversarial = make_adversarial_split(reference, test_in,
                                                 cfg["data"]["in_dist_classes"],
                                                 reference_id=_reference_id())
        elif mode == "require":
            raise MissingArtifactError(
                f"adversarial split needs the reference checkpoint {ref_path}; "
                f"run 'ennbench train-ensemble' first")

    suite = ShiftSuite(test=test_in, corruptions=grid, ood=ood, adversarial=adversarial,
                       class_subset=list(cfg["data"]["in_dist_classes"]),
                       reference_model_id=_reference_id() if adversarial is not None else None)
    manifest = write_suite(suite, p["shifts"])
    print(f"make-shifts: {len(manifest['datasets'])} datasets "
          f"(adversarial {manifest['adversarial']}), digest {manifest_digest(manifest)[:12]}")


def _train_config(cfg: dict, epochs_key: str, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(learning_rate=t["learning_rate"], momentum=t["momentum"],
                       batch_size=t["batch_size"], epochs=t[epochs_key],
                       ridge=t["ridge"], n_train_z=t["n_train_z"], seed=seed)


def _skip_if_done(path: Path, train_config: dict, seeds: dict) -> bool:
    """True when an intact checkpoint with the same config already exists."""
    if not path.exists():
        return False
    try:
        meta, _ = read_checkpoint(path)
    except (DigestError, FormatError):
        return False
    if meta.get("train_config") == train_config and meta.get("seeds") == seeds:
        return True
    raise ConfigError(
        f"{path} was produced by a different config; remove it or use a fresh --out")


def cmd_train_base(cfg: dict, args) -> None:
    echo_config(cfg)
    train_in, _, _, _ = clean_splits(cfg)
    m = cfg["models"]
    for width in m["widths"]:
        model_id = f"base_w{width}"
        tc = _train_config(cfg, "epochs_base", data_seeds(cfg)["base"] + width)
        seeds = {"data": data_seeds(cfg)["train"]}
        path = checkpoint_path(cfg, model_id)
        if _skip_if_done(path, tc.to_dict(), seeds):
            print(f"train-base: {model_id} up to date, skipping")
            continue
        model = train_base(train_in, tc, channels=base_channels(cfg, width),
                           kernel=m["kernel"], stride=m["stride"],
                           num_classes=cfg["data"]["classes"], model_id=model_id)
        save_checkpoint(model, path, train_config=tc.to_dict(), seeds=seeds)
        print(f"train-base: {model_id} train_acc="
              f"{model.train_record['final_train_accuracy']:.3f}")


def cmd_train_epinet(cfg: dict, args) -> None:
    echo_config(cfg)
    train_in, _, _, _ = clean_splits(cfg)
    ep = cfg["models"]["epinet"]
    for width in cfg["models"]["widths"]:
        base_path = checkpoint_path(cfg, f"base_w{width}")
        if not base_path.exists():
            raise MissingArtifactError(
                f"epinet_w{width} needs base checkpoint {base_path}; run 'ennbench train-base'")
        model_id = f"epinet_w{width}"
        tc = _train_config(cfg, "epochs_epinet", data_seeds(cfg)["epinet"] + width)
        seeds = {"data": data_seeds(cfg)["train"], "base": f"base_w{width}"}
        path = checkpoint_path(cfg, model_id)
        if _skip_if_done(path, tc.to_dict(), seeds):
            print(f"train-epinet: {model_id} up to date, skipping")
            continue
        base = load_checkpoint(base_path)
        model = train_epinet(base, train_in, tc, index_dim=ep["index_dim"],
                             hidden=tuple(ep["hidden"]), prior_mlp_scale=ep["prior_mlp_scale"],
                             prior_conv_scale=ep["prior_conv_scale"],
                             prior_conv_channels=ep["prior_conv_channels"], model_id=model_id)
        save_checkpoint(model, path, train_config=tc.to_dict(), seeds=seeds)
        print(f"train-epinet: {model_id} done")


def _train_member(cfg: dict, index: int) -> str:
    """Train one ensemble member (used directly and from worker processes)."""
    train_in, _, _, _ = clean_splits(cfg)
    m = cfg["models"]
    model_id = f"member_{index:02d}"
    tc = _train_config(cfg, "epochs_base", data_seeds(cfg)["ensemble"] + index)
    seeds = {"data": data_seeds(cfg)["train"], "member": index}
    path = checkpoint_path(cfg, model_id)
    if _skip_if_done(path, tc.to_dict(), seeds):
        return f"{model_id}: up to date"
    model = train_base(train_in, tc, channels=base_channels(cfg, 1), kernel=m["kernel"],
                       stride=m["stride"], num_classes=cfg["data"]["classes"],
                       model_id=model_id)
    save_checkpoint(model, path, train_config=tc.to_dict(), seeds=seeds)
    return f"{model_id}: train_acc={model.train_record['final_train_accuracy']:.3f}"


def _member_worker(cfg_json: str, index: int) -> str:
    return _train_member(json.loads(cfg_json), index)


def cmd_train_ensemble(cfg: dict, args) -> None:
    echo_config(cfg)
    pool = cfg["models"]["ensemble_pool"]
    jobs = max(1, int(getattr(args, "jobs", 1) or 1))
    if jobs == 1:
        for i in range(pool):
            print(f"train-ensemble: {_train_member(cfg, i)}")
        return
    cfg_json = json.dumps(cfg)
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool_exec:
        futures = [pool_exec.submit(_member_worker, cfg_json, i) for i in range(pool)]
        for fut in futures:
            print(f"train-ensemble: {fut.result()}")


def _load_pool(cfg: dict) -> list:
    members = []
    for i in range(cfg["models"]["ensemble_pool"]):
        path = checkpoint_path(cfg, f"member_{i:02d}")
        if not path.exists():
            raise MissingArtifactError(
                f"ensemble member checkpoint {path} missing; run 'ennbench train-ensemble'")
        members.append(load_checkpoint(path))
    return members


def _load_models(cfg: dict) -> list:
    """(model_id, model) pairs in the fixed evaluation order."""
    out = []
    for width in cfg["models"]["widths"]:
        path = checkpoint_path(cfg, f"base_w{width}")
        if not path.exists():
            raise MissingArtifactError(f"checkpoint {path} missing; run 'ennbench train-base'")
        out.append((f"base_w{width}", load_checkpoint(path)))
    for width in cfg["models"]["widths"]:
        path = checkpoint_path(cfg, f"epinet_w{width}")
        if not path.exists():
            raise MissingArtifactError(f"checkpoint {path} missing; run 'ennbench train-epinet'")
        out.append((f"epinet_w{width}", load_checkpoint(path)))
    members = _load_pool(cfg)
    full = EnsembleModel(members, model_id="ensemble")
    for k in cfg["models"]["ensemble_sizes"]:
        out.append((f"ensemble_k{k}", subensemble(full, k)))
    return out


def _require_suite(cfg: dict) -> ShiftSuite:
    p = paths(cfg)
    if not (p["shifts"] / "manifest.json").exists():
        raise MissingArtifactError(
            f"shift suite not found under {p['shifts']}; run 'ennbench make-shifts'")
    suite = load_suite(p["shifts"])
    if suite.adversarial is None and cfg["shift"]["adversarial"] != "off":
        raise MissingArtifactError(
            "adversarial split is pending its reference model; run 'ennbench train-ensemble' "
            "and then 'ennbench make-shifts' again")
    return suite


def _grid_errors(cfg, model, suite, eval_seed) -> dict:
    """Per-type per-severity error rates (1 - accuracy)."""
    errors: dict = {}
    for ctype in cfg["shift"]["types"]:
        errors[ctype] = []
        for sev in SEVERITIES:
            ds = suite.corruptions[(ctype, sev)]
            pe = PredictiveEvaluation(model, ds, cfg["eval"]["n_index"],
                                      [eval_seed, CORRUPTION_TYPES.index(ctype), sev])
            errors[ctype].append(1.0 - pe.accuracy())
    return errors


def evaluate_models(cfg: dict, suite: ShiftSuite, models: list, *,
                    baseline_errors: dict | None = None) -> MetricsReport:
    ev = cfg["eval"]
    eval_seed = int(ev["seed"])
    report = MetricsReport(metadata={
        "title": "shift-suite evaluation",
        "note": ("evaluation randomness comes only from epistemic-index sampling; "
                 "base and ensemble predictions are index-enumerated and exact"),
    })
    dyadic = DyadicConfig(tau=ev["dyadic_tau"], n_batches=ev["dyadic_batches"],
                          n_index=ev["n_index"], seed=eval_seed)

    if baseline_errors is None:
        ref_path = checkpoint_path(cfg, _reference_id())
        if ref_path.exists():
            baseline_errors = _grid_errors(cfg, load_checkpoint(ref_path), suite, eval_seed)

    for model_id, model in models:
        size = model.param_count()

        def add(dataset, metric, value, ctype="", severity=None):
            report.add(model=model_id, model_size_params=size, dataset=dataset,
                       metric=metric, value=value, corruption_type=ctype,
                       severity=severity, seed=eval_seed)

        errors: dict = {}
        for name, ds in suite.datasets():
            if name == "ood":
                continue
            eval_model = model
            if name == "adversarial":
                if len(ds) == 0:
                    continue
                eval_model = restrict_classes(model, suite.class_subset)
            ctype = ds.provenance.get("corruption", "")
            severity = ds.provenance.get("severity")
            stream = [eval_seed, CORRUPTION_TYPES.index(ctype) if ctype else 98,
                      severity or 0]
            pe = PredictiveEvaluation(eval_model, ds, ev["n_index"], stream)
            add(name, "accuracy", pe.accuracy(), ctype, severity)
            add(name, "ece", pe.ece(ev["ece_bins"]), ctype, severity)
            add(name, "marginal_nll", pe.marginal_nll(), ctype, severity)
            add(name, "joint_nll", pe.dyadic_joint_nll(dyadic), ctype, severity)
            add(name, "confidence", pe.confidence(), ctype, severity)
            add(name, "failure_rate", pe.failure_rate(ev["failure_threshold"]),
                ctype, severity)
            if ctype:
                errors.setdefault(ctype, []).append(1.0 - pe.accuracy())

        if errors and baseline_errors is not None:
            add("corruption-grid", "mce", mce(errors, baseline_errors))
        for ctype, vals in errors.items():
            for sev, err in zip(SEVERITIES, vals):
                add(f"corrupt:{ctype}:s{sev}", "error", err, ctype, sev)

        restricted = restrict_classes(model, suite.class_subset)
        in_scores = anomaly_scores(restricted, suite.test, ev["n_index"], [eval_seed, 97])
        ood_scores = anomaly_scores(restricted, suite.ood, ev["n_index"], [eval_seed, 96])
        add("ood", "aupr", aupr(in_scores, ood_scores))
        add("ood", "confidence", float(-np.mean(ood_scores)))
        add("test:restricted", "confidence", float(-np.mean(in_scores)))
    return report


def cmd_evaluate(cfg: dict, args) -> None:
    echo_config(cfg)
    suite = _require_suite(cfg)
    models = _load_models(cfg)
    report = evaluate_models(cfg, suite, models)
    csv_path, summary_path = write_report(report, paths(cfg)["reports"], name="metrics")
    print(f"evaluate: wrote {csv_path} and {summary_path}")


def cmd_tune_temp(cfg: dict, args) -> None:
    echo_config(cfg)
    _, val_in, _, _ = clean_splits(cfg)
    models = _load_models(cfg)
    temps = {}
    for model_id, model in models:
        t = tune_temperature(model, val_in, cfg["eval"]["n_index"],
                             [int(cfg["eval"]["seed"]), 95])
        temps[model_id] = {"value": t.value, "tuned_on": "val"}
        print(f"tune-temp: {model_id} T={t.value:.4f}")
    p = paths(cfg)
    p["reports"].mkdir(parents=True, exist_ok=True)
    p["temperatures"].write_text(json.dumps(temps, indent=2, sort_keys=True) + "\n")


def cmd_temp_report(cfg: dict, args) -> None:
    echo_config(cfg)
    suite = _require_suite(cfg)
    p = paths(cfg)
    if not p["temperatures"].exists():
        raise MissingArtifactError(
            f"{p['temperatures']} missing; run 'ennbench tune-temp' first")
    temps = json.loads(p["temperatures"].read_text())
    models = _load_models(cfg)
    ev = cfg["eval"]
    report = MetricsReport(metadata={"title": "temperature with/without ratios"})
    dyadic = DyadicConfig(tau=ev["dyadic_tau"], n_batches=ev["dyadic_batches"],
                          n_index=ev["n_index"], seed=int(ev["seed"]))
    for model_id, model in models:
        if model_id not in temps:
            raise MissingArtifactError(f"no tuned temperature recorded for {model_id}")
        t = Temperature(value=temps[model_id]["value"], tuned_on=temps[model_id]["tuned_on"])
        records = temperature_ratio_report(model, t, suite, n_index=ev["n_index"],
                                           seed=int(ev["seed"]), dyadic=dyadic,
                                           ece_bins=ev["ece_bins"])
        size = model.param_count()
        for rec in records:
            common = dict(model=model_id, model_size_params=size, dataset=rec["dataset"],
                          corruption_type=rec["corruption_type"] or "",
                          severity=rec["severity"], temperature=t.value,
                          seed=int(ev["seed"]))
            report.add(metric=f"ratio:{rec['metric']}", value=rec["ratio"], **common)
            report.add(metric=f"with_t:{rec['metric']}", value=rec["with_t"], **common)
            report.add(metric=f"without_t:{rec['metric']}", value=rec["without_t"], **common)
    csv_path, _ = write_report(report, p["reports"], name="ratios")
    print(f"temp-report: wrote {csv_path}")


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ennbench",
                                     description="epistemic-network shift benchmarks")
    parser.add_argument("--version", action="version", version=f"ennbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("make-shifts", cmd_make_shifts), ("train-base", cmd_train_base),
                     ("train-epinet", cmd_train_epinet), ("train-ensemble", cmd_train_ensemble),
                     ("evaluate", cmd_evaluate), ("tune-temp", cmd_tune_temp),
                     ("temp-report", cmd_temp_report)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None, help="JSON config path")
        sp.add_argument("--out", type=str, default=None, help="output directory override")
        sp.add_argument("--seed", type=int, default=None, help="seed override")
        sp.add_argument("--jobs", type=int, default=1, help="parallel workers")
        sp.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, out_override=args.out, seed_override=args.seed)
        args.func(cfg, args)
    except EnnBenchError as e:
        print(f"{e.error_class}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io-error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
