"""Command-line entry point: train, eval, gradcheck, report, compare, ablate.

Config precedence is flags over config file over built-in defaults, and the
fully resolved config is echoed into a JSON manifest next to the outputs, so
any run can be reproduced bit-exactly by pointing ``--config`` at its
manifest.  All artifacts land inside the ``--out`` directory.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import baselines, datagen, trainer, uncertainty
from .gradcheck import run_gradcheck
from .trainer import CheckpointError, TrainConfig, TrainingDivergedError


class CliConfigError(Exception):
    """Bad flag combination or config file contents (exit code 2)."""


DATASET_DEFAULTS = {"kind": "two-moons", "n": 500, "rotation": 30.0, "noise_sd": 0.1}
BLOBS_DEFAULTS = {"k": 3, "n_per_class": 100, "shift": [2.0, 0.0], "scale": 1.0}

# TrainConfig fields settable from a config file (the data decides the rest)
_TRAIN_KEYS = {
    "feature_dim",
    "hidden",
    "activation",
    "lam",
    "alpha",
    "margin",
    "mc_samples",
    "batch_source",
    "batch_target",
    "lr",
    "beta1",
    "beta2",
    "adam_epsilon",
    "steps",
    "seed",
    "bayes_error_mode",
    "inference_steps_per_round",
    "model_steps_per_round",
    "eval_every",
    "mcda_n",
}


def _parse_float_list(text: str, flag: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as err:
        raise CliConfigError(f"{flag} expects comma-separated numbers, got {text!r}") from err
    if not values:
        raise CliConfigError(f"{flag} must not be empty")
    return values


def _parse_int_list(text: str, flag: str) -> list[int]:
    return [int(v) for v in _parse_float_list(text, flag)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpda", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_dataset_flags(p):
        p.add_argument("--dataset", choices=["two-moons", "blobs", "csv"], default=None)
        p.add_argument("--n", type=int, default=None, help="samples per domain (two-moons)")
        p.add_argument("--rotation", type=float, default=None, help="target rotation, degrees")
        p.add_argument("--noise-sd", type=float, default=None)
        p.add_argument("--blobs-k", type=int, default=None)
        p.add_argument("--blobs-n-per-class", type=int, default=None)
        p.add_argument("--blobs-shift", type=str, default=None, help="comma-separated 2-vector")
        p.add_argument("--blobs-scale", type=float, default=None)
        p.add_argument("--source-csv", type=str, default=None)
        p.add_argument("--target-train-csv", type=str, default=None)
        p.add_argument("--target-test-csv", type=str, default=None)

    def add_train_flags(p):
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--margin", type=float, default=None)
        p.add_argument("--M", dest="mc_samples", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--beta1", type=float, default=None)
        p.add_argument("--beta2", type=float, default=None)
        p.add_argument("--batch-source", type=int, default=None)
        p.add_argument("--batch-target", type=int, default=None)
        p.add_argument("--hidden", type=str, default=None, help="comma-separated widths")
        p.add_argument("--feature-dim", type=int, default=None)
        p.add_argument("--activation", choices=["tanh", "relu"], default=None)
        p.add_argument("--bayes-mode", choices=["as-written", "midpoint"], default=None)
        p.add_argument("--mcda-n", type=int, default=None)
        p.add_argument("--eval-every", type=int, default=None)

    def add_common(p, out_required=True):
        p.add_argument("--config", type=str, default=None, help="JSON config or manifest")
        p.add_argument("--out", type=str, required=out_required)

    p_train = sub.add_parser("train", help="train one model and checkpoint it")
    add_dataset_flags(p_train)
    add_train_flags(p_train)
    add_common(p_train)
    p_train.add_argument("--method", choices=["gpda", "source-only", "mcda"], default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="print a checkpoint's accuracy on a split")
    add_dataset_flags(p_eval)
    add_train_flags(p_eval)
    add_common(p_eval, out_required=False)
    p_eval.add_argument("--checkpoint", type=str, required=True)
    p_eval.add_argument("--split", choices=["source", "target-test"], default="target-test")
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p_grad.add_argument("--h", type=float, default=1e-5)
    p_grad.add_argument("--tol", type=float, default=None, help="defaults to 10*h")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--points", type=int, default=20, help="random points per loss term")
    p_grad.add_argument("--out", type=str, default=None)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_rep = sub.add_parser("report", help="write uncertainty records and histograms")
    add_dataset_flags(p_rep)
    add_train_flags(p_rep)
    add_common(p_rep)
    p_rep.add_argument("--checkpoint", type=str, required=True)
    p_rep.set_defaults(func=cmd_report)

    p_cmp = sub.add_parser("compare", help="train gpda/mcda/source-only across seeds")
    add_dataset_flags(p_cmp)
    add_train_flags(p_cmp)
    add_common(p_cmp)
    p_cmp.add_argument("--seeds", type=str, default="0,1,2,3,4")
    p_cmp.set_defaults(func=cmd_compare)

    p_abl = sub.add_parser("ablate", help="sweep lambda and/or alpha grids across seeds")
    add_dataset_flags(p_abl)
    add_train_flags(p_abl)
    add_common(p_abl)
    p_abl.add_argument("--seeds", type=str, default="0,1,2,3,4")
    p_abl.add_argument("--lambda-grid", type=str, default=None)
    p_abl.add_argument("--alpha-grid", type=str, default=None)
    p_abl.set_defaults(func=cmd_ablate)

    return parser


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def _load_config_file(path: str) -> dict:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        raise CliConfigError(f"config file not found: {path}") from err
    except ValueError as err:
        raise CliConfigError(f"config file is not valid JSON: {path}: {err}") from err
    if "config" in payload and isinstance(payload["config"], dict):
        payload = payload["config"]  # a manifest: unwrap its echoed config
    return payload


def _resolve_dataset_config(args, file_cfg: dict) -> dict:
    cfg = dict(DATASET_DEFAULTS)
    cfg.update({k: v for k, v in file_cfg.get("dataset", {}).items()})
    if getattr(args, "dataset", None) is not None:
        cfg["kind"] = args.dataset
    if cfg.get("kind") == "blobs":
        for key, default in BLOBS_DEFAULTS.items():
            cfg.setdefault(key, default)
    if getattr(args, "n", None) is not None:
        cfg["n"] = args.n
    if getattr(args, "rotation", None) is not None:
        cfg["rotation"] = args.rotation
    if getattr(args, "noise_sd", None) is not None:
        cfg["noise_sd"] = args.noise_sd
    if getattr(args, "blobs_k", None) is not None:
        cfg["k"] = args.blobs_k
    if getattr(args, "blobs_n_per_class", None) is not None:
        cfg["n_per_class"] = args.blobs_n_per_class
    if getattr(args, "blobs_shift", None) is not None:
        cfg["shift"] = _parse_float_list(args.blobs_shift, "--blobs-shift")
    if getattr(args, "blobs_scale", None) is not None:
        cfg["scale"] = args.blobs_scale
    for flag, key in (
        ("source_csv", "source"),
        ("target_train_csv", "target_train"),
        ("target_test_csv", "target_test"),
    ):
        if getattr(args, flag, None) is not None:
            cfg[key] = getattr(args, flag)
    if cfg["kind"] == "csv":
        for key, flag in (
            ("source", "--source-csv"),
            ("target_train", "--target-train-csv"),
            ("target_test", "--target-test-csv"),
        ):
            if not cfg.get(key):
                raise CliConfigError(f"{flag} is required when --dataset csv")
    return cfg


def _resolve_train_overrides(args, file_cfg: dict) -> dict:
    overrides = {}
    file_train = file_cfg.get("train", {})
    unknown = set(file_train) - _TRAIN_KEYS - {"input_dim", "n_classes"}
    if unknown:
        raise CliConfigError(f"unknown train config keys: {sorted(unknown)}")
    overrides.update({k: v for k, v in file_train.items() if k in _TRAIN_KEYS})
    for field in (
        "steps",
        "seed",
        "lam",
        "alpha",
        "margin",
        "mc_samples",
        "lr",
        "beta1",
        "beta2",
        "batch_source",
        "batch_target",
        "feature_dim",
        "activation",
        "mcda_n",
        "eval_every",
    ):
        value = getattr(args, field, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "hidden", None) is not None:
        overrides["hidden"] = _parse_int_list(args.hidden, "--hidden")
    if getattr(args, "bayes_mode", None) is not None:
        overrides["bayes_error_mode"] = args.bayes_mode.replace("-", "_")
    if "hidden" in overrides:
        overrides["hidden"] = tuple(overrides["hidden"])
    return overrides


def build_dataset(dataset_cfg: dict, seed: int) -> datagen.DomainDataset:
    kind = dataset_cfg.get("kind")
    if kind == "two-moons":
        return datagen.two_moons_shift(
            n_per_domain=int(dataset_cfg["n"]),
            rotation_deg=float(dataset_cfg["rotation"]),
            noise_sd=float(dataset_cfg["noise_sd"]),
            seed=seed,
        )
    if kind == "blobs":
        return datagen.gaussian_blobs_shift(
            n_classes=int(dataset_cfg["k"]),
            n_per_class=int(dataset_cfg["n_per_class"]),
            mean_shift=tuple(dataset_cfg["shift"]),
            scale=float(dataset_cfg["scale"]),
            seed=seed,
        )
    if kind == "csv":
        return datagen.load_csv_dataset(
            dataset_cfg["source"], dataset_cfg["target_train"], dataset_cfg["target_test"]
        )
    raise CliConfigError(f"unknown dataset kind {kind!r}")


def _make_config(data: datagen.DomainDataset, overrides: dict, seed: int | None = None) -> TrainConfig:
    overrides = dict(overrides)
    if seed is not None:
        overrides["seed"] = seed
    try:
        config = TrainConfig(input_dim=data.input_dim, n_classes=data.n_classes, **overrides)
        config.validate()
    except (TypeError, ValueError) as err:
        raise CliConfigError(f"invalid training config: {err}") from err
    return config


def _write_manifest(out_dir: Path, payload: dict) -> None:
    path = out_dir / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _manifest(command: str, config: dict, outputs: dict, started: float, extra: dict | None = None) -> dict:
    payload = {
        "tool": "gpda",
        "tool_version": __version__,
        "command": command,
        "config": config,
        "outputs": outputs,
        "duration_sec": round(time.time() - started, 3),
    }
    if extra:
        payload.update(extra)
    return payload


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _train_one(method: str, config: TrainConfig, data: datagen.DomainDataset):
    """Returns (predict_fn(x) -> labels, saver(path), history)."""
    if method == "gpda":
        net, q, history = trainer.train(config, data)
        return (
            lambda x: trainer.predict_batch_model(net, q, x),
            lambda path: trainer.save_checkpoint(net, q, config, path),
            history,
        )
    if method == "source-only":
        net, q, history = baselines.train_source_only(config, data)
        source_cfg = trainer.train_source_only_config(config)
        return (
            lambda x: trainer.predict_batch_model(net, q, x),
            lambda path: trainer.save_checkpoint(net, q, source_cfg, path),
            history,
        )
    if method == "mcda":
        model, history = baselines.train_mcda(config, data)
        return (
            model.predict,
            lambda path: baselines.save_mcda_checkpoint(model, config, path),
            history,
        )
    raise CliConfigError(f"unknown method {method!r}")


def cmd_train(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config) if args.config else {}
    dataset_cfg = _resolve_dataset_config(args, file_cfg)
    overrides = _resolve_train_overrides(args, file_cfg)
    method = args.method or file_cfg.get("method") or "gpda"
    seed = int(overrides.get("seed", 0))
    data = build_dataset(dataset_cfg, seed)
    config = _make_config(data, overrides)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    predict, save, history = _train_one(method, config, data)
    ckpt = out_dir / "checkpoint.ckpt"
    save(ckpt)
    history.write_csv(out_dir / "history.csv")
    src_acc = float(np.mean(predict(data.source_x) == data.source_y))
    tgt_acc = float(np.mean(predict(data.target_test_x) == data.target_test_y))
    resolved = {"method": method, "train": config.to_dict(), "dataset": dataset_cfg}
    _write_manifest(
        out_dir,
        _manifest(
            "train",
            resolved,
            {"checkpoint": ckpt.name, "history": "history.csv"},
            started,
            {
                "dataset_provenance": data.provenance,
                "final_source_accuracy": src_acc,
                "final_target_accuracy": tgt_acc,
            },
        ),
    )
    print(f"trained {method}: source_acc={src_acc:.4f} target_acc={tgt_acc:.4f}")
    return 0


def _load_any_model(path: str):
    ck = trainer.load_checkpoint(path)
    if ck.kind == "gpda":
        net, q = trainer.model_from_checkpoint(ck)
        return ck, (lambda x: trainer.predict_batch_model(net, q, x)), (net, q)
    model = baselines.mcda_from_checkpoint(ck)
    return ck, model.predict, model


def cmd_eval(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config) if args.config else {}
    dataset_cfg = _resolve_dataset_config(args, file_cfg)
    overrides = _resolve_train_overrides(args, file_cfg)
    ck, predict, _ = _load_any_model(args.checkpoint)
    seed = int(overrides.get("seed", ck.config.get("seed", 0)))
    data = build_dataset(dataset_cfg, seed)
    if args.split == "source":
        x, y = data.source_x, data.source_y
    else:
        x, y = data.target_test_x, data.target_test_y
    if x.shape[0] == 0:
        raise datagen.DatasetError("evaluation split is empty")
    accuracy = float(np.mean(predict(x) == y))
    print(f"accuracy={accuracy:.6f}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        resolved = {"train": overrides, "dataset": dataset_cfg}
        _write_manifest(
            out_dir,
            _manifest(
                "eval",
                resolved,
                {},
                started,
                {"checkpoint": str(args.checkpoint), "split": args.split, "accuracy": accuracy},
            ),
        )
    return 0


def cmd_gradcheck(args) -> int:
    started = time.time()
    report = run_gradcheck(h=args.h, tol=args.tol, seed=args.seed, points_per_term=args.points)
    for term, check in sorted(report.worst_by_term().items()):
        status = "ok" if check.rel_err <= report.tol else "FAIL"
        print(
            f"term={term} worst_rel_err={check.rel_err:.3e} "
            f"segment={check.worst_segment} status={status}"
        )
    outcome = "PASS" if report.passed else "FAIL"
    print(f"gradcheck: {outcome} (h={report.h:g}, tol={report.tol:g})")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_manifest(
            out_dir,
            _manifest(
                "gradcheck",
                {"h": report.h, "tol": report.tol, "seed": args.seed, "points": args.points},
                {},
                started,
                {"passed": report.passed},
            ),
        )
    return 0 if report.passed else 1


def cmd_report(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config) if args.config else {}
    dataset_cfg = _resolve_dataset_config(args, file_cfg)
    overrides = _resolve_train_overrides(args, file_cfg)
    ck, _, model = _load_any_model(args.checkpoint)
    seed = int(overrides.get("seed", ck.config.get("seed", 0)))
    mode = overrides.get("bayes_error_mode", ck.config.get("bayes_error_mode", "as_written"))
    data = build_dataset(dataset_cfg, seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    outputs = {"records": "records.csv"}
    if ck.kind == "gpda":
        net, q = model
        report = uncertainty.cohort_report(net, q, data.target_test_x, data.target_test_y, mode)
        report.bd_hist.write_csv(out_dir / "hist_bd.csv")
        report.bayes_hist.write_csv(out_dir / "hist_bayes_err.csv")
        outputs.update({"hist_bd": "hist_bd.csv", "hist_bayes_err": "hist_bayes_err.csv"})
    else:
        probs = model.probabilities(data.target_test_x)
        report = uncertainty.bpd_cohort_report(probs, data.target_test_y)
        report.bpd_hist.write_csv(out_dir / "hist_bpd.csv")
        outputs.update({"hist_bpd": "hist_bpd.csv"})
    report.write_records_csv(out_dir / "records.csv")
    resolved = {"train": overrides, "dataset": dataset_cfg, "bayes_error_mode": mode}
    _write_manifest(
        out_dir,
        _manifest("report", resolved, outputs, started, {"checkpoint": str(args.checkpoint)}),
    )
    n_records = len(report.records)
    print(f"wrote {n_records} records to {out_dir / 'records.csv'}")
    return 0


METHODS = ("gpda", "mcda", "source-only")


def cmd_compare(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config) if args.config else {}
    dataset_cfg = _resolve_dataset_config(args, file_cfg)
    overrides = _resolve_train_overrides(args, file_cfg)
    seeds = _parse_int_list(args.seeds, "--seeds")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    accs: dict[str, list[tuple[float, float]]] = {m: [] for m in METHODS}
    for seed in seeds:
        data = build_dataset(dataset_cfg, seed)
        config = _make_config(data, overrides, seed=seed)
        for method in METHODS:
            predict, _, _ = _train_one(method, config, data)
            src = float(np.mean(predict(data.source_x) == data.source_y))
            tgt = float(np.mean(predict(data.target_test_x) == data.target_test_y))
            rows.append((method, str(seed), src, tgt))
            accs[method].append((src, tgt))
    for method in METHODS:
        pairs = accs[method]
        rows.append(
            (
                method,
                "mean",
                float(np.mean([p[0] for p in pairs])),
                float(np.mean([p[1] for p in pairs])),
            )
        )
    lines = ["method,seed,src_acc,tgt_acc"]
    lines += [f"{m},{s},{src!r},{tgt!r}" for m, s, src, tgt in rows]
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    resolved = {"train": overrides, "dataset": dataset_cfg, "seeds": seeds}
    _write_manifest(
        out_dir, _manifest("compare", resolved, {"summary": "summary.csv"}, started)
    )
    for method in METHODS:
        mean_tgt = float(np.mean([p[1] for p in accs[method]]))
        print(f"{method}: mean target accuracy {mean_tgt:.4f} over {len(seeds)} seeds")
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config) if args.config else {}
    dataset_cfg = _resolve_dataset_config(args, file_cfg)
    overrides = _resolve_train_overrides(args, file_cfg)
    seeds = _parse_int_list(args.seeds, "--seeds")
    grids: list[tuple[str, list[float]]] = []
    if args.lambda_grid is not None:
        grids.append(("lambda", _parse_float_list(args.lambda_grid, "--lambda-grid")))
    if args.alpha_grid is not None:
        grids.append(("alpha", _parse_float_list(args.alpha_grid, "--alpha-grid")))
    if not grids:
        raise CliConfigError("provide --lambda-grid and/or --alpha-grid")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["param,value,seed,tgt_acc"]
    for param, grid in grids:
        for value in grid:
            for seed in seeds:
                data = build_dataset(dataset_cfg, seed)
                config = _make_config(data, overrides, seed=seed)
                if param == "lambda":
                    config = replace(config, lam=value)
                else:
                    config = replace(config, alpha=value)
                net, q, _ = trainer.train(config, data)
                tgt = trainer.evaluate(net, q, data.target_test_x, data.target_test_y)
                lines.append(f"{param},{value!r},{seed},{tgt!r}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    resolved = {
        "train": overrides,
        "dataset": dataset_cfg,
        "seeds": seeds,
        "grids": {param: grid for param, grid in grids},
    }
    _write_manifest(out_dir, _manifest("ablate", resolved, {"ablation": "ablation.csv"}, started))
    print(f"wrote {out_dir / 'ablation.csv'}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (datagen.DatasetError, CheckpointError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except (ValueError, TrainingDivergedError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
