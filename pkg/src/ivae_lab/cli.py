"""``ivae-lab`` experiment runner.

Every command reads one JSON config. Run directories live under the output
root (``--out``, else ``$IVAE_LAB_OUT``, else ``./runs``) and are named by a
hash of the resolved config, so the same config always lands in the same
place. Each finished command appends a record to ``runs.jsonl`` in the root.

Exit codes: 0 ok, 1 config error, 2 runtime or numeric failure. Errors are
printed to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import time
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import jsonschema
import numpy as np

from . import causal, datagen, evaluation, priors
from . import model as mdl
from .nets import LrSchedule

SCHEMA_VERSION = 1
COMMANDS = ("generate", "train", "eval", "sweep", "causal", "demo-2d")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 1)."""


def _fields_schema(cls, overrides: dict | None = None) -> dict:
    kinds = {"int": {"type": "integer"}, "float": {"type": "number"}, "bool": {"type": "boolean"},
             "str": {"type": "string"}}
    props = {}
    for f in fields(cls):
        name = str(f.type).replace("builtins.", "")
        props[f.name] = kinds.get(name, {})
    props.update(overrides or {})
    return {"type": "object", "properties": props, "additionalProperties": False}


_GRID = {"type": "array", "minItems": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ivae-lab experiment config",
    "type": "object",
    "required": ["schema_version"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "command": {"enum": list(COMMANDS)},
        "seed": {"type": "integer", "minimum": 0},
        "data": _fields_schema(datagen.GenConfig, {
            "var_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            "mean_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        }),
        "dataset": {"type": "string"},
        "model": _fields_schema(mdl.ModelConfig),
        "train": _fields_schema(mdl.TrainConfig, {
            "schedule": {"type": "object", "properties": {
                "kind": {"enum": ["constant", "multiplicative-decay"]},
                "factor": {"type": "number"}, "floor": {"type": "number"}}, "additionalProperties": False},
        }),
        "checkpoint": {"type": "string"},
        "resume": {"type": "string"},
        "eval": {"type": "object", "additionalProperties": False, "properties": {
            "correlation": {"enum": ["pearson", "spearman"]},
            "use_samples": {"type": "boolean"},
            "alignment": {"type": "boolean"}}},
        "sweep": {"type": "object", "additionalProperties": False, "properties": {
            "n": {**_GRID, "items": {"type": "integer", "minimum": 1}},
            "M": {**_GRID, "items": {"type": "integer", "minimum": 2}},
            "seeds": {**_GRID, "items": {"type": "integer", "minimum": 0}},
            "variants": {**_GRID, "items": {"enum": list(mdl.VARIANTS)}},
            "betas": {**_GRID, "items": {"type": "number", "exclusiveMinimum": 0}},
            "select_dimension": {"type": "boolean"}}},
        "causal": {"type": "object", "additionalProperties": False, "properties": {
            "repetitions": {"type": "integer", "minimum": 1},
            "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "num_perms": {"type": "integer", "minimum": 100},
            "max_samples": {"type": "integer", "minimum": 50}}},
        "parallel": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
    },
}

# demo-2d preset: two sources whose means and variances change across 5 segments
DEMO_2D = {
    "data": {"M": 5, "L": 1000, "n": 2, "d": 2, "family": "gaussian_mean_var"},
    "model": {"family": "gaussian_mean_var"},
    "train": {"epochs": 60, "batch_size": 64, "lr": 0.01},
}


# ---------------------------------------------------------------------------
# config handling


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    validate_config(raw)
    return raw


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"schema error at {where}: {err.message}") from err


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def gen_config(cfg: dict, **overrides) -> datagen.GenConfig:
    data = dict(cfg.get("data", {}))
    data.setdefault("seed", cfg.get("seed", 0))
    data.update(overrides)
    try:
        return datagen.GenConfig(**data)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def model_config(cfg: dict, ds: datagen.Dataset, **overrides) -> mdl.ModelConfig:
    params = dict(cfg.get("model", {}))
    params.setdefault("family", ds.config.family)
    if ds.config.observation == "bernoulli":
        params.setdefault("likelihood", "bernoulli")
    params.update(overrides)
    params.update(data_dim=ds.config.d, aux_dim=ds.config.M)
    params.setdefault("latent_dim", ds.config.n)
    try:
        return mdl.ModelConfig(**params)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def train_config(cfg: dict, **overrides) -> mdl.TrainConfig:
    params = dict(cfg.get("train", {}))
    params.setdefault("seed", cfg.get("seed", 0))
    params.update(overrides)
    if "schedule" in params:
        params["schedule"] = LrSchedule(**params["schedule"])
    try:
        return mdl.TrainConfig(**params)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def output_root(cli_out: str | None, cfg: dict) -> Path:
    return Path(cli_out or cfg.get("out") or os.environ.get("IVAE_LAB_OUT") or "runs")


def run_dir(root: Path, command: str, cfg: dict) -> Path:
    path = root / f"{command}-{config_hash(cfg)}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return path


def append_record(root: Path, command: str, cfg: dict, started: float, metrics: dict, artifacts: list) -> dict:
    record = {
        "run_id": uuid.uuid4().hex,
        "command": command,
        "config_hash": config_hash(cfg),
        "started": started,
        "finished": time.time(),
        "metrics": metrics,
        "artifacts": [str(a) for a in artifacts],
    }
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "runs.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return record


def _load_or_generate(cfg: dict) -> datagen.Dataset:
    if "dataset" in cfg:
        try:
            return datagen.load_dataset(cfg["dataset"])
        except FileNotFoundError as err:
            raise ConfigError(f"dataset not found: {cfg['dataset']}") from err
    return datagen.generate(gen_config(cfg))


def _write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _write_trace(path: Path, trace: list[dict]) -> Path:
    return _write_csv(path, ["epoch", "elbo", "elbo_se", "lr"],
                      ([r["epoch"], repr(r["elbo"]), repr(r["elbo_se"]), repr(r["lr"])] for r in trace))


# ---------------------------------------------------------------------------
# core steps shared by commands and sweep workers


def fit(ds: datagen.Dataset, mcfg: mdl.ModelConfig, tcfg: mdl.TrainConfig):
    model = mdl.build_model(mcfg, tcfg.seed)
    result = mdl.train(model, ds.x, ds.u, tcfg)
    return result


def evaluate(model: mdl.Model, ds: datagen.Dataset, kind: str = "pearson", use_samples: bool = False,
             alignment: bool = True) -> evaluation.EvalReport:
    if model.config.data_dim != ds.config.d or model.config.aux_dim != ds.config.M:
        raise ConfigError(f"checkpoint expects data_dim={model.config.data_dim}, aux_dim={model.config.aux_dim}; "
                          f"dataset has d={ds.config.d}, M={ds.config.M}")
    if model.config.latent_dim != ds.config.n:
        raise ConfigError(f"checkpoint latent_dim={model.config.latent_dim} differs from dataset n={ds.config.n}")
    z_hat = mdl.latent_estimate(model, ds.x, ds.u, use_samples=use_samples)
    report = evaluation.mcc(ds.z_star, z_hat, kind)
    report.notes["latents"] = "posterior samples" if use_samples else "posterior means"
    report.notes["variant"] = model.config.variant
    if alignment:
        spec = ds.config.spec
        try:
            res = evaluation.affine_align(priors.sufficient_stats(spec, ds.z_star),
                                          priors.sufficient_stats(spec, z_hat))
            report.alignment_r2 = res.mean_r2
            report.notes["alignment"] = {"r2": res.r2.tolist(), "condition_ratio": res.condition_ratio}
        except ValueError as err:
            report.notes["alignment"] = f"skipped: {err}"
    return report


def _sweep_cell(args: tuple) -> dict:
    cfg, cell = args
    ds = datagen.generate(gen_config(cfg, seed=cell["seed"], M=cell["M"]))
    overrides = {"variant": cell["variant"], "latent_dim": cell["n"]}
    if cell["beta"] is not None:
        overrides["beta"] = cell["beta"]
    mcfg = model_config(cfg, ds, **overrides)
    tcfg = train_config(cfg, seed=cell["seed"])
    result = fit(ds, mcfg, tcfg)
    final_elbo, _ = mdl.evaluate_elbo(result.model, ds.x, ds.u, seed=cell["seed"])
    row = dict(cell, elbo=final_elbo, mcc=None, r2=None)
    if cell["n"] == ds.config.n:
        report = evaluate(result.model, ds)
        row.update(mcc=report.mcc, r2=report.alignment_r2)
    else:
        # MCC over the best-matching min(n, n*) pairs
        z_hat = mdl.latent_estimate(result.model, ds.x, ds.u)
        corr = np.abs(evaluation.correlation_matrix(ds.z_star, z_hat))
        m = min(corr.shape)
        sq = np.zeros((max(corr.shape),) * 2)
        sq[:corr.shape[0], :corr.shape[1]] = corr
        perm = evaluation.assign(sq)
        row["mcc"] = float(np.mean([sq[i, perm[i]] for i in range(sq.shape[0]) if sq[i, perm[i]] > 0][:m]))
    return row


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: dict, root: Path) -> dict:
    gcfg = gen_config(cfg)
    rdir = run_dir(root, "generate", cfg)
    ds = datagen.generate(gcfg)
    json_path, bin_path = datagen.save_dataset(ds, rdir / "dataset")
    csv_path = datagen.export_csv(ds, rdir / "dataset.csv")
    checksum = ds.checksum()
    print(json.dumps({"checksum": checksum, "dataset": str(rdir / "dataset")}))
    return {"metrics": {"checksum": checksum, "N": ds.N}, "artifacts": [json_path, bin_path, csv_path]}


def cmd_train(cfg: dict, root: Path) -> dict:
    ds = _load_or_generate(cfg)
    rdir = run_dir(root, "train", cfg)
    tcfg = train_config(cfg)
    start_epoch, adam, prior_trace = 0, None, []
    if "resume" in cfg:
        try:
            model, meta, adam = mdl.load_model(cfg["resume"])
        except FileNotFoundError as err:
            raise ConfigError(f"checkpoint not found: {cfg['resume']}") from err
        start_epoch = meta.get("epochs_completed", 0)
        prior_trace = meta.get("trace", [])
        if model.config.data_dim != ds.config.d or model.config.aux_dim != ds.config.M:
            raise ConfigError("resume checkpoint does not match the dataset dimensions")
    else:
        model = mdl.build_model(model_config(cfg, ds), tcfg.seed)
    result = mdl.train(model, ds.x, ds.u, tcfg, start_epoch=start_epoch, adam=adam)
    trace = prior_trace + result.trace
    meta = {
        "epochs_completed": tcfg.epochs,
        "train_config": tcfg.to_dict(),
        "dataset_checksum": ds.checksum(),
        "uses_u": model.config.uses_u,
        "u_note": "u is fed to the encoder and prior" if model.config.uses_u
        else "u withheld: encoder sees zeroed u columns and the prior is unconditional",
        "trace": trace,
    }
    ckpt_json, ckpt_bin = mdl.save_model(result.model, rdir / "checkpoint", meta, result.adam)
    trace_path = _write_trace(rdir / "trace.csv", trace)
    final = trace[-1]["elbo"] if trace else None
    print(json.dumps({"checkpoint": str(rdir / "checkpoint"), "final_elbo": final}))
    return {"metrics": {"elbo": final}, "artifacts": [ckpt_json, ckpt_bin, trace_path]}


def cmd_eval(cfg: dict, root: Path) -> dict:
    if "checkpoint" not in cfg:
        raise ConfigError("eval needs a 'checkpoint' path")
    ds = _load_or_generate(cfg)
    try:
        model, _, _ = mdl.load_model(cfg["checkpoint"])
    except FileNotFoundError as err:
        raise ConfigError(f"checkpoint not found: {cfg['checkpoint']}") from err
    opts = cfg.get("eval", {})
    report = evaluate(model, ds, opts.get("correlation", "pearson"), opts.get("use_samples", False),
                      opts.get("alignment", True))
    elbo, _ = mdl.evaluate_elbo(model, ds.x, ds.u, seed=cfg.get("seed", 0))
    report.notes["elbo"] = elbo
    rdir = run_dir(root, "eval", cfg)
    report_path = rdir / "report.json"
    report_path.write_text(report.to_json())
    summary = root / "summary.csv"
    new = not summary.exists()
    with open(summary, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["variant", "seed", "n", "mcc", "r2", "elbo", "kind", "checkpoint"])
        writer.writerow([model.config.variant, ds.config.seed, ds.config.n, report.mcc, report.alignment_r2,
                         elbo, report.kind, cfg["checkpoint"]])
    print(json.dumps({"mcc": report.mcc, "r2": report.alignment_r2, "report": str(report_path)}))
    return {"metrics": {"mcc": report.mcc, "r2": report.alignment_r2, "elbo": elbo},
            "artifacts": [report_path, summary]}


def sweep_cells(cfg: dict) -> list[dict]:
    grid = cfg.get("sweep", {})
    data = cfg.get("data", {})
    ns = grid.get("n", [cfg.get("model", {}).get("latent_dim", data.get("n", 5))])
    Ms = grid.get("M", [data.get("M", 40)])
    seeds = grid.get("seeds", [cfg.get("seed", 0)])
    variants = grid.get("variants", [cfg.get("model", {}).get("variant", "ivae")])
    betas = grid.get("betas", [None])
    cells = []
    for variant in variants:
        for beta in (betas if variant in ("beta_vae", "beta_tc_vae") else [None]):
            for M in Ms:
                for n in ns:
                    for seed in seeds:
                        cells.append({"variant": variant, "beta": beta, "M": M, "n": n, "seed": seed})
    return cells


def cmd_sweep(cfg: dict, root: Path, parallel: int = 1) -> dict:
    cells = sweep_cells(cfg)
    rdir = run_dir(root, "sweep", cfg)
    jobs = [(cfg, cell) for cell in cells]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(job) for job in jobs]
    header = ["variant", "beta", "M", "n", "seed", "elbo", "mcc", "r2"]
    results = _write_csv(rdir / "results.csv", header, ([r[h] for h in header] for r in rows))
    scatter = _write_csv(rdir / "elbo_vs_mcc.csv", ["variant", "beta", "n", "seed", "elbo", "mcc"],
                         ([r["variant"], r["beta"], r["n"], r["seed"], r["elbo"], r["mcc"]] for r in rows))
    metrics = {"cells": len(rows)}
    if cfg.get("sweep", {}).get("select_dimension") and len({r["n"] for r in rows}) >= 4:
        by_n: dict[int, list[float]] = {}
        for r in rows:
            by_n.setdefault(r["n"], []).append(r["elbo"])
        curve = {n: float(np.mean(v)) for n, v in by_n.items()}
        try:
            metrics["selected_n"] = evaluation.select_dimension(curve)
        except evaluation.NoKneeError:
            metrics["selected_n"] = None
            metrics["selection_error"] = evaluation.NoKneeError.code
        (rdir / "dimension.json").write_text(json.dumps({"elbo_by_n": curve, **metrics}, indent=2))
    print(json.dumps({"results": str(results), **metrics}))
    return {"metrics": metrics, "artifacts": [results, scatter]}


def cmd_causal(cfg: dict, root: Path) -> dict:
    opts = cfg.get("causal", {})
    reps = opts.get("repetitions", 1)
    hcfg = dict(alpha=opts.get("alpha", 0.05), num_perms=opts.get("num_perms", 500),
                max_samples=opts.get("max_samples", 1000))
    base_seed = cfg.get("seed", 0)
    data = dict(cfg.get("data", {}))
    data.setdefault("variant", "causal_sem")
    data.setdefault("n", 2)
    data.setdefault("d", 2)
    cfg_eff = dict(cfg, data=data)
    rdir = run_dir(root, "causal", cfg)
    decisions = []
    for r in range(reps):
        seed = base_seed + r
        ds = datagen.generate(gen_config(cfg_eff, seed=seed))
        if ds.config.variant == "causal_sem":
            n_hat = causal.recover_disturbances(ds, train_config(cfg_eff, seed=seed), model_config(cfg_eff, ds))
        else:
            result = fit(ds, model_config(cfg_eff, ds), train_config(cfg_eff, seed=seed))
            n_hat = mdl.latent_estimate(result.model, ds.x, ds.u)
        decision = causal.decide_direction(ds.x, n_hat, causal.HsicConfig(seed=seed, **hcfg))
        decision.config.update(repetition=r, seed=seed, variant=ds.config.variant)
        decisions.append(decision.to_dict())
    counts = {v: sum(d["verdict"] == v for d in decisions) for v in causal.VERDICTS}
    aggregate = {"repetitions": reps, "counts": counts,
                 "proportions": {v: c / reps for v, c in counts.items()},
                 "truth": "x1_causes_x2",
                 "note": "acceptance thresholds are desk-scale targets, not reported values"}
    path = rdir / "decisions.json"
    path.write_text(json.dumps({"decisions": decisions, "aggregate": aggregate}, indent=2, sort_keys=True))
    print(json.dumps(aggregate, sort_keys=True))
    return {"metrics": aggregate, "artifacts": [path]}


def cmd_demo_2d(cfg: dict, root: Path) -> dict:
    merged = copy.deepcopy(DEMO_2D)
    for key in ("data", "model", "train"):
        merged[key].update(cfg.get(key, {}))
    merged["seed"] = cfg.get("seed", 0)
    ds = datagen.generate(gen_config(merged))
    rdir = run_dir(root, "demo-2d", cfg)
    result = fit(ds, model_config(merged, ds), train_config(merged))
    z_hat = mdl.latent_estimate(result.model, ds.x, ds.u)
    report = evaluation.mcc(ds.z_star, z_hat)
    sources = _write_csv(rdir / "sources.csv", ["segment", "z1", "z2"],
                         ([int(s), repr(a), repr(b)] for s, (a, b) in zip(ds.segments, ds.z_star)))
    obs = _write_csv(rdir / "observations.csv", ["segment", "x1", "x2"],
                     ([int(s), repr(a), repr(b)] for s, (a, b) in zip(ds.segments, ds.x)))
    lat = _write_csv(rdir / "latents.csv", ["segment", "zhat1", "zhat2"],
                     ([int(s), repr(a), repr(b)] for s, (a, b) in zip(ds.segments, z_hat)))
    trace = _write_trace(rdir / "trace.csv", result.trace)
    (rdir / "report.json").write_text(report.to_json())
    print(json.dumps({"mcc": report.mcc, "dir": str(rdir)}))
    return {"metrics": {"mcc": report.mcc}, "artifacts": [sources, obs, lat, trace, rdir / "report.json"]}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivae-lab", description="iVAE experiments on synthetic data.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="path to a JSON config")
    parser.add_argument("--out", help="output root (overrides IVAE_LAB_OUT)")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--parallel", type=int, default=None, help="sweep worker processes")
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    started = time.time()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if cfg.get("command", args.command) != args.command:
            raise ConfigError(f"config is for command {cfg['command']!r}, not {args.command!r}")
        root = output_root(args.out, cfg)
        handlers = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "causal": cmd_causal,
                    "demo-2d": cmd_demo_2d}
        if args.command == "sweep":
            out = cmd_sweep(cfg, root, args.parallel or cfg.get("parallel", 1))
        else:
            out = handlers[args.command](cfg, root)
        append_record(root, args.command, cfg, started, out["metrics"], out["artifacts"])
    except ConfigError as err:
        return _fail(1, "config", str(err))
    except (FloatingPointError, ArithmeticError, RuntimeError, ValueError) as err:
        return _fail(2, type(err).__name__, str(err))
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
