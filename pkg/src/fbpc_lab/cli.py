"""``fbpc-lab`` command line: gen-experts, train, eval, compare.

Configuration is JSON (schema in :data:`CONFIG_SCHEMA`); values resolve as
command-line flag > config file > built-in default. Every command writes the
resolved configuration next to its outputs. Exit codes: 0 success,
1 validation, 2 divergence / non-convergence, 3 I/O.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from fbpc_lab import __version__
from fbpc_lab.arrays import atomic_write_text, load_arrays, save_arrays
from fbpc_lab.baselines import BPCFKLConfig, random_coreset, train_bpc_fkl
from fbpc_lab.data import CORRUPTIONS, SYNTHETIC_KINDS, load_dataset, make_image_toy, make_synthetic
from fbpc_lab.errors import ConfigurationError, FBPCError, ValidationError
from fbpc_lab.fbpc import FBPCConfig, Pseudocoreset, train_fbpc
from fbpc_lab.models import ArchitectureSpec
from fbpc_lab.posteriors import TrajectoryPool, generate_expert_trajectories, load_pool, save_pool
from fbpc_lab.seeding import derive_key, derive_seed
from fbpc_lab.sghmc_eval import SGHMCConfig, evaluate_ensemble, evaluate_robustness, predictive_probs, sghmc_sample

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3
METHODS = ("fbpc", "fbpc_isotropic", "bpc_fkl", "random")
METRICS_SCHEMA = "fbpc_lab_metrics_v1"
METRIC_FIELDS = ("accuracy", "nll", "mean_individual_nll", "entropy_mean", "entropy_std", "degradation", "n_samples")
KEY_FIELDS = ("method", "ipc", "seed", "architecture", "corruption", "severity")
CSV_HEADER = (METRICS_SCHEMA,) + KEY_FIELDS + METRIC_FIELDS

_ARCH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["family"],
    "properties": {
        "family": {"enum": ["mlp", "convnet-small"]},
        "hidden_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "activation": {"enum": ["relu"]},
        "normalization": {"enum": ["none", "instance", "group", "layer", "batch"]},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": list(SYNTHETIC_KINDS) + ["image_toy", "file"]},
                "n_train": {"type": "integer", "minimum": 1},
                "n_test": {"type": "integer", "minimum": 1},
                "noise": {"type": "number", "minimum": 0},
                "seed": {"type": "integer"},
                "num_classes": {"type": "integer", "minimum": 2},
                "side": {"type": "integer", "minimum": 8, "maximum": 32},
                "n_per_class": {"type": "integer", "minimum": 1},
                "n_test_per_class": {"type": "integer", "minimum": 0},
                "path": {"type": "string"},
            },
        },
        "architectures": {"type": "array", "minItems": 1, "items": _ARCH_SCHEMA},
        "experts": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_traj": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
        "method": {"enum": list(METHODS)},
        "ipc": {"type": "integer", "minimum": 1},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer"}},
        "fbpc": {"type": "object"},
        "bpc_fkl": {"type": "object"},
        "sghmc": {"type": "object"},
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "architectures": {"type": ["array", "null"], "items": _ARCH_SCHEMA},
                "corruptions": {"type": "array", "items": {"type": "string", "pattern": "^[a-z_]+:[1-5]$"}},
                "corruption_intensity": {"type": "number", "minimum": 0},
                "figures": {"type": "boolean"},
            },
        },
        "out": {"type": "string"},
    },
}

DEFAULTS = {
    "dataset": {"kind": "two_moons", "n_train": 1000, "n_test": 1000, "noise": 0.2, "seed": 0},
    "architectures": [{"family": "mlp", "hidden_widths": [32, 32], "normalization": "none"}],
    "experts": {"n_traj": 10, "epochs": 50, "lr": 0.01, "batch_size": 128, "seed": 0},
    "method": "fbpc",
    "ipc": 1,
    "seeds": [0],
    "fbpc": {},
    "bpc_fkl": {},
    "sghmc": {},
    "eval": {"architectures": None, "corruptions": [], "corruption_intensity": 1.0, "figures": True},
    "out": "runs/{method}-ipc{ipc}",
}


# ----------------------------------------------------------------------------
# configuration


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _dataclass_section(cls, values: dict, name: str):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"invalid '{name}' section: {exc}") from exc


def resolve_config(args) -> dict:
    """Defaults, then the config file, then flags; validated against the schema."""
    file_cfg, base_dir = {}, Path.cwd()
    if getattr(args, "config", None):
        path = Path(args.config)
        file_cfg = json.loads(path.read_text())
        if not isinstance(file_cfg, dict):
            raise ConfigurationError(f"{path}: top level must be a JSON object")
        base_dir = path.resolve().parent
    jsonschema.validate(file_cfg, CONFIG_SCHEMA)
    cfg = _merge(DEFAULTS, file_cfg)
    if getattr(args, "seed", None):
        cfg["seeds"] = list(args.seed)
    if getattr(args, "method", None):
        cfg["method"] = args.method
    if getattr(args, "ipc", None) is not None:
        cfg["ipc"] = args.ipc
    if getattr(args, "corrupt", None):
        cfg["eval"]["corruptions"] = list(args.corrupt)
    if getattr(args, "out", None):
        cfg["out"] = args.out
    cfg["out"] = cfg["out"].format(method=cfg["method"], ipc=cfg["ipc"])
    if cfg["dataset"]["kind"] == "file":
        if "path" not in cfg["dataset"]:
            raise ConfigurationError("dataset kind 'file' needs a path")
        p = Path(cfg["dataset"]["path"])
        p = p if p.is_absolute() else base_dir / p
        if not p.is_file():
            raise ConfigurationError(f"dataset file {p} does not exist")
        cfg["dataset"]["path"] = str(p)
    jsonschema.validate(cfg, CONFIG_SCHEMA)
    for spec in cfg["eval"]["corruptions"]:
        kind, _ = spec.split(":")
        if kind not in CORRUPTIONS:
            raise ConfigurationError(f"unknown corruption {kind!r}; expected one of {CORRUPTIONS}")
    # fail early on bad hyperparameter sections
    _dataclass_section(FBPCConfig, cfg["fbpc"], "fbpc")
    _dataclass_section(BPCFKLConfig, cfg["bpc_fkl"], "bpc_fkl")
    _dataclass_section(SGHMCConfig, cfg["sghmc"], "sghmc")
    return cfg


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _short_hash(obj) -> str:
    return hashlib.blake2b(_canonical(obj).encode(), digest_size=5).hexdigest()


def write_snapshot(directory: Path, cfg: dict, command: str) -> None:
    snap = {"command": command, "fbpc_lab_version": __version__, "config": cfg}
    atomic_write_text(Path(directory) / "resolved_config.json", json.dumps(snap, indent=2, sort_keys=True) + "\n")


def build_dataset(ds_cfg: dict):
    kind = ds_cfg["kind"]
    if kind in SYNTHETIC_KINDS:
        return make_synthetic(
            kind,
            ds_cfg.get("n_train", 1000),
            ds_cfg.get("n_test", 1000),
            ds_cfg.get("noise", 0.2),
            ds_cfg.get("seed", 0),
            ds_cfg.get("num_classes", 3),
        )
    if kind == "image_toy":
        kw = {k: ds_cfg[k] for k in ("noise", "n_test_per_class") if k in ds_cfg}
        return make_image_toy(ds_cfg.get("side", 8), ds_cfg.get("num_classes", 4), ds_cfg.get("n_per_class", 250), ds_cfg.get("seed", 0), **kw)
    return load_dataset(ds_cfg["path"])


def build_spec(arch: dict, dataset) -> ArchitectureSpec:
    return ArchitectureSpec(
        family=arch["family"],
        input_shape=dataset.input_shape,
        num_classes=dataset.num_classes,
        hidden_widths=tuple(arch.get("hidden_widths", (32, 32))),
        activation=arch.get("activation", "relu"),
        normalization=arch.get("normalization", "none"),
    )


def cache_root() -> Path:
    env = os.environ.get("FBPC_LAB_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "fbpc_lab"


def pool_directory(cfg: dict, seed: int | None = None) -> Path:
    """``$FBPC_LAB_CACHE/<dataset key>/experts-<hyperparameter key>-seed<seed>``."""
    ds = cfg["dataset"]
    ds_key = f"{ds['kind']}-{_short_hash(ds)}"
    experts = {k: v for k, v in cfg["experts"].items() if k != "seed"}
    seed = cfg["experts"]["seed"] if seed is None else seed
    return cache_root() / ds_key / f"experts-{_short_hash(experts)}-seed{seed}"


# ----------------------------------------------------------------------------
# gen-experts


def cmd_gen_experts(args) -> int:
    cfg = resolve_config(args)
    dataset = build_dataset(cfg["dataset"])
    specs = [build_spec(a, dataset) for a in cfg["architectures"]]
    seeds = list(args.seed) if args.seed else [cfg["experts"]["seed"]]
    e = cfg["experts"]
    for seed in seeds:
        directory = pool_directory(cfg, seed)
        if directory.exists() and any(directory.iterdir()) and not args.force:
            raise ValidationError(f"{directory} already holds a pool; pass --force to overwrite")
        pool = None
        for spec in specs:
            part = generate_expert_trajectories(spec, dataset, e["n_traj"], e["epochs"], e["lr"], seed, e["batch_size"])
            pool = part if pool is None else pool.merge(part)
        save_pool(pool, directory)
        snap = _merge(cfg, {"experts": {"seed": seed}})
        write_snapshot(directory, snap, "gen-experts")
        print(f"wrote {sum(len(v) for v in pool.trajectories.values())} trajectories to {directory}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# train


def save_coreset(path, pc: Pseudocoreset, meta: dict) -> None:
    save_arrays(path, {"u": np.asarray(pc.u), "labels": np.asarray(pc.labels)}, {"kind": "pseudocoreset", "ipc": pc.ipc, **meta})


def load_coreset(path) -> tuple:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "pseudocoreset" or not {"u", "labels"} <= set(arrays):
        raise ValidationError(f"{path} is not a pseudocoreset file")
    return Pseudocoreset(arrays["u"], arrays["labels"], int(meta["ipc"])), meta


def _load_pool_for(cfg: dict, specs) -> TrajectoryPool:
    directory = pool_directory(cfg)
    if not (directory / "manifest.json").exists():
        raise ConfigurationError(
            f"no trajectory pool for {specs[0].spec_id} at {directory}; run 'fbpc-lab gen-experts' with the same config first"
        )
    pool = load_pool(directory)
    for spec in specs:
        if spec.spec_id not in pool.trajectories:
            raise ConfigurationError(f"trajectory pool at {directory} has no experts for {spec.spec_id}; rerun gen-experts")
    return pool


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    dataset = build_dataset(cfg["dataset"])
    specs = [build_spec(a, dataset) for a in cfg["architectures"]]
    method, ipc, out = cfg["method"], cfg["ipc"], Path(cfg["out"])
    pool = None if method == "random" else _load_pool_for(cfg, specs if method != "bpc_fkl" else specs[:1])
    for seed in cfg["seeds"]:
        run_dir = out / f"seed-{seed}"
        if (run_dir / "coreset.fbpc").exists() and not args.force:
            raise ValidationError(f"{run_dir} already holds a coreset; pass --force to overwrite")
        if method == "random":
            pc, log = random_coreset(dataset, ipc, derive_key(seed, "init")), []
        elif method in ("fbpc", "fbpc_isotropic"):
            fc = FBPCConfig(**{**cfg["fbpc"], "isotropic": method == "fbpc_isotropic" or cfg["fbpc"].get("isotropic", False)})
            result = train_fbpc(specs, pool, dataset, fc, seed, ipc=ipc)
            pc, log = result.coreset, result.log
        else:
            result = train_bpc_fkl(specs[0], pool, dataset, BPCFKLConfig(**cfg["bpc_fkl"]), seed, ipc=ipc)
            pc, log = result.coreset, result.log
        save_coreset(run_dir / "coreset.fbpc", pc, {"method": method, "seed": seed, "architectures": [s.spec_id for s in specs]})
        atomic_write_text(run_dir / "train_log.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
        print(f"seed {seed}: wrote {run_dir / 'coreset.fbpc'}")
    write_snapshot(out, cfg, "train")
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval


def _read_metrics(path: Path) -> list:
    """Per-seed rows of an existing metrics file (summary rows are recomputed on write)."""
    if not path.exists():
        return []
    reader = csv.reader(io.StringIO(path.read_text()))
    header = next(reader, None)
    if header is None:
        return []
    if tuple(header) != CSV_HEADER:
        raise ValidationError(f"{path}: metrics schema mismatch (expected header starting with {METRICS_SCHEMA})")
    rows = [dict(zip(header, r)) for r in reader]
    return [r for r in rows if r[METRICS_SCHEMA] == "seed"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summarize(rows: list) -> list:
    """One ``mean±std`` row per (method, ipc, architecture, corruption, severity); std is the population std."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(_fmt(r[k]) for k in KEY_FIELDS if k != "seed"), []).append(r)
    out = []
    for key, members in sorted(groups.items()):
        row = {METRICS_SCHEMA: "summary", **dict(zip([k for k in KEY_FIELDS if k != "seed"], key)), "seed": "all"}
        for f in METRIC_FIELDS:
            vals = [float(m[f]) for m in members if m[f] not in ("", None)]
            row[f] = f"{np.mean(vals):.6g}±{np.std(vals):.6g}" if vals else ""
        out.append(row)
    return out


def write_metrics(path: Path, rows: list) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    for r in rows + summarize(rows):
        writer.writerow({k: _fmt(r.get(k)) for k in CSV_HEADER})
    atomic_write_text(path, buf.getvalue())


def _parse_corruption(text: str) -> tuple:
    kind, _, sev = text.partition(":")
    if kind not in CORRUPTIONS or not sev.isdigit() or not 1 <= int(sev) <= 5:
        raise ConfigurationError(f"--corrupt expects KIND:SEVERITY with KIND in {CORRUPTIONS} and SEVERITY in 1..5, got {text!r}")
    return kind, int(sev)


def _check_coreset(pc: Pseudocoreset, spec: ArchitectureSpec, path) -> None:
    if tuple(pc.u.shape[1:]) != spec.input_shape:
        raise ValidationError(f"{path}: coreset inputs have shape {tuple(pc.u.shape[1:])}, architecture expects {spec.input_shape}")
    if int(np.asarray(pc.labels).max()) >= spec.num_classes:
        raise ValidationError(f"{path}: coreset labels exceed the {spec.num_classes} classes of the dataset")


def _figures(out: Path, dataset, spec, pc, samples, seed) -> list:
    from fbpc_lab import plotting

    fig_dir = out / "figures"
    if dataset.input_shape == (2,):
        path = plotting.plot_coreset_2d(
            fig_dir / f"coreset_seed{seed}.png",
            dataset.train.inputs,
            dataset.train.labels,
            pc,
            predict=lambda g: predictive_probs(spec, samples, g),
            title=f"seed {seed}",
        )
    elif len(dataset.input_shape) == 3:
        path = plotting.plot_coreset_images(fig_dir / f"coreset_seed{seed}.png", pc, title=f"seed {seed}")
    else:
        return []
    return [str(path)]


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    dataset = build_dataset(cfg["dataset"])
    eval_archs = cfg["eval"]["architectures"] or cfg["architectures"][:1]
    specs = [build_spec(a, dataset) for a in eval_archs]
    sg = SGHMCConfig(**cfg["sghmc"])
    corruptions = [_parse_corruption(c) for c in cfg["eval"]["corruptions"]]
    out = Path(cfg["out"])
    rows, report, figures = [], {"runs": []}, []
    for seed in cfg["seeds"]:
        path = out / f"seed-{seed}" / "coreset.fbpc"
        pc, meta = load_coreset(path)
        method = meta.get("method", cfg["method"])
        for spec in specs:
            _check_coreset(pc, spec, path)
            samples = sghmc_sample(spec, pc, sg, derive_key(seed, "sghmc", spec.spec_id))
            clean = evaluate_ensemble(spec, samples, dataset.test)
            base = {"method": method, "ipc": pc.ipc, "seed": seed, "architecture": spec.spec_id}
            rows.append({METRICS_SCHEMA: "seed", **base, **clean.to_dict(), "corruption": "", "severity": ""})
            report["runs"].append({**base, "clean": clean.to_dict(), "corrupted": []})
            for kind, sev in corruptions:
                (r,) = evaluate_robustness(
                    spec, samples, dataset.test, [kind], [sev], derive_seed(seed, "corrupt"), cfg["eval"]["corruption_intensity"]
                )
                rows.append({METRICS_SCHEMA: "seed", **base, **r.to_dict(), "corruption": kind, "severity": sev})
                report["runs"][-1]["corrupted"].append(r.to_dict())
            if cfg["eval"]["figures"] and spec is specs[0]:
                figures += _figures(out, dataset, spec, pc, samples, seed)
            print(f"seed {seed} {spec.spec_id}: accuracy {clean.accuracy:.4f} nll {clean.nll:.4f}")
    metrics_path = out / "metrics.csv"
    fresh = {tuple(_fmt(r[k]) for k in KEY_FIELDS) for r in rows}
    kept = [r for r in _read_metrics(metrics_path) if tuple(r[k] for k in KEY_FIELDS) not in fresh]
    write_metrics(metrics_path, kept + rows)
    report["figures"] = figures
    report["sghmc"] = sg.to_dict()
    atomic_write_text(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_snapshot(out, cfg, "eval")
    return EXIT_OK


# ----------------------------------------------------------------------------
# compare


def _bold_best(rows: list) -> dict:
    """Indices of the best accuracy (max) and NLL (min) within each comparable group."""
    best: dict = {}
    groups: dict = {}
    for i, r in enumerate(rows):
        groups.setdefault((r["ipc"], r["architecture"], r["corruption"], r["severity"]), []).append(i)
    for idx in groups.values():
        best.setdefault("accuracy", set()).update(i for i in idx if rows[i]["acc_mean"] == max(rows[j]["acc_mean"] for j in idx))
        best.setdefault("nll", set()).update(i for i in idx if rows[i]["nll_mean"] == min(rows[j]["nll_mean"] for j in idx))
    return best


def cmd_compare(args) -> int:
    runs = [Path(r) for r in args.runs]
    if len(runs) < 2:
        raise ValidationError("compare needs at least two run directories")
    datasets, expected_seeds, per_run = [], set(), []
    for run in runs:
        snap_path = run / "resolved_config.json"
        if not snap_path.exists():
            raise ValidationError(f"{run} has no resolved_config.json")
        snap = json.loads(snap_path.read_text())
        datasets.append(_canonical(snap["config"]["dataset"]))
        expected_seeds |= set(snap["config"]["seeds"])
        rows = _read_metrics(run / "metrics.csv")
        if not rows:
            raise ValidationError(f"{run} has no evaluated metrics; run 'fbpc-lab eval' first")
        per_run.append(rows)
    if len(set(datasets)) > 1:
        raise ValidationError("runs were produced on different datasets and cannot be compared")
    groups: dict = {}
    owner: dict = {}
    for run, rows in zip(runs, per_run):
        for r in rows:
            key = tuple(r[k] for k in KEY_FIELDS)
            if owner.setdefault(key, run) != run:
                raise ValidationError(f"{owner[key]} and {run} both report {dict(zip(KEY_FIELDS, key))}")
            groups.setdefault((r["method"], int(r["ipc"]), r["architecture"], r["corruption"], r["severity"]), []).append(r)
    table = []
    for (method, ipc, arch, corr, sev), members in sorted(groups.items()):
        seeds = sorted({int(m["seed"]) for m in members})
        acc = np.array([float(m["accuracy"]) for m in members])
        nll = np.array([float(m["nll"]) for m in members])
        deg = [float(m["degradation"]) for m in members if m["degradation"] != ""]
        table.append(
            {
                "method": method,
                "ipc": ipc,
                "architecture": arch,
                "corruption": corr,
                "severity": sev,
                "n_seeds": len(seeds),
                "seeds": " ".join(map(str, seeds)),
                "acc_mean": float(acc.mean()),
                "acc_std": float(acc.std()),
                "nll_mean": float(nll.mean()),
                "nll_std": float(nll.std()),
                "degradation_mean": float(np.mean(deg)) if deg else None,
                "incomplete": "yes" if set(seeds) != expected_seeds else "no",
            }
        )
    out = Path(args.out or "compare")
    fields = list(table[0])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in table:
        writer.writerow({k: _fmt(v) for k, v in r.items()})
    atomic_write_text(out / "compare.csv", buf.getvalue())
    best = _bold_best(table)
    lines = ["| method | ipc | architecture | corruption | Acc (↑) | NLL (↓) | seeds |", "|---|---|---|---|---|---|---|"]
    for i, r in enumerate(table):
        acc = f"{100 * r['acc_mean']:.2f} ± {100 * r['acc_std']:.2f}"
        nll = f"{r['nll_mean']:.4f} ± {r['nll_std']:.4f}"
        acc = f"**{acc}**" if i in best["accuracy"] else acc
        nll = f"**{nll}**" if i in best["nll"] else nll
        corr = f"{r['corruption']}:{r['severity']}" if r["corruption"] else "clean"
        flag = f"{r['n_seeds']}" + (" (incomplete)" if r["incomplete"] == "yes" else "")
        lines.append(f"| {r['method']} | {r['ipc']} | {r['architecture']} | {corr} | {acc} | {nll} | {flag} |")
    atomic_write_text(out / "compare.md", "\n".join(lines) + "\n")
    from fbpc_lab import plotting

    plotting.plot_compare(out / "figures" / "compare.png", [r for r in table if not r["corruption"]] or table)
    write_snapshot(out, {"runs": [str(r) for r in runs], "out": str(out)}, "compare")
    print("\n".join(lines))
    incomplete = [r for r in table if r["incomplete"] == "yes"]
    if incomplete:
        print(f"error: {len(incomplete)} row(s) are missing seeds from {sorted(expected_seeds)}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    # usage errors are validation failures; argparse's own status 2 means divergence here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fbpc-lab", description="Function-space Bayesian pseudocoresets at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, method=True, ipc=True, force=True, corrupt=False, out=True):
        p.add_argument("--config", metavar="PATH", help="JSON configuration file")
        p.add_argument("--seed", metavar="INT", type=int, action="append", help="seed (repeatable); overrides the config's seed list")
        if method:
            p.add_argument("--method", choices=METHODS)
        if ipc:
            p.add_argument("--ipc", metavar="INT", type=int, help="examples per class")
        if force:
            p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if corrupt:
            p.add_argument("--corrupt", metavar="KIND:SEVERITY", action="append", help="also evaluate under this corruption (repeatable)")
        if out:
            p.add_argument("--out", metavar="DIR", help="run directory")

    p = sub.add_parser("gen-experts", help="train expert trajectories into the pool cache")
    common(p, method=False, ipc=False, out=False)
    p.set_defaults(func=cmd_gen_experts)
    p = sub.add_parser("train", help="learn a pseudocoreset per seed")
    common(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", help="SGHMC on the coresets, then test metrics")
    common(p, force=False, corrupt=True)
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("compare", help="consolidate several evaluated runs")
    p.add_argument("runs", nargs="+", metavar="RUN_DIR")
    p.add_argument("--out", metavar="DIR", help="output directory (default ./compare)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except jsonschema.ValidationError as exc:
        print(f"error: invalid configuration: {exc.message} at {'/'.join(map(str, exc.absolute_path)) or '<root>'}", file=sys.stderr)
        return EXIT_VALIDATION
    except FBPCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except json.JSONDecodeError as exc:
        print(f"error: malformed JSON: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
