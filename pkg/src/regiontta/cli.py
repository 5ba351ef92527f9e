"""Command-line entry point.

Configuration is a flat mapping of dotted keys (``adapt.alpha``,
``data.spread``, ...).  Values resolve as built-in defaults, then an optional
``--config`` JSON file, then command-line flags.  Every command writes the
fully resolved mapping to ``<out>/config.json`` before doing any work.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, SourceConfig, run_adaptation, train_source
from .clusterstat import clean_probability, compute_stats, partition
from .data import LabeledSet, ShiftSpec, generate_shift, load_csv, pool_sources
from .memory import FeatureQueue
from .metrics import calibration, evaluate_probs
from .model import ModelConfig, forward_features, load_checkpoint, predict_proba, save_checkpoint
from .pseudolabel import soft_vote_batch

log = logging.getLogger("regiontta")

COMMANDS = ("train-source", "adapt", "ablate", "sweep", "eval", "export-embeddings")
COMPONENTS = ("cr", "ccp", "div", "inst", "prt")
SWEEPABLE = ("alpha", "n_exclude", "k_vote", "warm_threshold", "tau")
DEFAULT_GRID = "pl;cr;cr,ccp;cr,ccp,div;cr,ccp,div,inst;cr,ccp,div,inst,prt"


class ConfigError(Exception):
    pass


def _section(prefix: str, cls, skip=()) -> dict:
    return {f"{prefix}.{f.name}": f.default for f in fields(cls) if f.name not in skip}


def default_config() -> dict:
    cfg = {"seed": 1}
    cfg.update(_section("data", ShiftSpec, skip=("seed", "translation")))
    cfg.update({"data.source_csv": "", "data.target_csv": ""})
    cfg.update(_section("model", ModelConfig, skip=("d_in", "n_classes")))
    cfg.update(_section("source", SourceConfig))
    cfg.update(_section("adapt", AdaptConfig, skip=("seed",)))
    cfg.update({"run.out": "", "run.checkpoint": "", "run.stats_dump": False,
                "run.export_embeddings": False, "run.post_update": False,
                "run.grid": DEFAULT_GRID, "run.param": "", "run.values": ""})
    return cfg


def _coerce(key: str, raw, default):
    """Convert ``raw`` to the type of ``default``."""
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = raw if isinstance(raw, (list, tuple)) else str(raw).split(",")
            return tuple(float(v) for v in items)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {type(default).__name__}") from None


def _leaf_aliases(keys) -> dict[str, str]:
    leaves: dict[str, list[str]] = {}
    for k in keys:
        leaves.setdefault(k.rsplit(".", 1)[-1], []).append(k)
    return {leaf: ks[0] for leaf, ks in leaves.items() if len(ks) == 1}


def build_parser() -> argparse.ArgumentParser:
    defaults = default_config()
    aliases = _leaf_aliases(defaults)
    reverse = {v: k for k, v in aliases.items()}
    parser = argparse.ArgumentParser(prog="regiontta", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat dotted-key JSON config file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key in defaults:
            names = [f"--{key}"]
            leaf = reverse.get(key)
            if leaf and leaf != key:
                names.append(f"--{leaf}")
                if "_" in leaf:
                    names.append(f"--{leaf.replace('_', '-')}")
            p.add_argument(*names, dest=key, default=None, metavar="V")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--config: {exc}") from None
        for key, value in loaded.items():
            if key not in cfg:
                raise ConfigError(f"{key}: unknown config key")
            cfg[key] = _coerce(key, value, cfg[key])
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _coerce(key, value, cfg[key])
    if not cfg["run.out"]:
        raise ConfigError("run.out: an output directory is required")
    return cfg


def _section_values(cfg: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def shift_spec(cfg: dict) -> ShiftSpec:
    vals = {k: v for k, v in _section_values(cfg, "data").items() if not k.endswith("_csv")}
    return ShiftSpec(seed=cfg["seed"], **vals)


def adapt_config(cfg: dict) -> AdaptConfig:
    acfg = AdaptConfig(seed=cfg["seed"], **_section_values(cfg, "adapt"))
    try:
        acfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return acfg


def model_config(cfg: dict, d_in: int, n_classes: int) -> ModelConfig:
    return ModelConfig(d_in=d_in, n_classes=n_classes, **_section_values(cfg, "model"))


def _load_csv_field(cfg: dict, key: str) -> LabeledSet:
    paths = [p for p in cfg[key].split(",") if p.strip()]
    sets = []
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"{key}: no such file {p!r}")
        try:
            sets.append(load_csv(p))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    try:
        return pool_sources(sets) if len(sets) > 1 else sets[0]
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _synthetic(cfg: dict) -> tuple[LabeledSet, LabeledSet]:
    try:
        return generate_shift(shift_spec(cfg))
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from None


def resolve_source(cfg: dict) -> tuple[LabeledSet, int]:
    """Source set and the class count a fresh model should have."""
    if cfg["data.source_csv"]:
        source = _load_csv_field(cfg, "data.source_csv")
        if not source.has_labels:
            raise ConfigError("data.source_csv: source rows must all be labeled")
        return source, source.n_classes()
    return _synthetic(cfg)[0], cfg["data.n_classes"]


def resolve_target(cfg: dict) -> LabeledSet:
    if cfg["data.target_csv"]:
        return _load_csv_field(cfg, "data.target_csv")
    return _synthetic(cfg)[1]


def labeled_target(cfg: dict) -> LabeledSet:
    """Target rows that carry a label; accuracy needs ground truth."""
    target = resolve_target(cfg)
    if not target.has_labels:
        log.warning("dropping %d unlabeled target rows", int((target.labels < 0).sum()))
        target = target.subset(target.labels >= 0)
    if len(target) < 2:
        raise ConfigError("data.target_csv: need at least two labeled target rows")
    return target


def _value(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_value(row.get(c)) for c in columns])


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_value) + "\n")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _source_model(cfg: dict, source: LabeledSet, n_classes: int, out: Path):
    """Load ``run.checkpoint`` or, when it is unset, train a source model into ``out``."""
    mcfg = model_config(cfg, source.dim, n_classes)
    if cfg["run.checkpoint"]:
        return _load_checked(cfg, source.dim, n_classes)
    scfg = SourceConfig(**_section_values(cfg, "source"))
    params, history = train_source(source, mcfg, scfg, seed=cfg["seed"])
    save_checkpoint(out / "source", params, mcfg, cfg["seed"])
    write_csv(out / "train_log.csv", history)
    return params, mcfg


def _load_checked(cfg: dict, d_in: int, n_classes: int):
    path = Path(cfg["run.checkpoint"])
    if not path.with_suffix(".json").is_file() or not path.with_suffix(".bin").is_file():
        raise ConfigError(f"run.checkpoint: no checkpoint at {str(path)!r}")
    try:
        params, mcfg, _ = load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"run.checkpoint: {exc}") from None
    if mcfg.d_in != d_in or mcfg.n_classes < n_classes:
        raise ConfigError(
            f"run.checkpoint: model expects d_in={mcfg.d_in}, n_classes={mcfg.n_classes}; "
            f"data has width {d_in} and {n_classes} classes")
    return params, mcfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ["overall_acc", "per_class_acc", "ece", "mce",
                  "noise_acc", "noise_recall", "noise_precision"]
LOSS_COLUMNS = ["iteration", "l_cr", "l_ccp", "l_div", "l_prt", "l_inst", "l_ctr", "total",
                "n_clean", "n_noisy"]
REGION_COLUMNS = ["iteration", "n_clean", "n_noisy", "voting",
                  "noise_acc", "noise_recall", "noise_precision"]


def cmd_train_source(cfg: dict) -> int:
    out = _out_dir(cfg)
    source, n_classes = resolve_source(cfg)
    mcfg = model_config(cfg, source.dim, n_classes)
    scfg = SourceConfig(**_section_values(cfg, "source"))
    params, history = train_source(source, mcfg, scfg, seed=cfg["seed"])
    ckpt = save_checkpoint(out / "source", params, mcfg, cfg["seed"])
    write_csv(out / "train_log.csv", history)
    probs = predict_proba(params, source.inputs, mcfg.tau_cls)
    write_json(out / "summary.json", {"checkpoint": str(ckpt), **evaluate_probs(probs, source.labels)})
    log.info("source checkpoint written to %s", ckpt)
    return 0


def _adapt_once(cfg: dict, params, mcfg, target: LabeledSet, out: Path | None):
    acfg = adapt_config(cfg)
    result = run_adaptation(params, target, acfg, mcfg, keep_stats=cfg["run.stats_dump"],
                            post_update=cfg["run.post_update"])
    if out is None:
        return result
    if acfg.mode == "online":
        cols = ["iteration", "batch_acc"] + (["post_batch_acc"] if cfg["run.post_update"] else [])
        cols += METRIC_COLUMNS + ["voting"]
    else:
        cols = ["epoch", "iteration"] + METRIC_COLUMNS
    write_csv(out / "metrics.csv", result.metrics, cols)
    write_csv(out / "losses.csv", result.losses, LOSS_COLUMNS)
    write_csv(out / "regions.csv", result.regions, REGION_COLUMNS)
    if cfg["run.stats_dump"]:
        write_csv(out / "stats.csv", result.stats,
                  ["iteration", "k", "sigma", "population", "clean_fraction"])
    save_checkpoint(out / "adapted", result.params, mcfg, cfg["seed"])
    save_checkpoint(out / "momentum", result.momentum, mcfg, cfg["seed"])
    if cfg["run.export_embeddings"]:
        write_embeddings(out / "embeddings.csv", result.params, mcfg, target, acfg)
    write_json(out / "summary.json", {
        "mode": acfg.mode, "source": result.source_metrics, "final": result.final_metrics,
        "voting_since": result.voting_since,
    })
    return result


def cmd_adapt(cfg: dict) -> int:
    out = _out_dir(cfg)
    if not cfg["run.checkpoint"]:
        raise ConfigError("run.checkpoint: a source checkpoint is required")
    target = labeled_target(cfg)
    params, mcfg = _load_checked(cfg, target.dim, target.n_classes())
    result = _adapt_once(cfg, params, mcfg, target, out)
    log.info("adapted: source %.4f -> final %.4f", result.source_metrics["overall_acc"],
             result.final_metrics["overall_acc"])
    return 0


def parse_grid(text: str) -> list[tuple[str, ...]]:
    rows, seen = [], set()
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = tuple(p.strip() for p in chunk.split(",") if p.strip() and p.strip() != "pl")
        unknown = [p for p in parts if p not in COMPONENTS]
        if unknown:
            raise ConfigError(f"run.grid: unknown component(s) {unknown}; choose from pl,{','.join(COMPONENTS)}")
        key = tuple(c for c in COMPONENTS if c in parts)
        if key in seen:
            print(f"warning: duplicate grid row {','.join(('pl',) + key)} dropped", file=sys.stderr)
            continue
        seen.add(key)
        rows.append(key)
    if not rows:
        raise ConfigError("run.grid: no ablation rows given")
    return rows


def ablation_config(cfg: dict, row: tuple[str, ...]) -> dict:
    """Table-5 style row: ``pl`` alone trains pseudo-label CE on every sample."""
    c = dict(cfg)
    on = set(row)
    c["adapt.gammas"] = (1.0, float("ccp" in on), float("div" in on),
                         float(bool(on & {"inst", "prt"})))
    c["adapt.use_inst"] = "inst" in on
    c["adapt.use_prt"] = "prt" in on
    if "cr" not in on:
        c["adapt.alpha"] = 0.0
    return c


def cmd_ablate(cfg: dict) -> int:
    out = _out_dir(cfg)
    grid = parse_grid(cfg["run.grid"])
    source, n_classes = resolve_source(cfg)
    target = labeled_target(cfg)
    params, mcfg = _source_model(cfg, source, max(n_classes, target.n_classes()), out)
    rows = []
    for row in grid:
        rcfg = ablation_config(cfg, row)
        res = _adapt_once(rcfg, params, mcfg, target, None)
        rec = {"pl": 1, **{c: int(c in row) for c in COMPONENTS},
               "source_acc": res.source_metrics["overall_acc"],
               "overall_acc": res.final_metrics["overall_acc"],
               "per_class_acc": res.final_metrics["per_class_acc"]}
        rows.append(rec)
        log.info("ablation %s: %.4f", ",".join(("pl",) + row), rec["overall_acc"])
        write_csv(out / "ablation.csv", rows)
    return 0


def cmd_sweep(cfg: dict) -> int:
    out = _out_dir(cfg)
    param = cfg["run.param"]
    if param not in SWEEPABLE:
        raise ConfigError(f"run.param: must be one of {', '.join(SWEEPABLE)}")
    key = f"adapt.{param}"
    raw = [v.strip() for v in cfg["run.values"].split(",") if v.strip()]
    if not raw:
        raise ConfigError("run.values: no values given")
    values = [_coerce("run.values", v, cfg[key]) for v in raw]
    source, n_classes = resolve_source(cfg)
    target = labeled_target(cfg)
    params, mcfg = _source_model(cfg, source, max(n_classes, target.n_classes()), out)
    rows = []
    for v in values:
        c = dict(cfg)
        c[key] = v
        res = _adapt_once(c, params, mcfg, target, None)
        rows.append({"value": v, "overall_acc": res.final_metrics["overall_acc"],
                     "per_class_acc": res.final_metrics["per_class_acc"]})
        write_csv(out / "sweep.csv", rows, ["value", "overall_acc", "per_class_acc"])
    return 0


def cmd_eval(cfg: dict) -> int:
    out = _out_dir(cfg)
    if not cfg["run.checkpoint"]:
        raise ConfigError("run.checkpoint: a checkpoint is required")
    target = labeled_target(cfg)
    params, mcfg = _load_checked(cfg, target.dim, target.n_classes())
    probs = predict_proba(params, target.inputs, mcfg.tau_cls)
    summary = evaluate_probs(probs, target.labels)
    table, _, _ = calibration(probs.max(axis=1), probs.argmax(axis=1) == target.labels)
    write_json(out / "eval.json", summary)
    write_csv(out / "reliability.csv", table.rows())
    print(json.dumps(summary, sort_keys=True))
    return 0


def write_embeddings(path: Path, params, mcfg: ModelConfig, data: LabeledSet,
                     acfg: AdaptConfig) -> None:
    """Features with soft-voted labels, clean probabilities and regions.

    The queue holds every exported row, so each row votes among its own
    nearest neighbours including itself.
    """
    z = forward_features(params, data.inputs).value
    probs = predict_proba(params, data.inputs, mcfg.tau_cls)
    queue = FeatureQueue(max(len(data), 1), mcfg.d_feat, mcfg.n_classes).push(z, probs)
    k = min(acfg.k_vote, len(queue))
    p_hat, y_hat = soft_vote_batch(z, queue, k)
    stats = compute_stats(z, p_hat, sigma_min=acfg.sigma_min)
    clean = clean_probability(z, y_hat, stats).clean
    mask = partition(clean, acfg.alpha)
    rows = []
    for i in range(len(data)):
        row = {f"z{j}": z[i, j] for j in range(z.shape[1])}
        row.update(pseudo_label=int(y_hat[i]), region="clean" if mask[i] else "noisy",
                   clean_prob=clean[i], label=int(data.labels[i]))
        rows.append(row)
    cols = [f"z{j}" for j in range(z.shape[1])] + ["pseudo_label", "region", "clean_prob", "label"]
    write_csv(path, rows, cols)


def cmd_export_embeddings(cfg: dict) -> int:
    out = _out_dir(cfg)
    if not cfg["run.checkpoint"]:
        raise ConfigError("run.checkpoint: a checkpoint is required")
    target = resolve_target(cfg)
    params, mcfg = _load_checked(cfg, target.dim, target.n_classes())
    write_embeddings(out / "embeddings.csv", params, mcfg, target, adapt_config(cfg))
    return 0


HANDLERS = {
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = _out_dir(cfg)
        write_json(out / "config.json", {k: cfg[k] for k in sorted(cfg)})
        adapt_config(cfg)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
