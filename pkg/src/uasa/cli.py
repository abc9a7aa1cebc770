"""Command-line entry point: ``uasa {gen,train,eval,ablate,plot}``.

Configuration is a flat JSON object whose keys are the union of the data
generator, trainer and path settings; ``key=value`` arguments override the
file. Failures print a single ``error: <kind>: <message>`` line on stderr.
"""

import csv
import json
import logging
import os
import sys
from dataclasses import fields, replace

import click
import numpy as np

from . import __version__
from .data import InvalidConfig, ParseError, SynthConfig, generate_synthetic_ccod, load_features, save_features
from .evaluation import (SUITES, evaluate, read_metrics_csv, run_ablation, summarize, write_ablation_csv,
                         write_clusters_csv, write_metrics_csv, write_summary_csv, write_thresholds_csv)
from .trainer import TrainConfig, TrainingDiverged, load_state, save_state, train

OUT_ENV = "UASA_OUT"

PATH_DEFAULTS = {
    "out_dir": "",
    "source_path": "source.csv",
    "target_path": "target.csv",
    "checkpoint": "model.ckpt",
    "metrics": "metrics.csv",
    "plots_dir": "plots",
    "data_format": "csv",
    "seeds": 5,
}

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_OTHER = 2, 3, 4, 1


class ConfigError(ValueError):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


def _defaults():
    d = {}
    for cls in (SynthConfig, TrainConfig):
        for f in fields(cls):
            d[f.name] = getattr(cls(), f.name)
    d.update(PATH_DEFAULTS)
    return d


def valid_keys():
    return sorted(_defaults())


def _coerce(key, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError
                return value.lower() in ("true", "1")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return tuple(int(v) for v in value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError("bad-value", f"{key}={value!r} is not a valid {type(default).__name__}") from None


def _parse_override(text):
    if "=" not in text:
        raise ConfigError("bad-override", f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(config_path=None, overrides=()):
    """Merge defaults, the JSON file and ``key=value`` overrides (in that order)."""
    cfg = _defaults()
    given = {}
    if config_path:
        try:
            with open(config_path) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise OSError(f"cannot read config {config_path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("bad-config", f"{config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("bad-config", f"{config_path}: expected a JSON object")
        given.update(loaded)
    for text in overrides:
        key, value = _parse_override(text)
        given[key] = value
    unknown = sorted(set(given) - set(cfg))
    if unknown:
        raise ConfigError("unknown-key", f"unknown key(s) {', '.join(unknown)}; valid keys: {', '.join(valid_keys())}")
    for key, value in given.items():
        cfg[key] = _coerce(key, value, cfg[key])
    if not cfg["out_dir"]:
        cfg["out_dir"] = os.environ.get(OUT_ENV, "runs")
    for key in ("source_path", "target_path", "checkpoint", "metrics", "plots_dir"):
        if not os.path.isabs(cfg[key]):
            cfg[key] = os.path.join(cfg["out_dir"], cfg[key])
    if cfg["data_format"] not in ("csv", "bin"):
        raise ConfigError("bad-value", f"data_format must be csv or bin, got {cfg['data_format']!r}")
    if cfg["seeds"] < 1:
        raise ConfigError("bad-value", "seeds must be >= 1")
    synth_cfg(cfg)
    train_cfg(cfg)
    return cfg


def synth_cfg(cfg):
    sc = SynthConfig(**{f.name: cfg[f.name] for f in fields(SynthConfig)})
    try:
        sc.validate()
    except InvalidConfig as exc:
        raise ConfigError("invalid-config", str(exc)) from exc
    return sc


def train_cfg(cfg):
    tc = TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})
    try:
        tc.validate()
    except ValueError as exc:
        raise ConfigError("invalid-config", str(exc)) from exc
    return tc


def write_manifest(cfg, command, extra=None):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    snapshot = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}
    manifest = {"command": command, "version": __version__, "seed": cfg["seed"], "config": snapshot}
    manifest.update(extra or {})
    path = os.path.join(cfg["out_dir"], f"manifest_{command}.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _require(*paths):
    for p in paths:
        if not os.path.isfile(p):
            raise FileNotFoundError(f"missing input file {p}")


def _load_data(cfg):
    _require(cfg["source_path"], cfg["target_path"])
    k = cfg["n_id_classes"]
    source = load_features(cfg["source_path"], role="source", n_id_classes=k)
    target = load_features(cfg["target_path"], role="target", n_id_classes=k, expect_dim=source.dim)
    return source, target


def _score_monitor(target, k):
    if not target.has_labels:
        return None
    return lambda state, decisions: evaluate(decisions, target.labels, k).as_row()


def _data_path(path, fmt):
    root, ext = os.path.splitext(path)
    want = ".csv" if fmt == "csv" else ".bin"
    return path if ext == want else root + want


# --- commands ---------------------------------------------------------------

def cmd_gen(cfg):
    source, target = generate_synthetic_ccod(synth_cfg(cfg))
    os.makedirs(cfg["out_dir"], exist_ok=True)
    fmt = cfg["data_format"]
    src_path = _data_path(cfg["source_path"], fmt)
    tgt_path = _data_path(cfg["target_path"], fmt)
    save_features(src_path, source.features, source.labels, fmt)
    save_features(tgt_path, target.features, target.labels, fmt)
    write_manifest(cfg, "gen", {"outputs": [src_path, tgt_path],
                                "source_counts": source.class_counts().tolist(),
                                "target_size": len(target)})
    return f"wrote {len(source)} source and {len(target)} target rows to {src_path}, {tgt_path}"


def cmd_train(cfg):
    tc = train_cfg(cfg)
    source, target = _load_data(cfg)
    state, rows = train(tc, source, target.features, monitor=_score_monitor(target, source.n_classes))
    os.makedirs(os.path.dirname(cfg["checkpoint"]) or ".", exist_ok=True)
    save_state(cfg["checkpoint"], state)
    write_metrics_csv(cfg["metrics"], rows)
    stem = os.path.splitext(cfg["metrics"])[0]
    write_thresholds_csv(stem + "_thresholds.csv", rows)
    write_clusters_csv(stem + "_clusters.csv", rows)
    write_manifest(cfg, "train", {"outputs": [cfg["checkpoint"], cfg["metrics"]]})
    last = rows[-1] if rows else {}
    return f"trained {state.epoch} epochs; final hos={last.get('hos', float('nan')):.4f}"


def cmd_eval(cfg):
    _require(cfg["checkpoint"], cfg["target_path"])
    state = load_state(cfg["checkpoint"])
    k = state.M.shape[1]
    target = load_features(cfg["target_path"], role="target", n_id_classes=k, expect_dim=state.encoder.in_dim)
    decisions, table = state.predict(target.features)
    row = {"epoch": state.epoch}
    if target.has_labels:
        summary = evaluate(decisions, target.labels, k)
        row.update(summary.as_row())
        for flag in summary.flags:
            logging.getLogger(__name__).warning(flag)
    stem = os.path.splitext(cfg["metrics"])[0]
    eval_path = stem + "_eval.csv"
    write_metrics_csv(eval_path, [row])
    pred_path = stem + "_predictions.csv"
    with open(pred_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "entropy", "confidence", "flagged"])
        for i in range(len(decisions.label)):
            w.writerow([i, int(decisions.label[i]), repr(float(decisions.entropy[i])),
                        repr(float(decisions.confidence[i])), int(decisions.flagged[i])])
    write_manifest(cfg, "eval", {"outputs": [eval_path, pred_path], "thresholds": table.o.tolist()})
    return f"os_star={row.get('os_star', float('nan')):.4f} unk={row.get('unk', float('nan')):.4f} " \
           f"hos={row.get('hos', float('nan')):.4f}"


def cmd_ablate(cfg, suite):
    base = train_cfg(cfg)
    synth = synth_cfg(cfg)
    seeds = [cfg["seed"] + i for i in range(cfg["seeds"])]
    os.makedirs(cfg["out_dir"], exist_ok=True)

    def data_fn(seed):
        return generate_synthetic_ccod(replace(synth, seed=seed))

    def progress(row):
        click.echo(f"{row['variant']}\tseed={row['seed']}\thos={row['hos']:.4f}", err=True)

    rows = run_ablation(suite, base, seeds, data_fn, progress)
    path = os.path.join(cfg["out_dir"], f"ablation_{suite}.csv")
    write_ablation_csv(path, rows)
    summary_path = os.path.join(cfg["out_dir"], f"ablation_{suite}_summary.csv")
    write_summary_csv(summary_path, rows)
    write_manifest(cfg, "ablate", {"suite": suite, "seeds": seeds, "outputs": [path, summary_path]})
    return "\n".join(f"{k}\t{m:.4f} +- {s:.4f}" for k, (m, s, _) in summarize(rows).items())


def cmd_plot(cfg):
    from .plotting import export_plots

    _require(cfg["metrics"])
    rows = read_metrics_csv(cfg["metrics"])
    feats = {}
    if os.path.isfile(cfg["checkpoint"]):
        state = load_state(cfg["checkpoint"])
        source, target = _load_data(cfg)
        decisions, _ = state.predict(target.features)
        feats = dict(source_features=state.embed(source.features),
                     target_features=state.embed(target.features),
                     target_labels=decisions.label)
    paths = export_plots(rows, cfg["plots_dir"], **feats)
    write_manifest(cfg, "plot", {"outputs": paths})
    return "wrote " + ", ".join(paths)


# --- click wiring -----------------------------------------------------------

def _run(fn, config_path, overrides, *args):
    try:
        cfg = resolve_config(config_path, overrides)
        message = fn(cfg, *args)
    except ConfigError as exc:
        _fail(exc.kind, exc, EXIT_CONFIG)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        _fail("io", exc, EXIT_IO)
    except ParseError as exc:
        _fail("parse", exc, EXIT_IO)
    except OSError as exc:
        _fail("io", exc, EXIT_IO)
    except TrainingDiverged as exc:
        _fail("diverged", exc, EXIT_DIVERGED)
    except (ValueError, RuntimeError) as exc:
        _fail(type(exc).__name__, exc, EXIT_OTHER)
    if message:
        click.echo(message)


def _fail(kind, exc, code):
    text = " ".join(str(exc).split())
    click.echo(f"error: {kind}: {text}", err=True)
    sys.exit(code)


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                             help="Flat JSON config file.")
overrides_arg = click.argument("overrides", nargs=-1)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="uasa")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Class-imbalanced cross-domain OOD detection experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@config_option
@overrides_arg
def gen(config_path, overrides):
    """Generate a seeded synthetic source/target pair."""
    _run(cmd_gen, config_path, overrides)


@main.command("train")
@config_option
@overrides_arg
def train_command(config_path, overrides):
    """Train on the source/target files; write a checkpoint and metrics CSV."""
    _run(cmd_train, config_path, overrides)


@main.command("eval")
@config_option
@overrides_arg
def eval_command(config_path, overrides):
    """Score a checkpoint on the target file."""
    _run(cmd_eval, config_path, overrides)


@main.command()
@click.argument("suite", type=click.Choice(SUITES))
@config_option
@overrides_arg
def ablate(suite, config_path, overrides):
    """Run an ablation suite over several seeds on synthetic data."""
    _run(cmd_ablate, config_path, overrides, suite)


@main.command()
@config_option
@overrides_arg
def plot(config_path, overrides):
    """Export SVG loss, score and feature plots."""
    _run(cmd_plot, config_path, overrides)


if __name__ == "__main__":
    main()
