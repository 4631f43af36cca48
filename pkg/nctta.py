import argparse
import configparser
import itertools
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

import report
from console import install_signal_handlers, shutdown_requested
from datagen import (
    MAX_SEVERITY,
    SHIFT_KINDS,
    ShiftSpec,
    apply_shift,
    load_dataset,
    make_clusters,
    meta_to_dict,
    save_dataset,
)
from model import ACTIVATIONS, TrainConfig, init_params, load_checkpoint, predict, save_checkpoint, train_to_tpt
from ncmetrics import misalignment_stats, nc_suite
from ttaengine import LOSS_VARIANTS, METHODS, SCENARIOS, AdaptConfig, Scenario, run_scenario

COMMANDS = ("train", "adapt", "eval", "metrics", "project", "sweep")
DEFAULT_OUT_DIR = "runs"
TRAIN_SET_NAME = "train.ncds"
TEST_SET_NAME = "test.ncds"
CHECKPOINT_NAME = "model.ckpt"
TRACE_NAME = "train_trace.csv"
# Held-out split: same class means, samples drawn from seed + offset
TEST_SAMPLE_SEED_OFFSET = 10_000
PROJECTION_METHODS = ("no_adapt", "tent", "nctta")

REQUIRED_KEYS = (
    ("data", "classes"),
    ("data", "dim"),
    ("data", "spread"),
    ("train", "epochs"),
    ("train", "lr"),
)


class ConfigError(ValueError):
    """Configuration file or flag problem, with the location when known."""

    def __init__(self, message, section=None, key=None, line=None):
        super().__init__(message)
        self.section = section
        self.key = key
        self.line = line


@dataclass
class DataConfig:
    classes: int
    dim: int
    spread: float
    n_per_class: int = 200
    test_n_per_class: int = 250
    radius: Optional[float] = None
    imbalance: float = 1.0
    seed: int = 0


@dataclass
class ScenarioConfig:
    name: str = "mild"
    shift: str = "gaussian_noise"
    severity: int = 3
    severities: tuple = tuple(range(1, MAX_SEVERITY + 1))
    shifts: tuple = ()
    seeds: tuple = (0,)

    @property
    def kinds(self):
        if self.shifts:
            return list(self.shifts)
        return [self.shift]

    def build(self):
        """Scenarios to run: one, or one per kind for a multi-shift mild/bs1 sweep."""
        if self.name == "ctta":
            return [Scenario("ctta", self.shift, self.severity, tuple(self.severities), tuple(self.shifts))]
        return [Scenario(self.name, kind, self.severity) for kind in self.kinds]


@dataclass
class ExperimentConfig:
    data: Optional[DataConfig] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    source: Optional[str] = None

    def snapshot(self):
        return {
            "source": self.source,
            "data": asdict(self.data) if self.data else None,
            "train": asdict(self.train),
            "adapt": asdict(self.adapt),
            "scenario": asdict(self.scenario),
        }


# --- configuration ---

def _int_list(text):
    return tuple(int(part) for part in text.split(",") if part.strip())


def _str_list(text):
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _bool(text):
    states = configparser.ConfigParser.BOOLEAN_STATES
    if text.lower() not in states:
        raise ValueError(f"not a boolean: {text!r}")
    return states[text.lower()]


def _optional_float(text):
    if text.lower() in ("", "auto", "none"):
        return None
    return float(text)


_SCHEMA = {
    "data": {
        "classes": int,
        "dim": int,
        "spread": float,
        "n_per_class": int,
        "test_n_per_class": int,
        "radius": _optional_float,
        "imbalance": float,
        "seed": int,
    },
    "train": {
        "epochs": int,
        "lr": float,
        "hidden": _int_list,
        "batch_size": int,
        "momentum": float,
        "weight_decay": float,
        "post_zero_epochs": int,
        "max_epochs": int,
        "seed": int,
        "activation": str,
        "feature_activation": str,
    },
    "adapt": {
        "alpha": float,
        "epsilon": float,
        "k": int,
        "gamma_ent": _optional_float,
        "tau_ent": _optional_float,
        "nu": float,
        "eta": float,
        "tau_margin": float,
        "loss_variant": str,
        "update_policy": str,
        "lr": float,
        "batch_size": int,
        "method": str,
        "ent_weight": float,
        "nc_weight": float,
        "use_filter": _bool,
        "use_weight": _bool,
        "test_stats": str,
        "stats_momentum": float,
    },
    "scenario": {
        "name": str,
        "shift": str,
        "severity": int,
        "severities": _int_list,
        "shifts": _str_list,
        "seeds": _int_list,
    },
}


def _key_lines(path):
    """Line number of every section header and key in an INI file."""
    lines = {}
    section = None
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text[0] in "#;":
                continue
            if text.startswith("[") and text.endswith("]"):
                section = text[1:-1].strip()
                lines[(section, None)] = number
            elif "=" in text:
                lines[(section, text.split("=", 1)[0].strip())] = number
    return lines


def load_config(path):
    """Read an experiment configuration.
    Args:
        path: INI file with [data] [train] [adapt] [scenario] sections
    Returns: ExperimentConfig
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}", line=getattr(e, "lineno", None)) from e
    lines = _key_lines(path)

    values = {section: {} for section in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            line = lines.get((section, None))
            raise ConfigError(
                f"{path}:{line}: unknown section [{section}]; expected one of {', '.join(_SCHEMA)}",
                section=section,
                line=line,
            )
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}:{line}: unknown key {section}.{key}", section, key, line)
            try:
                values[section][key] = _SCHEMA[section][key](raw.strip())
            except (ValueError, TypeError) as e:
                raise ConfigError(
                    f"{path}:{line}: bad value for {section}.{key}: {raw!r} ({e})", section, key, line
                ) from e

    missing = [f"{s}.{k}" for s, k in REQUIRED_KEYS if k not in values[s]]
    if missing:
        section, key = missing[0].split(".")
        raise ConfigError(f"{path}: missing required key {', '.join(missing)}", section, key)

    try:
        data = DataConfig(**values["data"])
        train = TrainConfig(**values["train"])
        for tag in (train.activation, train.feature_activation):
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}; expected one of {', '.join(ACTIVATIONS)}")
        adapt = AdaptConfig(**values["adapt"]).validate(data.classes)
        scenario = ScenarioConfig(**values["scenario"])
        for built in scenario.build():
            built.segments(0)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e
    return ExperimentConfig(data, train, adapt, scenario, os.path.abspath(path))


def _split_kinds(text):
    kinds = list(SHIFT_KINDS) if text == "all" else _str_list(text)
    for kind in kinds:
        if kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind {kind!r}; expected one of {', '.join(SHIFT_KINDS)} or 'all'")
    return kinds


def apply_overrides(cfg, args):
    """Command-line flags take precedence over the file."""
    train, adapt, scenario = cfg.train, cfg.adapt, cfg.scenario
    if args.seed is not None:
        train = replace(train, seed=args.seed)
        scenario = replace(scenario, seeds=(args.seed,))
    if args.lr is not None:
        if args.command == "train":
            train = replace(train, lr=args.lr)
        else:
            adapt = replace(adapt, lr=args.lr)
    if args.variant:
        adapt = replace(adapt, loss_variant=args.variant)
    if args.scenario:
        scenario = replace(scenario, name=args.scenario)
    if args.severity is not None:
        scenario = replace(scenario, severity=args.severity)
    if args.severities:
        try:
            scenario = replace(scenario, severities=_int_list(args.severities), shifts=())
        except ValueError as e:
            raise ConfigError(f"--severities must be a comma list of integers, got {args.severities!r}") from e
    if args.shift:
        kinds = _split_kinds(args.shift)
        if len(kinds) == 1:
            scenario = replace(scenario, shift=kinds[0], shifts=())
        else:
            scenario = replace(scenario, shifts=tuple(kinds))
    return replace(cfg, train=train, adapt=adapt, scenario=scenario)


def _methods(args, default):
    if not args.method:
        return list(default)
    methods = _str_list(args.method)
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"Unknown method: {method}")
    return list(methods)


# --- sweep grammar ---

_INT_FIELDS = {f.name for f in fields(AdaptConfig) if f.type is int}
_BOOL_FIELDS = {"use_filter", "use_weight"}
_STR_FIELDS = {"loss_variant", "update_policy", "method", "test_stats"}


def _sweep_values(key, text):
    if "|" in text or key in _STR_FIELDS or key in _BOOL_FIELDS:
        parts = [p.strip() for p in text.split("|")]
        if key in _STR_FIELDS:
            return parts
        if key in _BOOL_FIELDS:
            return [_bool(p) for p in parts]
        if key in _INT_FIELDS:
            return [int(p) for p in parts]
        return [float(p) for p in parts]
    bounds = text.split(":")
    if len(bounds) == 1:
        return [int(text) if key in _INT_FIELDS else float(text)]
    if len(bounds) not in (2, 3):
        raise ValueError(f"range must be start:stop or start:stop:step, got {text!r}")
    if key in _INT_FIELDS:
        start, stop = int(bounds[0]), int(bounds[1])
        step = int(bounds[2]) if len(bounds) == 3 else 1
        if step <= 0 or stop < start:
            raise ValueError(f"empty range {text!r}")
        return list(range(start, stop + 1, step))
    start, stop = float(bounds[0]), float(bounds[1])
    step = float(bounds[2]) if len(bounds) == 3 else 1.0
    if step <= 0 or stop < start:
        raise ValueError(f"empty range {text!r}")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 12) for i in range(count)]


def parse_sweep(spec):
    """Expand key=values[,key=values...] into the cartesian grid of cells.
    Values are an inclusive range start:stop[:step] or a list a|b|c.
    Returns: list of dicts of AdaptConfig overrides, first key varying slowest
    """
    allowed = {f.name for f in fields(AdaptConfig)}
    axes = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ConfigError(f"sweep item {item!r} is not key=values")
        key, text = (part.strip() for part in item.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"cannot sweep unknown adapt key {key!r}", section="adapt", key=key)
        try:
            axes.append((key, _sweep_values(key, text)))
        except ValueError as e:
            raise ConfigError(f"bad sweep values for {key}: {e}", section="adapt", key=key) from e
    if not axes:
        raise ConfigError("empty sweep specification")
    keys = [key for key, _ in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(values for _, values in axes))]


# --- commands ---

def _checkpoint_path(args, out_dir):
    return args.checkpoint[0] if args.checkpoint else os.path.join(out_dir, CHECKPOINT_NAME)


def _dataset_path(args, out_dir):
    return args.dataset or os.path.join(out_dir, TEST_SET_NAME)


def _shift_tag(spec):
    return "source" if spec is None else f"{spec.kind}_{spec.severity}"


def _eval_shift(cfg, args):
    """ShiftSpec requested for eval/metrics, or None for the unshifted set."""
    if not args.shift:
        return None
    kinds = _split_kinds(args.shift)
    if len(kinds) != 1:
        raise ConfigError("eval and metrics take a single --shift kind")
    return ShiftSpec(kinds[0], cfg.scenario.severity, cfg.scenario.seeds[0])


def cmd_train(cfg, out_dir):
    """Generate the datasets, train into TPT and write the checkpoint and trace."""
    if cfg.data is None:
        raise ConfigError("train needs --config with [data] and [train] sections")
    data, train = cfg.data, cfg.train
    manifest = report.RunManifest.start("train", cfg.snapshot(), [train.seed])

    train_set = make_clusters(
        data.classes, data.dim, data.n_per_class, data.spread, data.seed,
        radius=data.radius, imbalance=data.imbalance,
    )
    test_set = make_clusters(
        data.classes, data.dim, data.test_n_per_class, data.spread, data.seed,
        sample_seed=data.seed + TEST_SAMPLE_SEED_OFFSET, radius=data.radius, imbalance=data.imbalance,
    )
    for dataset, name in ((train_set, TRAIN_SET_NAME), (test_set, TEST_SET_NAME)):
        path, sidecar = save_dataset(dataset, os.path.join(out_dir, name))
        manifest.add_artifact(path, "dataset")
        manifest.add_artifact(sidecar, "dataset_meta")
    manifest.dataset = meta_to_dict(train_set.meta)

    print(
        f"Training MLP {data.dim}->{'->'.join(str(h) for h in train.hidden)}->{data.classes} "
        f"on {len(train_set)} samples (seed {train.seed}, lr {train.lr}, >= {train.epochs} epochs)"
    )
    params, norm = init_params(
        data.dim, train.hidden, data.classes, train.seed, train.activation, train.feature_activation
    )
    params, norm, trace = train_to_tpt(params, norm, train_set, train)

    checkpoint = save_checkpoint(params, norm, os.path.join(out_dir, CHECKPOINT_NAME))
    manifest.add_artifact(checkpoint, "checkpoint")
    manifest.add_artifact(report.write_trace_csv(trace, os.path.join(out_dir, TRACE_NAME)), "train_trace")
    print(f"Checkpoint written to {checkpoint}")

    if trace.records:
        manifest.summary = {
            "epochs_run": len(trace.records),
            "first_zero_error_epoch": trace.first_zero_error_epoch,
            "initial_mean_gfca": trace.records[0].mean_gfca,
            "final": asdict(trace.records[-1]),
        }
    report.publish(out_dir, manifest, "train_manifest.json", interrupted=trace.interrupted)
    return trace


def _load_inputs(args, out_dir):
    checkpoint = _checkpoint_path(args, out_dir)
    dataset = _dataset_path(args, out_dir)
    params, norm = load_checkpoint(checkpoint)
    source = load_dataset(dataset)
    if source.meta.dim != params.dims[0] or source.num_classes != params.dims[2]:
        raise ValueError(
            f"dataset {dataset} (D={source.meta.dim}, K={source.num_classes}) does not fit "
            f"checkpoint {checkpoint} (D={params.dims[0]}, K={params.dims[2]})"
        )
    return params, norm, source, checkpoint, dataset


def cmd_eval(cfg, args, out_dir):
    """Offline accuracy of a checkpoint on a (possibly shifted) dataset."""
    params, norm, d, checkpoint, dataset = _load_inputs(args, out_dir)
    spec = _eval_shift(cfg, args)
    if spec is not None:
        d = apply_shift(d, spec)
    manifest = report.RunManifest.start("eval", cfg.snapshot(), cfg.scenario.seeds[:1])
    manifest.dataset = meta_to_dict(d.meta)
    out = predict(params, norm, d.x)
    accuracy = float(np.mean(np.argmax(out.P, axis=1) == d.y))
    print(f"Accuracy on {os.path.basename(dataset)} ({_shift_tag(spec)}): {accuracy:.4f} ({len(d)} samples)")
    manifest.summary = {"checkpoint": checkpoint, "shift": _shift_tag(spec), "accuracy": accuracy, "n": len(d)}
    report.publish(out_dir, manifest, f"eval_{_shift_tag(spec)}_manifest.json")
    return accuracy


def cmd_metrics(cfg, args, out_dir):
    """Per-sample FCA metrics plus the collapse report of a checkpoint on a dataset."""
    params, norm, d, checkpoint, dataset = _load_inputs(args, out_dir)
    spec = _eval_shift(cfg, args)
    if spec is not None:
        d = apply_shift(d, spec)
    tag = _shift_tag(spec)
    manifest = report.RunManifest.start("metrics", cfg.snapshot(), cfg.scenario.seeds[:1])
    manifest.dataset = meta_to_dict(d.meta)

    out = predict(params, norm, d.x)
    stats = misalignment_stats(out.H, params.classifier, d.y, out.P, skip_degenerate=True)
    nc = nc_suite(out.H, d.y, params.classifier)
    summary = {
        "checkpoint": checkpoint,
        "shift": tag,
        "accuracy": float(np.mean(np.argmax(out.P, axis=1) == d.y)),
        "nc": asdict(nc),
        "misalignment": report.misalignment_summary(stats),
    }
    csv_path = report.write_metrics_csv(stats, os.path.join(out_dir, f"metrics_{tag}.csv"))
    manifest.add_artifact(csv_path, "metrics")
    report_path = report.write_json(summary, os.path.join(out_dir, f"nc_report_{tag}.json"))
    manifest.add_artifact(report_path, "nc_report")
    manifest.summary = summary

    print(f"NC1 {nc.nc1:.5f}  NC2 {nc.nc2:.5f}  NC3 {nc.nc3:.5f}  NC4 {nc.nc4:.4f}  mean G-FCA {nc.nc3plus:.5f}")
    correct, wrong = stats.correct, stats.wrong
    print(f"Correct ({correct.count}): G-FCA {correct.mean_gfca}  P-FCA {correct.mean_pfca}")
    if wrong.defined:
        print(f"Wrong ({wrong.count}): G-FCA {wrong.mean_gfca:.5f}  P-FCA {wrong.mean_pfca:.5f}")
    else:
        print("Wrong (0): no misclassified samples, statistics undefined")
    report.publish(out_dir, manifest, f"metrics_{tag}_manifest.json")
    return summary


def _scenario_tag(scenario):
    if scenario.name == "ctta" and scenario.shifts:
        return f"ctta_{'-'.join(scenario.shifts)}_{scenario.severity}"
    if scenario.name == "ctta":
        return f"ctta_{scenario.shift}_{'-'.join(str(s) for s in scenario.severities)}"
    return f"{scenario.name}_{scenario.shift}_{scenario.severity}"


def _run_summary(log):
    final_gfca = next((s.mean_gfca for s in reversed(log.steps) if s.mean_gfca is not None), None)
    return {
        "method": log.method,
        "scenario": log.scenario,
        "seed": log.seed,
        "accuracy": log.accuracy,
        "final_mean_gfca": final_gfca,
        "segments": [asdict(s) for s in log.segments],
        "interrupted": log.interrupted,
    }


def cmd_adapt(cfg, args, out_dir):
    """Stream the shifted test set through every requested method and seed."""
    params, norm, source, checkpoint, dataset = _load_inputs(args, out_dir)
    if source.is_shifted:
        raise ValueError(f"{dataset} is already shifted; adapt applies shifts to an unshifted dataset")
    methods = _methods(args, [cfg.adapt.method])
    scenarios = cfg.scenario.build()
    tag = f"{'-'.join(methods)}_{_scenario_tag(scenarios[0]) if len(scenarios) == 1 else 'multishift'}"
    manifest = report.RunManifest.start("adapt", cfg.snapshot(), cfg.scenario.seeds)
    manifest.dataset = meta_to_dict(source.meta)
    manifest.summary["checkpoint"] = checkpoint

    runs = []
    interrupted = False
    for scenario, method, seed in itertools.product(scenarios, methods, cfg.scenario.seeds):
        if shutdown_requested():
            interrupted = True
            break
        print(f"Adapting with {method} on {scenario.describe()}, seed {seed}")
        log = run_scenario(params, norm, source, scenario, replace(cfg.adapt, method=method), seed)
        name = f"steps_{method}_{_scenario_tag(scenario)}_s{seed}.csv"
        manifest.add_artifact(report.write_steps_csv(log.steps, os.path.join(out_dir, name)), "steps")
        runs.append(_run_summary(log))
        interrupted = interrupted or log.interrupted
        print(f"  stream accuracy {log.accuracy:.4f}")

    mean_accuracy = {}
    for method in methods:
        accs = [r["accuracy"] for r in runs if r["method"] == method]
        if accs:
            mean_accuracy[method] = float(np.mean(accs))
            print(f"{method}: mean accuracy {mean_accuracy[method]:.4f} over {len(accs)} run(s)")
    manifest.summary.update({"runs": runs, "mean_accuracy": mean_accuracy})

    if len(scenarios) > 1:
        rows = []
        for method in methods:
            per_kind = []
            for scenario in scenarios:
                accs = [r["accuracy"] for r in runs if r["method"] == method and r["scenario"] == scenario.describe()]
                worst = [r["segments"][0]["worst_class_accuracy"] for r in runs
                         if r["method"] == method and r["scenario"] == scenario.describe() and r["segments"]]
                if accs:
                    per_kind.append(float(np.mean(accs)))
                    rows.append({
                        "method": method,
                        "shift": scenario.shift,
                        "severity": scenario.severity,
                        "accuracy": per_kind[-1],
                        "worst_class_accuracy": float(np.mean(worst)) if worst else None,
                    })
            if per_kind:
                rows.append({
                    "method": method,
                    "shift": "average",
                    "severity": scenarios[0].severity,
                    "accuracy": float(np.mean(per_kind)),
                    "worst_class_accuracy": None,
                })
        table = report.write_table_csv(rows, os.path.join(out_dir, f"shift_summary_{tag}.csv"))
        manifest.add_artifact(table, "shift_summary")
        manifest.summary["shift_summary"] = rows

    report.publish(out_dir, manifest, f"adapt_{tag}_manifest.json", interrupted=interrupted)
    return runs


def cmd_sweep(cfg, args, out_dir):
    """One adaptation run per grid cell and seed; a table of cell results."""
    if not args.sweep:
        raise ConfigError("sweep needs --sweep SPEC, e.g. alpha=0:1:0.25,k=1:4")
    cells = parse_sweep(args.sweep)
    params, norm, source, checkpoint, dataset = _load_inputs(args, out_dir)
    method = _methods(args, [cfg.adapt.method])[0]
    scenario = cfg.scenario.build()[0]
    classes = source.num_classes
    for cell in cells:
        replace(cfg.adapt, method=method, **cell).resolved(classes).validate(classes)
    print(f"Sweeping {len(cells)} cells x {len(cfg.scenario.seeds)} seed(s) with {method} on {scenario.describe()}")

    manifest = report.RunManifest.start("sweep", cfg.snapshot(), cfg.scenario.seeds)
    manifest.dataset = meta_to_dict(source.meta)
    rows = []
    interrupted = False
    for index, cell in enumerate(cells):
        if shutdown_requested():
            interrupted = True
            break
        adapt = replace(cfg.adapt, method=method, **cell)
        accs, gfcas = [], []
        for seed in cfg.scenario.seeds:
            log = run_scenario(params, norm, source, scenario, adapt, seed, verbose=False)
            name = f"sweep_{index:03d}_s{seed}_steps.csv"
            manifest.add_artifact(report.write_steps_csv(log.steps, os.path.join(out_dir, name)), "steps")
            summary = _run_summary(log)
            accs.append(summary["accuracy"])
            if summary["final_mean_gfca"] is not None:
                gfcas.append(summary["final_mean_gfca"])
            interrupted = interrupted or log.interrupted
        row = {"cell": index, **cell, "accuracy": float(np.mean(accs)),
               "final_mean_gfca": float(np.mean(gfcas)) if gfcas else None}
        rows.append(row)
        print(f"  cell {index + 1}/{len(cells)} {cell}: accuracy {row['accuracy']:.4f}")

    table = report.write_table_csv(rows, os.path.join(out_dir, "sweep_cells.csv"))
    manifest.add_artifact(table, "sweep_cells")
    manifest.summary = {"checkpoint": checkpoint, "method": method, "scenario": scenario.describe(), "cells": rows}
    report.publish(out_dir, manifest, "sweep_manifest.json", interrupted=interrupted)
    return rows


def cmd_project(cfg, args, out_dir):
    """Shared 2-D PCA of the streamed features of several methods (and extra checkpoints)."""
    params, norm, source, checkpoint, dataset = _load_inputs(args, out_dir)
    methods = _methods(args, PROJECTION_METHODS)
    scenario = cfg.scenario.build()[0]
    seed = cfg.scenario.seeds[0]
    manifest = report.RunManifest.start("project", cfg.snapshot(), [seed])
    manifest.dataset = meta_to_dict(source.meta)

    runs = {}
    for method in methods:
        log = run_scenario(params, norm, source, scenario, replace(cfg.adapt, method=method), seed, keep_features=True)
        runs[method] = (log.features, log.feature_ids, log.feature_labels, log.feature_predictions)
    shifted = apply_shift(source, scenario.segments(seed)[0])
    for extra in (args.checkpoint or [])[1:]:
        extra_params, extra_norm = load_checkpoint(extra)
        out = predict(extra_params, extra_norm, shifted.x)
        tag = f"checkpoint:{os.path.splitext(os.path.basename(extra))[0]}"
        runs[tag] = (out.H, np.arange(len(shifted)), shifted.y, np.argmax(out.P, axis=1))

    dump = report.project_features(runs, seed)
    path = report.write_projection_csv(dump, os.path.join(out_dir, f"projection_{_scenario_tag(scenario)}.csv"))
    manifest.add_artifact(path, "projection")
    manifest.summary = {
        "checkpoint": checkpoint,
        "scenario": scenario.describe(),
        "silhouette": dump.silhouettes,
        "explained_variance_ratio": dump.explained_variance_ratio,
    }
    for tag, score in dump.silhouettes.items():
        print(f"{tag}: silhouette {score if score is None else f'{score:.4f}'}")
    report.publish(out_dir, manifest, f"projection_{_scenario_tag(scenario)}_manifest.json")
    return dump


# --- command line ---

def _print_help():
    """Print detailed help information about all available commands."""
    help_text = f"""
nctta {report.TOOL_VERSION} - neural-collapse test-time adaptation desk lab

AVAILABLE COMMANDS:

    train       Generate train/test clusters from [data], train the MLP into the
                terminal phase of training, write model.ckpt and train_trace.csv

    eval        Offline accuracy of a checkpoint on a dataset (optionally shifted
                with --shift/--severity)

    metrics     Per-sample G-FCA/P-FCA/entropy CSV and NC1-NC4 report JSON

    adapt       Stream a shifted test set through one or more methods
                (--method no_adapt,bn_adapt,tent,nctta), one steps CSV per run

    sweep       Grid of adaptation runs over [adapt] keys (--sweep SPEC)

    project     Shared 2-D PCA of the features of several methods plus
                per-method silhouette scores

OPTIONS:
    --config PATH           INI file with [data] [train] [adapt] [scenario] sections
    --out DIR               Output directory (default: {DEFAULT_OUT_DIR})
    --seed N                Seed for training, stream order and shifts
    --checkpoint PATH       Checkpoint (default: OUT/{CHECKPOINT_NAME}); project accepts several
    --dataset PATH          Dataset file (default: OUT/{TEST_SET_NAME})
    --method LIST           Comma-separated methods: {', '.join(METHODS)}
    --variant NAME          Alignment loss: {', '.join(LOSS_VARIANTS)}
    --scenario NAME         {', '.join(SCENARIOS)}
    --shift KIND            {', '.join(SHIFT_KINDS)}, a comma list, or 'all'
    --severity N            1..{MAX_SEVERITY}
    --severities LIST       Continual severity sequence, e.g. 1,2,3,4,5
    --lr X                  Learning rate (training for train, adaptation otherwise)
    --sweep SPEC            key=start:stop[:step] or key=a|b|c, comma separated

EXAMPLES:

  python nctta.py train --config configs/reference.ini --out runs
  python nctta.py metrics --out runs --shift gaussian_noise --severity 3
  python nctta.py adapt --config configs/reference.ini --method no_adapt,tent,nctta
  python nctta.py adapt --scenario ctta --severities 1,2,3,4,5 --method nctta
  python nctta.py sweep --sweep alpha=0:1:0.25,k=1:4

Set DEBUG=1 for diagnostic output.
"""
    print(help_text)


def _parse_arguments():
    """Parse command-line arguments."""
    parser = argparse.ArgumentParser(
        description="Neural-collapse test-time adaptation desk lab.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        add_help=False,
    )
    parser.add_argument("command", nargs="?", choices=COMMANDS)
    parser.add_argument("--help", "-h", action="store_true", help="Show detailed help message.")
    parser.add_argument("--config", help="Experiment configuration file.")
    parser.add_argument("--out", default=DEFAULT_OUT_DIR, help="Output directory.")
    parser.add_argument("--seed", type=int, help="Seed override.")
    parser.add_argument("--checkpoint", action="append", help="Checkpoint path (repeatable for project).")
    parser.add_argument("--dataset", help="Dataset path.")
    parser.add_argument("--method", help="Comma-separated adaptation methods.")
    parser.add_argument("--variant", choices=LOSS_VARIANTS, help="Alignment loss variant.")
    parser.add_argument("--scenario", choices=SCENARIOS, help="Streaming scenario.")
    parser.add_argument("--shift", help="Shift kind, comma list, or 'all'.")
    parser.add_argument("--severity", type=int, help="Shift severity 1..5.")
    parser.add_argument("--severities", help="Severity sequence for ctta.")
    parser.add_argument("--lr", type=float, help="Learning rate override.")
    parser.add_argument("--sweep", help="Sweep specification.")
    return parser.parse_args()


def _print_header():
    print("=" * 60)
    print(" " * 26 + "nctta")
    print(" " * 10 + "Neural-Collapse Test-Time Adaptation Lab")
    print(" " * 24 + f"Version {report.TOOL_VERSION}")
    print("=" * 60)
    print()


_HANDLERS = {
    "eval": cmd_eval,
    "metrics": cmd_metrics,
    "adapt": cmd_adapt,
    "sweep": cmd_sweep,
    "project": cmd_project,
}


def main():
    install_signal_handlers()

    try:
        args = _parse_arguments()

        if args.help or not args.command:
            _print_help()
            sys.exit(0)

        _print_header()
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = apply_overrides(cfg, args)
        os.makedirs(args.out, exist_ok=True)

        if args.command == "train":
            cmd_train(cfg, args.out)
        else:
            _HANDLERS[args.command](cfg, args, args.out)

        # Exit cleanly (code 0) even if shutdown was requested during processing
        sys.exit(0)
    except KeyboardInterrupt:
        print("\nInterrupted by user, exiting gracefully...")
        sys.exit(130)
    except Exception as e:
        print(f"Error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
