"""Command-line front end: train, sample, eval, analyze-mi, bench-eot.

Every subcommand reads an optional JSON config file and applies
``--key value`` overrides on top; keys that no command default declares
are rejected rather than ignored, so a typo cannot silently fall back to
a default. All numeric outputs are CSV with a header row.

Exit codes: 0 on success, 1 for usage or configuration problems, 2 for
runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .alignment import solve_eot
from .data import DEFAULT_LAYOUT, Dataset, encode, read_xyz, synthetic_toy_dataset, write_xyz
from .egnn import VectorFieldModel, load_checkpoint
from .geometry import project_zero_com
from .metrics import (
    MiClassifierConfig,
    default_bond_table,
    load_bond_table,
    mi_hh,
    mi_xh,
    stability,
    toy_bond_table,
)
from .paths import ConditionalPath, NoiseSchedule
from .sampling import IntegratorSpec, N_TIME_BINS, discretize_features, sample_batch
from .training import TrainConfig, train_loop

MI_GRID_POINTS = 20


class ConfigError(Exception):
    """A problem the user can fix on the command line."""


# defaults double as the schema: a key absent here is an unknown key
_DATASET_KEYS = {
    "dataset": "toy",
    "dataset_size": 200,
    "dataset_seed": 11,
}

_DEFAULTS = {
    "train": {
        **_DATASET_KEYS,
        "checkpoint": "",
        "log": "",
        "n_layers": 3,
        "hidden_dim": 64,
        "model_seed": 0,
        "batch_size": 16,
        "steps": 5000,
        "learning_rate": 1e-4,
        "sigma_min": 1e-4,
        "path_x": "EOT",
        "path_h": "VP",
        "schedule": "linear",
        "seed": 0,
        "eot_restarts": 1,
        "checkpoint_every": 0,
    },
    "sample": {
        **_DATASET_KEYS,
        "checkpoint": "",
        "out_dir": "samples",
        "n_samples": 10,
        "n_nodes": 0,
        "method": "dopri5",
        "n_steps": 0,
        "rtol": 1e-4,
        "atol": 1e-4,
        "max_nfe": 10_000,
        "seed": 0,
    },
    "eval": {
        "samples": "",
        "bond_table": "default",
        "out": "stability.csv",
    },
    "analyze-mi": {
        **_DATASET_KEYS,
        "out": "mi_curves.csv",
        "n_mc": 2000,
        "seed": 0,
        "mi_draws_per_molecule": 8,
        "mi_steps": 2000,
        "mi_learning_rate": 0.05,
        "mi_test_fraction": 0.2,
    },
    "bench-eot": {
        "sizes": [18],
        "trials": 100,
        "restarts": 1,
        "seed": 0,
        "out": "eot_bench.csv",
    },
}


def _coerce(raw: str):
    """Interpret an override value: JSON when it parses, string otherwise."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _build_config(command: str, config_path, overrides) -> dict:
    cfg = dict(_DEFAULTS[command])
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in loaded.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            cfg[key] = value
    for key, value in overrides:
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r} for {command}")
        cfg[key] = value
    return cfg


def _parse_overrides(extras) -> list:
    pairs = []
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--"):
            raise ConfigError(f"expected --key, got {token!r}")
        if i + 1 >= len(extras):
            raise ConfigError(f"override {token!r} is missing a value")
        pairs.append((token[2:], _coerce(extras[i + 1])))
        i += 2
    return pairs


def _load_dataset(cfg) -> Dataset:
    name = cfg["dataset"]
    if name == "toy":
        return synthetic_toy_dataset(int(cfg["dataset_size"]), seed=int(cfg["dataset_seed"]))
    if not Path(name).exists():
        raise ConfigError(f"dataset path does not exist: {name}")
    return read_xyz(name)


def _bond_table(name):
    if name == "default":
        return default_bond_table()
    if name == "toy":
        return toy_bond_table()
    return load_bond_table(name)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg) -> int:
    if not cfg["checkpoint"]:
        raise ConfigError("train needs a checkpoint path (--checkpoint)")
    dataset = _load_dataset(cfg)
    train_cfg = TrainConfig(
        batch_size=int(cfg["batch_size"]),
        steps=int(cfg["steps"]),
        learning_rate=float(cfg["learning_rate"]),
        sigma_min=float(cfg["sigma_min"]),
        path_x=cfg["path_x"],
        path_h=cfg["path_h"],
        schedule=cfg["schedule"],
        seed=int(cfg["seed"]),
        eot_restarts=int(cfg["eot_restarts"]),
        checkpoint_every=int(cfg["checkpoint_every"]),
    )
    model = VectorFieldModel(
        n_layers=int(cfg["n_layers"]),
        hidden_dim=int(cfg["hidden_dim"]),
        feature_dim=dataset.layout.dim,
        seed=int(cfg["model_seed"]),
    )
    log_path = cfg["log"] or str(Path(cfg["checkpoint"]).with_suffix(".csv"))
    state = train_loop(model, dataset, train_cfg, log_path=log_path, checkpoint_path=cfg["checkpoint"])
    losses = list(state.loss_history)
    tail = float(np.mean(losses)) if losses else float("nan")
    print(f"trained {state.step} steps; windowed loss {tail:.6g}; "
          f"checkpoint {cfg['checkpoint']}; log {log_path}")
    return 0


def cmd_sample(cfg) -> int:
    if not cfg["checkpoint"]:
        raise ConfigError("sample needs a checkpoint path (--checkpoint)")
    try:
        model = load_checkpoint(cfg["checkpoint"])
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from None
    dataset = None
    n_samples = int(cfg["n_samples"])
    if int(cfg["n_nodes"]) > 0:
        node_counts = [int(cfg["n_nodes"])] * n_samples
    else:
        dataset = _load_dataset(cfg)
        node_counts = dataset.sample_sizes(np.random.default_rng(int(cfg["seed"])), n_samples)
    layout = dataset.layout if dataset is not None else DEFAULT_LAYOUT
    if model.feature_dim != layout.dim:
        raise RuntimeError(
            f"checkpoint feature width {model.feature_dim} does not match "
            f"the layout width {layout.dim}"
        )
    spec = IntegratorSpec(
        method=cfg["method"],
        n_steps=int(cfg["n_steps"]) or None,
        rtol=float(cfg["rtol"]),
        atol=float(cfg["atol"]),
        max_nfe=int(cfg["max_nfe"]),
    )
    rng = np.random.default_rng(int(cfg["seed"]))
    molecules, stats = sample_batch(model, n_samples, node_counts, spec, rng)

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, g in enumerate(molecules):
        symbols, charges = discretize_features(g.features, layout=layout)
        write_xyz([encode(symbols, charges, g.coords, layout)], out_dir / f"sample_{i:03d}.xyz", layout)
    _write_csv(out_dir / "nfe.csv", ["sample", "nfe"],
               [(i, n) for i, n in enumerate(stats.nfe_per_sample)])
    edges = np.linspace(0.0, 1.0, N_TIME_BINS + 1)
    _write_csv(out_dir / "nfe_by_interval.csv", ["t_start", "t_end", "evaluations"],
               [(f"{edges[k]:.2f}", f"{edges[k + 1]:.2f}", int(stats.nfe_by_interval[k]))
                for k in range(N_TIME_BINS)])
    print(f"wrote {n_samples} molecules to {out_dir} (nfe_total={stats.nfe_total})")
    return 0


def cmd_eval(cfg) -> int:
    if not cfg["samples"]:
        raise ConfigError("eval needs a samples directory (--samples)")
    root = Path(cfg["samples"])
    files = sorted(root.glob("*.xyz"))
    if not files:
        raise RuntimeError(f"no .xyz files in {root}")
    molecules = []
    for path in files:
        molecules.extend(read_xyz(path).molecules)
    report = stability(molecules, _bond_table(cfg["bond_table"]))
    _write_csv(cfg["out"],
               ["n_molecules", "atom_stable_fraction", "mol_stable_fraction", "unique_fraction"],
               [(report.n_molecules, f"{report.atom_stable_fraction:.6f}",
                 f"{report.mol_stable_fraction:.6f}", f"{report.unique_fraction:.6f}")])
    print(f"{report.n_molecules} molecules: atom {report.atom_stable_fraction:.3f}, "
          f"mol {report.mol_stable_fraction:.3f}, unique {report.unique_fraction:.3f} -> {cfg['out']}")
    return 0


def cmd_analyze_mi(cfg) -> int:
    dataset = _load_dataset(cfg)
    n_mc = int(cfg["n_mc"])
    classifier_cfg = MiClassifierConfig(
        draws_per_molecule=int(cfg["mi_draws_per_molecule"]),
        steps=int(cfg["mi_steps"]),
        learning_rate=float(cfg["mi_learning_rate"]),
        test_fraction=float(cfg["mi_test_fraction"]),
    )
    h_paths = [("mi_hh_ot", ConditionalPath("OT"))]
    for kind in ("linear", "cosine", "polynomial"):
        h_paths.append((f"mi_hh_vp_{kind}", ConditionalPath("VP", schedule=NoiseSchedule(kind))))

    grid = np.linspace(0.0, 1.0, MI_GRID_POINTS)
    seed = int(cfg["seed"])
    columns = {}
    x_path = ConditionalPath("OT")
    columns["mi_xh"] = [
        mi_xh(dataset, x_path, float(t), classifier_cfg, rng=np.random.default_rng(seed)).value
        for t in grid
    ]
    for name, path in h_paths:
        columns[name] = [
            mi_hh(dataset, path, float(t), n_mc, rng=np.random.default_rng(seed)).value
            for t in grid
        ]
    # each curve is reported relative to its own data endpoint (Fig.-5 style)
    for name, values in columns.items():
        top = values[0]
        columns[name] = [v / top for v in values] if top > 0 else values

    names = ["mi_xh"] + [name for name, _ in h_paths]
    rows = [[f"{t:.6f}"] + [f"{columns[n][i]:.6f}" for n in names] for i, t in enumerate(grid)]
    _write_csv(cfg["out"], ["t"] + names, rows)
    print(f"wrote {MI_GRID_POINTS}-point MI curves to {cfg['out']}")
    return 0


def cmd_bench_eot(cfg) -> int:
    trials = int(cfg["trials"])
    if trials < 10:
        raise ConfigError(f"trials must be >= 10, got {trials}")
    sizes = cfg["sizes"]
    if not isinstance(sizes, (list, tuple)) or not sizes:
        raise ConfigError("sizes must be a non-empty list")
    rng = np.random.default_rng(int(cfg["seed"]))
    restarts = int(cfg["restarts"])
    rows = []
    for n in sizes:
        n = int(n)
        iterations = np.empty(trials)
        seconds = np.empty(trials)
        for k in range(trials):
            z = project_zero_com(rng.standard_normal((n, 3)))
            y = project_zero_com(rng.standard_normal((n, 3)))
            started = time.perf_counter()
            plan = solve_eot(z, y, restarts=restarts, rng=rng)
            seconds[k] = time.perf_counter() - started
            iterations[k] = plan.iterations
        rows.append((n, trials,
                     f"{iterations.mean():.4f}", f"{iterations.std(ddof=1):.4f}",
                     f"{seconds.mean() * 1e3:.4f}", f"{seconds.std(ddof=1) * 1e3:.4f}"))
        print(f"N={n}: {iterations.mean():.2f} iterations, {seconds.mean() * 1e3:.3f} ms "
              f"per solve over {trials} trials")
    _write_csv(cfg["out"],
               ["n", "trials", "mean_iterations", "std_iterations", "mean_ms", "std_ms"],
               rows)
    return 0


_COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "analyze-mi": cmd_analyze_mi,
    "bench-eot": cmd_bench_eot,
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; route them to exit code 1
    def error(self, message):
        raise ConfigError(message)


def main(argv=None) -> int:
    if "GEOMFLOW_THREADS" in os.environ:
        threads = os.environ["GEOMFLOW_THREADS"]
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)

    parser = _Parser(prog="geomflow", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", default="", help="JSON config file")
    try:
        args, extras = parser.parse_known_args(argv)
        cfg = _build_config(args.command, args.config, _parse_overrides(extras))
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
