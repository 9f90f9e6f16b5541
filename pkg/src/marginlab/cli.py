"""Command-line front end: ``marginlab {datagen,train,margins,bounds,verify,experiment}``.

Settings come from built-in defaults, then an optional TOML file
(``--config``), then command-line flags; later sources win. Every run writes
``manifest.json`` into its output directory with the resolved settings, the
seed, the package version and the fingerprints of the datasets it read or
wrote.

Exit codes: 0 success, 1 verification failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from marginlab import __version__
from marginlab import bounds as bnd
from marginlab import data, experiments, margin, network, training, verify
from marginlab.linalg import InvalidInputError
from marginlab.normalize import DegenerateStatisticsError, batch_norm_equivalent
from marginlab.parallel import ordered_map, worker_count

logger = logging.getLogger("marginlab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

REG_FLAGS = {"none": "none", "wd": "weight_decay", "jac": "jacobian", "jac-row": "jacobian_sampled_row"}
LOSS_NAMES = {"cce": "categorical_cross_entropy", "hinge": "hinge"}

DEFAULTS = {
    "seed": 0,
    "out": "marginlab-out",
    "jobs": 1,
    "datagen": {
        "kind": "gmm",
        "m": 500,
        "test_m": 2000,
        "dim": 50,
        "k": 50,
        "separation": 2.5,
        "spread": 1.5,
        "shared_factor": False,
        "radii": [1.0, 2.0],
        "C_M": 4.0 * math.pi,
        "images": "",
        "labels": "",
        "test_images": "",
        "test_labels": "",
        "path": "",
        "test_path": "",
        "standardize": False,
    },
    "data": {"train": "", "test": ""},
    "network": {
        "widths": [64, 64],
        "activation": "relu",
        "head": "softmax",
        "model": "",
        "resume_from": "",
    },
    "train": {
        "batch_size": 128,
        "epochs": 120,
        "schedule": [[0.01, 40], [0.001, 40], [0.0001, 40]],
        "momentum": 0.9,
        "loss": "cce",
        "hinge_margin": 1.0,
        "reg": "none",
        "lambda": 0.0,
        "rows_per_sample": 1,
        "clip_norm": 0.0,
        "weight_norm": False,
        "batch_norm": False,
        "stats_samples": 512,
    },
    "margins": {
        "ball_samples": 64,
        "hull_samples": 256,
        "max_iters": 10,
        "rel_tol": 1e-3,
        "directions": 64,
        "scan_steps": 64,
        "max_radius": 0.0,
        "search_rel_tol": 1e-6,
        "score_scale": "unit",
        "search": True,
        "batch_norm": False,
        "limit": 0,
    },
    "bounds": {
        "covering": "",
        "k": 0,
        "L": 1,
        "C_M": 0.0,
        "delta": 0.5,
        "include_confidence": False,
        "variants": [1, 2, 3, 4],
        "rademacher": True,
    },
    "verify": {"filter": [], "inject_fault": False},
    "experiment": {"name": "", "seeds": [0, 1, 2, 3, 4], "epochs": 0},
}

EXPERIMENTS = ("regularizers", "depth", "penalty")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# -- configuration -----------------------------------------------------------------


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def merge_config(base: dict, override: dict, prefix: str = "") -> dict:
    """Recursively overlay ``override`` on ``base``, rejecting unknown or mistyped keys."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config field {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config field {name!r} must be a section")
            out[key] = merge_config(base[key], value, name + ".")
        else:
            if not _type_ok(base[key], value):
                raise ConfigError(f"config field {name!r} has the wrong type ({type(value).__name__})")
            out[key] = float(value) if isinstance(base[key], float) else value
    return out


def load_config_file(path) -> dict:
    import tomli

    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None


def _flag_overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is None:
            return
        if section is None:
            o[key] = value
        else:
            o.setdefault(section, {})[key] = value

    put(None, "seed", args.seed)
    put(None, "out", args.out)
    put(None, "jobs", args.jobs)
    put("data", "train", getattr(args, "data", None))
    put("data", "test", getattr(args, "test", None))
    put("network", "model", getattr(args, "model", None))
    put("network", "resume_from", getattr(args, "resume_from_model", None))
    if getattr(args, "reg", None) is not None:
        put("train", "reg", args.reg)
    put("train", "lambda", getattr(args, "lam", None))
    put("train", "epochs", getattr(args, "epochs", None))
    if getattr(args, "weight_norm", False):
        put("train", "weight_norm", True)
    if getattr(args, "batch_norm", False):
        put("train", "batch_norm", True)
        put("margins", "batch_norm", True)
    if getattr(args, "filter", None):
        put("verify", "filter", [s for part in args.filter for s in part.split(",") if s])
    if getattr(args, "inject_fault", False):
        put("verify", "inject_fault", True)
    put("experiment", "name", getattr(args, "name", None))
    return o


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        cfg = merge_config(cfg, load_config_file(args.config))
    cfg = merge_config(cfg, _flag_overrides(args))
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg["jobs"] < 1:
        raise ConfigError("field 'jobs' must be at least 1")
    dg = cfg["datagen"]
    if dg["kind"] not in ("gmm", "circles", "mnist", "cifar10"):
        raise ConfigError(f"field 'datagen.kind' must be gmm, circles, mnist or cifar10, got {dg['kind']!r}")
    for key in ("m", "test_m", "dim", "k"):
        if dg[key] < (0 if key == "test_m" else 1):
            raise ConfigError(f"field 'datagen.{key}' must be positive")
    if not dg["spread"] > 0:
        raise ConfigError("field 'datagen.spread' must be positive")
    net = cfg["network"]
    if net["activation"] not in network.ACTIVATIONS:
        raise ConfigError(f"field 'network.activation' must be one of {network.ACTIVATIONS}")
    if net["head"] not in ("softmax", "linear"):
        raise ConfigError("field 'network.head' must be softmax or linear")
    if not net["widths"] or any(not isinstance(w, int) or w < 1 for w in net["widths"]):
        raise ConfigError("field 'network.widths' must list positive integers")
    tr = cfg["train"]
    if tr["reg"] not in REG_FLAGS:
        raise ConfigError(f"field 'train.reg' must be one of {sorted(REG_FLAGS)}")
    if tr["loss"] not in LOSS_NAMES:
        raise ConfigError("field 'train.loss' must be cce or hinge")
    if tr["lambda"] < 0:
        raise ConfigError("field 'train.lambda' must be non-negative")
    if tr["batch_size"] < 1 or tr["epochs"] < 1:
        raise ConfigError("fields 'train.batch_size' and 'train.epochs' must be at least 1")
    for entry in tr["schedule"]:
        if not (isinstance(entry, list) and len(entry) == 2 and entry[0] > 0 and int(entry[1]) >= 1):
            raise ConfigError("field 'train.schedule' must list [rate, epochs] pairs")
    if cfg["margins"]["score_scale"] not in margin.SCORE_SCALES:
        raise ConfigError(f"field 'margins.score_scale' must be one of {tuple(margin.SCORE_SCALES)}")
    b = cfg["bounds"]
    if b["covering"] not in ("", "gmm", "k_sparse", "manifold"):
        raise ConfigError("field 'bounds.covering' must be gmm, k_sparse or manifold")
    if any(v not in (1, 2, 3, 4) for v in b["variants"]):
        raise ConfigError("field 'bounds.variants' may only contain 1, 2, 3, 4")
    if not 0 < b["delta"] < 1:
        raise ConfigError("field 'bounds.delta' must lie in (0, 1)")
    unknown = [n for n in cfg["verify"]["filter"] if n not in verify.SUITES]
    if unknown:
        raise ConfigError(f"field 'verify.filter': unknown suite {unknown[0]!r}; choose from {sorted(verify.SUITES)}")


# -- helpers -----------------------------------------------------------------------


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, subcommand: str, cfg: dict, fingerprints: dict, extra: dict | None = None) -> Path:
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "fingerprints": fingerprints,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _finite(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


def _need_path(value: str, field: str) -> str:
    if not value:
        raise ConfigError(f"field {field!r} is empty; pass a path")
    return value


def _load_data(path: str, field: str) -> data.Dataset:
    return data.load_dataset(_need_path(path, field))


def _load_model(path: str, field: str = "network.model") -> network.NetworkSpec:
    path = _need_path(path, field)
    try:
        return network.load(path)
    except FileNotFoundError:
        raise ConfigError(f"field {field!r}: model file {path} not found") from None
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"field {field!r}: cannot read model {path}: {exc}") from None


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)


def _write_csv(path: Path, rows: list[dict], fields) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# -- datagen -----------------------------------------------------------------------


def generate_datasets(cfg: dict) -> tuple[data.Dataset, data.Dataset | None]:
    dg, seed = cfg["datagen"], cfg["seed"]
    if dg["kind"] == "gmm":
        if dg["k"] > dg["dim"]:
            raise ConfigError("field 'datagen.k' must not exceed 'datagen.dim'")
        spec = data.two_gmm(dg["dim"], dg["k"], dg["separation"], dg["spread"], seed=seed, shared_factor=dg["shared_factor"])
        train = data.sample_gmm(spec, dg["m"], seed=seed)
        test = data.sample_gmm(spec, dg["test_m"], seed=seed + 1_000_003) if dg["test_m"] else None
        return train, test
    if dg["kind"] == "circles":
        if len(dg["radii"]) < 2:
            raise ConfigError("field 'datagen.radii' needs at least two radii")
        spec = data.concentric_circles(tuple(dg["radii"]), dg["C_M"], seed=seed)
        train = data.sample_manifold(spec, dg["m"], seed=seed)
        test = data.sample_manifold(spec, dg["test_m"], seed=seed + 1_000_003) if dg["test_m"] else None
        return train, test
    if dg["kind"] == "mnist":
        train = data.load_mnist(_need_path(dg["images"], "datagen.images"), _need_path(dg["labels"], "datagen.labels"))
        test = data.load_mnist(dg["test_images"], dg["test_labels"]) if dg["test_images"] else None
    else:
        train = data.load_cifar10_bin(_need_path(dg["path"], "datagen.path"), dg["standardize"])
        test = data.load_cifar10_bin(dg["test_path"], dg["standardize"]) if dg["test_path"] else None
    rng = np.random.default_rng(seed)
    if dg["m"] < len(train):
        train = train.subset(np.sort(rng.choice(len(train), dg["m"], replace=False)))
    if test is not None and 0 < dg["test_m"] < len(test):
        test = test.subset(np.sort(rng.choice(len(test), dg["test_m"], replace=False)))
    return train, test


def cmd_datagen(cfg: dict) -> int:
    out = _out_dir(cfg)
    train, test = generate_datasets(cfg)
    prints = {"train": train.fingerprint()}
    data.save_dataset(train, out / "train.mlds")
    if test is not None:
        data.save_dataset(test, out / "test.mlds")
        prints["test"] = test.fingerprint()
    write_manifest(out, "datagen", cfg, prints)
    print(f"wrote {out / 'train.mlds'} ({len(train)} samples, fingerprint {prints['train'][:12]})")
    return EXIT_OK


# -- train -------------------------------------------------------------------------


def train_config(cfg: dict) -> training.TrainConfig:
    t = cfg["train"]
    return training.TrainConfig(
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        seed=cfg["seed"],
        loss=training.LossKind(LOSS_NAMES[t["loss"]], t["hinge_margin"]),
        reg=training.RegKind(REG_FLAGS[t["reg"]], t["lambda"], t["rows_per_sample"]),
        schedule=tuple((float(r), int(n)) for r, n in t["schedule"]),
        momentum=t["momentum"],
        clip_norm=t["clip_norm"] or None,
        weight_norm=t["weight_norm"],
        stats_samples=t["stats_samples"] or None,
    )


def cmd_train(cfg: dict) -> int:
    out = _out_dir(cfg)
    train = _load_data(cfg["data"]["train"], "data.train")
    test = data.load_dataset(cfg["data"]["test"]) if cfg["data"]["test"] else None
    prints = {"train": train.fingerprint()}
    if test is not None:
        prints["test"] = test.fingerprint()
    n = cfg["network"]
    if n["resume_from"]:
        net = _load_model(n["resume_from"], "network.resume_from")
        if net.input_dim != train.input_dim:
            raise ConfigError(f"field 'network.resume_from': model expects {net.input_dim} inputs, data has {train.input_dim}")
    else:
        net = network.init_mlp([train.input_dim, *n["widths"], train.num_classes], n["activation"], n["head"], cfg["seed"])
    tc = train_config(cfg)
    net, history = training.train(net, train, tc, test=test)
    if cfg["train"]["batch_norm"]:
        net = batch_norm_equivalent(net, train.X)
    network.save(net, out / "model.json")
    training.write_history_csv(history, out / "history.csv")
    _write_json(out / "history.json", history)
    write_manifest(out, "train", cfg, prints)
    last = history[-1]
    print(f"trained {tc.epochs} epochs: train_acc={last['train_acc']:.4f} test_acc={last['test_acc']:.4f} -> {out / 'model.json'}")
    return EXIT_OK


# -- margins -----------------------------------------------------------------------


def neighborhood_config(cfg: dict) -> margin.NeighborhoodConfig:
    m = cfg["margins"]
    return margin.NeighborhoodConfig(m["ball_samples"], m["hull_samples"], m["max_iters"], m["rel_tol"], cfg["seed"], m["score_scale"])


def search_config(cfg: dict) -> margin.SearchConfig | None:
    m = cfg["margins"]
    if not m["search"]:
        return None
    return margin.SearchConfig(m["directions"], m["scan_steps"], m["max_radius"] or None, m["search_rel_tol"], seed=cfg["seed"])


def _report_chunk(args):
    net, X, y, hull_data, nb, search, reference, offset = args
    return margin.margin_reports(net, X, y, hull_data, nb, search, reference, index_offset=offset)


def parallel_margin_reports(net, X, y, neighborhood, search, jobs: int = 1) -> list[margin.MarginReport]:
    """Same reports as a serial :func:`margin.margin_reports` call, computed in chunks."""
    n = len(y)
    workers = min(worker_count(jobs), n)
    bounds_ = np.linspace(0, n, workers + 1).astype(int)
    tasks = [(net, X[a:b], y[a:b], X, neighborhood, search, (X, y), int(a)) for a, b in zip(bounds_, bounds_[1:]) if b > a]
    reports = [r for chunk in ordered_map(_report_chunk, tasks, jobs) for r in chunk]
    # The hull sup covers every sample's ball witnesses, so rescale against the global value.
    sups = [r.sup_hull for r in reports if r.applicable]
    if sups:
        hull = max(sups)
        for r in reports:
            if r.applicable:
                r.sup_hull = hull
                r.gamma2_hat = math.inf if hull == 0 else r.score / hull
    return reports


def split_summary(net, ds: data.Dataset, scale: str) -> dict:
    o = margin.scores(net, ds.X, ds.y, scale)
    return {
        "samples": len(ds),
        "accuracy": training.accuracy(net, ds.X, ds.y),
        "min_score": float(np.min(o)),
        "max_jac_spec": float(np.max(network.jacobian_spectral_norms(net, ds.X))),
    }


def cmd_margins(cfg: dict) -> int:
    out = _out_dir(cfg)
    net = _load_model(cfg["network"]["model"])
    train = _load_data(cfg["data"]["train"], "data.train")
    test = data.load_dataset(cfg["data"]["test"]) if cfg["data"]["test"] else None
    prints = {"train": train.fingerprint()}
    if cfg["margins"]["batch_norm"]:
        net = batch_norm_equivalent(net, train.X)
    scale = cfg["margins"]["score_scale"]
    ds = train
    if cfg["margins"]["limit"] and cfg["margins"]["limit"] < len(train):
        ds = train.subset(np.arange(cfg["margins"]["limit"]))
    reports = parallel_margin_reports(net, ds.X, ds.y, neighborhood_config(cfg), search_config(cfg), cfg["jobs"])
    margin.write_margin_csv(reports, ds.y, out / "margins_train.csv")
    _write_json(out / "margins_train.json", [{k: _finite(v) for k, v in asdict(r).items()} for r in reports])
    summary = {
        "spectral_product": margin.weight_norm_product(net, "spectral"),
        "frobenius_product": margin.weight_norm_product(net, "frobenius"),
        "train": split_summary(net, train, scale),
    }
    if test is not None:
        summary["test"] = split_summary(net, test, scale)
        prints["test"] = test.fingerprint()
    rows = [{"split": k, **v} for k, v in summary.items() if isinstance(v, dict)]
    _write_csv(out / "summary.csv", rows, ("split", "samples", "accuracy", "min_score", "max_jac_spec"))
    _write_json(out / "summary.json", summary)
    write_manifest(out, "margins", cfg, prints)
    for r in rows:
        print(f"{r['split']}: min score {r['min_score']:.6g}, max ||J||_2 {r['max_jac_spec']:.6g}")
    return EXIT_OK


# -- bounds ------------------------------------------------------------------------


def covering_from_config(cfg: dict, ds: data.Dataset) -> bnd.CoveringModel:
    b = cfg["bounds"]
    if not b["covering"]:
        if ds.covering is None:
            raise ConfigError("field 'bounds.covering' is empty and the dataset declares no covering model")
        return ds.covering
    if b["k"] < 1:
        raise ConfigError("field 'bounds.k' must be set (intrinsic dimension) when 'bounds.covering' is given")
    try:
        return bnd.CoveringModel(b["covering"], b["k"], b["L"], b["C_M"] or 1.0)
    except InvalidInputError as exc:
        raise ConfigError(f"section 'bounds': {exc}") from None


def cmd_bounds(cfg: dict) -> int:
    out = _out_dir(cfg)
    net = _load_model(cfg["network"]["model"])
    train = _load_data(cfg["data"]["train"], "data.train")
    covering = covering_from_config(cfg, train)
    b = cfg["bounds"]
    scale = cfg["margins"]["score_scale"]
    sups = None
    if any(v in (1, 2) for v in b["variants"]) and np.all(margin.scores(net, train.X, train.y, scale) > 0):
        sups = bnd.estimate_sups(net, train.X, train.y, neighborhood_config(cfg))
    results = [
        bnd.ge_bound_expanded(net, train.X, train.y, v, covering, None, b["delta"], sups, b["include_confidence"], scale)
        for v in b["variants"]
    ]
    rad = bnd.rademacher_reference_bound(net, len(train)) if b["rademacher"] else None
    rows = bnd.bound_rows(results, rad)
    bnd.write_bound_tables(rows, out / "bounds.csv", out / "bounds.json")
    write_manifest(out, "bounds", cfg, {"train": train.fingerprint()}, {"covering": covering.to_dict()})
    for r in rows:
        flag = " (vacuous)" if r["vacuous"] else ""
        print(f"variant {r['variant']}: {r['bound_value']:.6g}{flag}")
    if not all(r.applicable for r in results):
        print(f"bounds inapplicable: {len(results[0].offending)} samples have non-positive score", file=sys.stderr)
    return EXIT_OK


# -- verify ------------------------------------------------------------------------


def _run_suite(args):
    name, seed, fault = args
    return verify.run_suites([name], seed, fault)[0]


def cmd_verify(cfg: dict) -> int:
    out = _out_dir(cfg)
    names = cfg["verify"]["filter"] or list(verify.SUITES)
    results = ordered_map(_run_suite, [(n, cfg["seed"], cfg["verify"]["inject_fault"]) for n in names], cfg["jobs"])
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    _write_json(out / "verify.json", [asdict(r) for r in results])
    write_manifest(out, "verify", cfg, {})
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# -- experiment --------------------------------------------------------------------


def cmd_experiment(cfg: dict) -> int:
    out = _out_dir(cfg)
    e = cfg["experiment"]
    name, seeds = e["name"], list(e["seeds"])
    if name not in EXPERIMENTS:
        raise ConfigError(f"field 'experiment.name' must be one of {EXPERIMENTS}")
    extra = {}
    if name == "regularizers":
        kw = {}
        if e["epochs"]:
            kw["config"] = training.TrainConfig(batch_size=50, epochs=e["epochs"], schedule=experiments._schedule(e["epochs"]), clip_norm=10.0)
        res = experiments.surrogate_regularizer_study(seeds, jobs=cfg["jobs"], **kw)
        rows = [{"seed": s, "reg": r.reg, "lambda": r.lam, "val_acc": r.val_acc, "test_acc": r.test_acc}
                for s, pair in zip(seeds, zip(res.weight_decay, res.jacobian)) for r in pair]
        _write_csv(out / "regularizers.csv", rows, ("seed", "reg", "lambda", "val_acc", "test_acc"))
        wd, jr = res.mean_accuracies
        extra = {"mean_test_acc": {"weight_decay": wd, "jacobian": jr}, "improvement_points": res.improvement_points}
        print(f"weight decay {100 * wd:.2f}%  jacobian {100 * jr:.2f}%  gain {res.improvement_points:+.2f} points")
    elif name == "depth":
        rows = experiments.weight_norm_depth_study(seeds, epochs=e["epochs"] or 30, jobs=cfg["jobs"])
        rows = [asdict(r) for r in rows]
        _write_csv(out / "depth.csv", rows, tuple(rows[0]))
        jac, frob, total = experiments.depth_trend_votes([experiments.DepthRow(**r) for r in rows])
        extra = {"jacobian_nonincreasing": jac, "frobenius_increasing": frob, "comparisons": total}
        print(f"max ||J||_2 non-increasing in {jac}/{total} comparisons; Frobenius product increasing in {frob}/{total}")
    else:
        before, after = experiments.penalty_strength_study(seed=cfg["seed"], epochs=e["epochs"] or 30)
        rows = [{"lambda": 0.0, "mean_jac_frob": before}, {"lambda": 1e6, "mean_jac_frob": after}]
        _write_csv(out / "penalty.csv", rows, ("lambda", "mean_jac_frob"))
        extra = {"reduction": experiments.reduction_factor(before, after)}
        print(f"mean ||J||_F {before:.4g} -> {after:.4g} ({extra['reduction']:.1f}x)")
    _write_json(out / f"{name}.json", {"rows": rows, **extra})
    write_manifest(out, "experiment", cfg, {}, extra)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "margins": cmd_margins,
    "bounds": cmd_bounds,
    "verify": cmd_verify,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with nested sections; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="parallel workers (capped by MARGINLAB_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="marginlab", description="Jacobian-based margin and generalization analysis of small networks.")
    p.add_argument("--version", action="version", version=f"marginlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("datagen", parents=[common], help="generate or import a dataset")

    t = sub.add_parser("train", parents=[common], help="train a network")
    t.add_argument("--data", help="training dataset container")
    t.add_argument("--test", help="test dataset container")
    t.add_argument("--reg", choices=sorted(REG_FLAGS))
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--weight-norm", action="store_true", help="renormalize weight rows after every step")
    t.add_argument("--batch-norm", action="store_true", help="save the row-normalized batch-norm equivalent net")
    t.add_argument("--resume-from-model", help="start from a saved model instead of a fresh init")

    m = sub.add_parser("margins", parents=[common], help="per-sample margin report")
    m.add_argument("--model")
    m.add_argument("--data")
    m.add_argument("--test")
    m.add_argument("--batch-norm", action="store_true", help="analyze the batch-norm equivalent net")

    b = sub.add_parser("bounds", parents=[common], help="expanded generalization-bound table")
    b.add_argument("--model")
    b.add_argument("--data")

    v = sub.add_parser("verify", parents=[common], help="run the property suites")
    v.add_argument("--filter", action="append", help="suite name(s), comma separated")
    v.add_argument("--inject-fault", action="store_true", help="negative control: corrupt the Jacobian")

    e = sub.add_parser("experiment", parents=[common], help="desk-scale experiment tables")
    e.add_argument("name", choices=EXPERIMENTS)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, InvalidInputError, data.FormatError, network.UnsupportedArchitectureError,
            network.DegenerateRowError, DegenerateStatisticsError, FileNotFoundError, ValueError) as exc:
        print(f"marginlab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
