"""Command-line entry points.

Every command reads a JSON run configuration (``--config``), applies flag
overrides, writes its outputs under ``--out`` together with
``provenance.json``, and exits 0 on success, 1 on a validation error and 2
on a runtime failure (including a failed oracle).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_store, save_store
from .config import ConfigError, RunConfig, derive_seed, load_config, sync_temperature
from .failure import failure_report
from .inference import argmax_segmentation
from .models import build_model
from .oracle import run_oracle_suite
from .protocols import (PROTOCOLS, SWEEP_COLUMNS, ProtocolResult, chain_key, evaluate_probs,
                        functional_diversity, make_protocol, run_protocol, sweep, write_csv)
from .sampler import ChainDivergedError, select_samples
from .synth import generate_dataset, load_dataset, save_dataset

log = logging.getLogger("sghmcseg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("gen-data", "train", "infer", "calibrate", "diversity", "failures", "oracle", "sweep", "report")
THREADS_ENV = "SGHMCSEG_THREADS"


class RuntimeFailure(RuntimeError):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sghmcseg", description="SGHMC cold-posterior segmentation toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", type=Path, default=None, help="JSON run configuration")
        c.add_argument("--seed", type=int, default=None, help="global seed (u64)")
        c.add_argument("--out", type=Path, default=None, help="output directory")
        c.add_argument("--protocol", choices=PROTOCOLS, default=None)
        c.add_argument("--temperature", type=float, default=None)
        c.add_argument("--samples", type=int, default=None, help="number of samples M at inference")
        c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config entry, e.g. sampler.epochs=60 (value parsed as JSON)")
        c.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    ov = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            ov[k] = json.loads(v)
        except json.JSONDecodeError:
            ov[k] = v
    # dedicated flags win over --set and the file
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        ov["seed"] = args.seed
    if args.out is not None:
        ov["out"] = str(args.out)
    if args.protocol is not None:
        ov["protocol.name"] = args.protocol
    if args.samples is not None:
        if args.samples < 1:
            raise ConfigError("--samples must be >= 1")
        ov["protocol.samples"] = args.samples
    return ov


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, _overrides(args))
    if args.temperature is not None:
        if args.temperature < 0:
            raise ConfigError("--temperature must be >= 0")
        cfg = sync_temperature(cfg, args.temperature)
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _data(cfg: RunConfig, out: Path):
    d = out / "data"
    seed = derive_seed(cfg.seed, "data")
    if (d / "manifest.json").exists():
        ds = load_dataset(d)
        if ds.seed == seed and ds.scene == cfg.scene and \
                {k: len(v[0]) for k, v in ds.splits.items()} == cfg.data.counts():
            return ds
    ds = generate_dataset(cfg.scene, cfg.data.counts(), seed)
    save_dataset(ds, d)
    return ds


def _trained(cfg: RunConfig, out: Path, ds) -> ProtocolResult:
    """Load the protocol's stores from ``out/checkpoints`` or run it and save them."""
    spec = make_protocol(cfg.protocol.name, cfg)
    root = out / "checkpoints" / spec.name
    model, _ = build_model(spec.model)
    if (root / "provenance.json").exists():
        prov = json.loads((root / "provenance.json").read_text())
        # the chains do not depend on how many samples inference draws from them
        keys = [chain_key(spec, cfg.seed, k) for k in range(spec.members)]
        if prov.get("chain_keys") == keys and prov.get("dataset_seed") == ds.seed:
            stores = [load_store(root / f"member_{k}", model.layout, spec.model.config_hash())
                      for k in range(spec.members)]
            return _assemble(spec, model, stores, prov)
    try:
        res = run_protocol(spec, ds, cfg.seed, cfg)
    except ChainDivergedError as exc:
        raise RuntimeFailure(str(exc)) from exc
    for k, store in enumerate(res.stores):
        save_store(store, root / f"member_{k}", spec.model.config_hash(), res.provenance["seeds"]["members"][k]["chain"],
                   spec.sampler.temperature, spec.energy_lam)
    _write_json(root / "provenance.json", res.provenance)
    return res


def _assemble(spec, model, stores, prov) -> ProtocolResult:
    if spec.name in ("vanilla", "mc-dropout"):
        samples = [stores[0].checkpoints[-1].weights]
    elif spec.name == "deep-ensembles":
        samples = [s.checkpoints[-1].weights for s in stores]
    elif spec.name == "sghmc-single":
        last = stores[0].last_cycle()
        samples = select_samples(last, min(spec.samples, len(last)), spec.selection)
    else:
        samples = select_samples(stores[0], spec.samples, spec.selection)
    return ProtocolResult(spec, model, stores, samples, prov)


def _split_rows(cfg, res, ds, splits=("test_in", "test_shift")):
    rows = []
    for split in splits:
        x, y = ds[split]
        ev = evaluate_probs(res.predict(x), y, cfg.eval.n_bins)
        rows.append({"protocol": res.spec.name, "split": split, **{k: v for k, v in ev.summary().items()
                                                                   if k != "dice_per_class"},
                     **{f"dice_{c + 1}": v for c, v in enumerate(ev.summary()["dice_per_class"])}})
    return rows


def cmd_gen_data(cfg, out):
    ds = _data(cfg, out)
    return {"splits": {k: len(v[0]) for k, v in ds.splits.items()}}


def cmd_train(cfg, out):
    ds = _data(cfg, out)
    res = _trained(cfg, out, ds)
    return {"protocol": res.spec.name, "checkpoints": [len(s) for s in res.stores],
            "schedule": res.provenance.get("schedule")}


def cmd_infer(cfg, out):
    ds = _data(cfg, out)
    res = _trained(cfg, out, ds)
    for split in ("test_in", "test_shift"):
        x, _ = ds[split]
        probs = res.predict(x)
        np.save(out / f"probs_{res.spec.name}_{split}.npy", probs.astype(np.float32))
        np.save(out / f"seg_{res.spec.name}_{split}.npy", argmax_segmentation(probs))
    return {"protocol": res.spec.name, "samples": len(res.samples)}


def cmd_calibrate(cfg, out):
    ds = _data(cfg, out)
    res = _trained(cfg, out, ds)
    rows = _split_rows(cfg, res, ds)
    write_csv(rows, out / f"calibration_{res.spec.name}.csv")
    return {"rows": rows}


def cmd_diversity(cfg, out):
    ds = _data(cfg, out)
    res = _trained(cfg, out, ds)
    x, y = ds["val"]
    rep = functional_diversity(res, x, y, n_sigma=cfg.eval.n_sigma)
    _write_json(out / f"diversity_{res.spec.name}.json", rep.to_dict())
    rows = [{"protocol": res.spec.name, "row": lab, "row_mean": float(m)} for lab, m in zip(rep.labels, rep.row_means)]
    write_csv(rows, out / f"diversity_{res.spec.name}.csv")
    return {"mean_distance": rep.mean_distance, "volume": rep.volume}


def cmd_failures(cfg, out):
    ds = _data(cfg, out)
    res = _trained(cfg, out, ds)
    x, y = ds["test_shift"]
    rep = failure_report(res.predict(x), y, list(range(1, cfg.model.classes)), cfg.eval.dice_thresh,
                         cfg.eval.assd_thresh)
    rows = [{"protocol": res.spec.name, **r} for r in rep.rows]
    write_csv(rows, out / f"failures_{res.spec.name}.csv")
    _write_json(out / f"failures_{res.spec.name}.json", {"auc": rep.auc})
    return {"auc": rep.auc}


def cmd_oracle(cfg, out):
    rep = run_oracle_suite(seed=cfg.seed, out=out / "oracle.json")
    if not rep["pass"]:
        raise RuntimeFailure("analytic oracle failed: " + ", ".join(k for k, v in rep["results"].items()
                                                                       if not v["pass"]))
    return {"pass": True}


def cmd_sweep(cfg, out):
    ds = _data(cfg, out)
    rows = sweep(ds, cfg.seed, cfg, cfg.eval.temperatures, (True, False) if cfg.augment.enabled else (False,))
    rows += sweep(ds, cfg.seed, cfg, (cfg.sampler.temperature,), (cfg.augment.enabled,), cfg.eval.lams)
    write_csv(rows, out / "sweep.csv", SWEEP_COLUMNS)
    return {"cells": len(rows)}


def cmd_report(cfg, out):
    """Merge the per-protocol CSVs of a run directory into one CSV per report type."""
    if not out.is_dir():
        raise ConfigError(f"{out} is not a run directory")
    merged = {}
    for kind in ("calibration", "diversity", "failures"):
        files = sorted(p for p in out.glob(f"{kind}_*.csv"))
        rows, cols = [], []
        for f in files:
            with f.open(newline="") as fh:
                r = list(csv.DictReader(fh))
            for row in r:
                for k in row:
                    if k not in cols:
                        cols.append(k)
            rows.extend(r)
        if rows:
            write_csv(rows, out / f"report_{kind}.csv", cols)
            merged[kind] = len(rows)
    return {"merged": merged}


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "calibrate": cmd_calibrate,
    "diversity": cmd_diversity, "failures": cmd_failures, "oracle": cmd_oracle, "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    try:
        cfg = _resolve(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot use output directory {out}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    start = time.time()
    try:
        summary = HANDLERS[args.command](cfg, out)
        status = EXIT_OK
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RuntimeFailure, ChainDivergedError, FloatingPointError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        summary, status = {"error": str(exc)}, EXIT_RUNTIME
    prov = {"command": args.command, "version": __version__, "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(), "seed": cfg.seed, "status": status, "summary": summary}
    _write_json(out / f"provenance_{args.command}.json", prov)
    # wall time kept apart so the hashed provenance stays byte-identical across reruns
    _write_json(out / f"timing_{args.command}.json", {"wall_time_s": time.time() - start})
    return status


if __name__ == "__main__":
    sys.exit(main())
