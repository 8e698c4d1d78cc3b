"""Command-line entry point: ``implicitreg <subcommand> [flags]``.

Exit codes: 0 success, 1 domain error (divergence, failed check, missing
data), 2 usage error. Every random choice derives from ``--seed``.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import convexnn, data, hardness, loss, model, optim, sweep
from .numerics import Rng

SCHEMA_VERSION = "1"
log = logging.getLogger("implicitreg")


class DomainError(Exception):
    pass


def _write_json(doc, path):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise DomainError(f"{path}: file not found") from exc


def _sweep_config(doc) -> sweep.SweepConfig:
    known = {f.name for f in fields(sweep.SweepConfig)}
    return sweep.SweepConfig(**{k: v for k, v in doc.items() if k in known})


def cmd_train(args):
    doc = _read_json(args.config) if args.config else {}
    cfg = _sweep_config({**doc, "H_grid": [doc.get("H", 32)],
                         "variants": [doc.get("variant", "original")]})
    H, lam = doc.get("H", 32), float(doc.get("lam", 0.0))
    rng = Rng(args.seed)
    splits = sweep.load_base_data(cfg.dataset, rng.child(0), args.data_dir)
    variant = cfg.variants[0]
    splits = sweep.prepare_variant(cfg, variant, splits, rng.child(1))
    train_ds, val_ds, test_ds = splits
    p0 = model.init(train_ds.d, H, train_ds.k, cfg.init_sigma, rng.child(2))
    opt = optim.OptState.fresh(p0, step=cfg.step, momentum=cfg.momentum,
                               batch_size=min(cfg.batch_size, train_ds.n))
    reg = loss.RegConfig(lam, "l2_weight_decay" if lam > 0 else "none")
    try:
        res = optim.train(p0, train_ds, reg, cfg.stopping(), rng.child(3), val_ds, opt)
    except optim.DivergenceError as exc:
        raise DomainError(str(exc)) from exc

    def errors(p):
        return {"train": loss.zero_one_error(p, train_ds),
                "validation": loss.zero_one_error(p, val_ds),
                "test": loss.zero_one_error(p, test_ds)}

    _write_json({"schema": f"implicitreg-train/{SCHEMA_VERSION}", "H": H, "lam": lam,
                 "variant": variant, "epochs_run": res.epochs_run, "converged": res.converged,
                 "best_epoch": res.best_epoch, "final": errors(res.params),
                 "earlystop": errors(res.best_params), "history": res.history}, args.out)
    if args.checkpoint:
        model.save_checkpoint(res.params, args.checkpoint)
    return 0


def cmd_sweep(args):
    if not args.config:
        raise DomainError("sweep needs --config")
    cfg = sweep.SweepConfig.from_json(args.config)
    records = sweep.run_sweep(cfg, seed=args.seed, workers=args.workers, data_dir=args.data_dir)
    sweep.emit_csv(records, args.out or "sweep.csv")
    if args.aggregate:
        sweep.emit_aggregate_csv(sweep.aggregate(records), args.aggregate)
    bad = sum(r.diverged for r in records)
    if bad:
        log.error("%d of %d cells diverged", bad, len(records))
        return 1
    return 0


def cmd_censor(args):
    doc = _read_json(args.config) if args.config else {}
    cfg = _sweep_config(doc)
    rng = Rng(args.seed)
    splits = sweep.load_base_data(cfg.dataset, rng.child(0), args.data_dir)
    union = data.concat(list(splits))
    try:
        relabeled, teacher = data.censor(union, cfg.H0, rng.child(1), sigma=cfg.init_sigma,
                                         stop=cfg.stopping())
    except optim.DivergenceError as exc:
        raise DomainError(f"teacher training diverged: {exc}") from exc
    changed = int(np.sum(relabeled.labels != union.labels))
    _write_json({"schema": f"implicitreg-censor/{SCHEMA_VERSION}", "H0": cfg.H0, "n": union.n,
                 "disagreements": changed,
                 "teacher_error_on_censored": loss.zero_one_error(teacher, relabeled),
                 "labels": relabeled.labels.tolist()}, args.out)
    if args.checkpoint:
        model.save_checkpoint(teacher, args.checkpoint)
    return 0


def cmd_noise(args):
    doc = _read_json(args.labels)
    labels = doc["labels"] if isinstance(doc, dict) else doc
    k = args.k or (doc.get("k") if isinstance(doc, dict) else None) or (max(labels) + 1)
    ds = data.LabeledDataset(np.zeros((len(labels), 1)), labels, k, "labels")
    noisy = data.add_label_noise(ds, args.fraction, Rng(args.seed))
    changed = np.flatnonzero(noisy.labels != ds.labels)
    _write_json({"schema": f"implicitreg-noise/{SCHEMA_VERSION}", "k": k,
                 "fraction": args.fraction, "changed": changed.tolist(),
                 "labels": noisy.labels.tolist()}, args.out)
    return 0


def cmd_convexnn(args):
    doc = _read_json(args.instance)
    try:
        X = np.asarray(doc["X"], dtype=np.float64)
        y = np.asarray(doc["y"], dtype=np.float64)
        lam = float(doc["lambda"])
    except KeyError as exc:
        raise DomainError(f"{args.instance}: missing field {exc}") from exc
    lib_spec = doc.get("library", {})
    lib = convexnn.sample_library(X.shape[1], int(lib_spec.get("m", 64)),
                                  lib_spec.get("scheme", "gaussian_normalized"), Rng(args.seed))
    sol = convexnn.solve_l1(lib, X, y, lam, tol=float(doc.get("tol", 1e-9)),
                            max_iter=int(doc.get("max_iter", 100000)))
    _write_json({"schema": f"implicitreg-convexnn/{SCHEMA_VERSION}", "v": sol.v.tolist(),
                 "units": lib.units.tolist(), "objective": sol.objective,
                 "kkt_residual": sol.kkt_residual, "iterations": sol.iterations,
                 "converged": sol.converged}, args.out)
    return 0 if sol.converged else 1


def cmd_halfspace(args):
    if args.normals_file:
        with open(args.normals_file) as f:
            text = f.read()
    elif args.normals:
        text = args.normals
    else:
        raise DomainError("give --normals or --normals-file")
    try:
        hs = hardness.parse_normals(text)
    except ValueError as exc:
        raise DomainError(str(exc)) from exc
    rep = hardness.verify_exhaustive(hs, workers=args.workers)
    print(f"D={rep.D} k={rep.k} points={rep.points} members={rep.members} "
          f"violations={len(rep.violations)}")
    for x, reason in rep.violations:
        print(f"  x={x}: {reason}")
    if args.out:
        _write_json({"schema": f"implicitreg-halfspace/{SCHEMA_VERSION}", **asdict(rep)}, args.out)
    return 0 if rep.ok else 1


def cmd_balance(args):
    if not args.checkpoint:
        raise DomainError("balance needs --checkpoint")
    p = model.load_checkpoint(args.checkpoint)
    if p.k != 1:
        raise DomainError(f"balance works on single-output networks, checkpoint has k={p.k}")
    b = model.balance(p)
    l2 = loss.RegConfig(1.0, "l2_weight_decay")
    l1 = loss.RegConfig(1.0, "l1_top")
    if args.out:
        model.save_checkpoint(b, args.out)
    print(json.dumps({"l2_penalty_before": loss.penalty(p, l2),
                      "l2_penalty_after": loss.penalty(b, l2),
                      "l1_path_penalty": loss.penalty(model.normalize_to_unit(p), l1)},
                     sort_keys=True))
    return 0


def cmd_gradcheck(args):
    err = optim.gradient_check(Rng(args.seed), trials=args.trials)
    print(f"max relative gradient error: {err:.3e}")
    return 0 if err < 1e-6 else 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    common.add_argument("--out", help="output path (default: stdout, or sweep.csv for sweep)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker processes (default: all cores)")
    common.add_argument("--data-dir", help=f"dataset directory (default ${data.DATA_DIR_ENV}, "
                                           "then ./data)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="implicitreg", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help, epilog):
        s = sub.add_parser(name, parents=[common], help=help, description=help,
                           epilog=f"Output schema version {SCHEMA_VERSION}. {epilog}")
        s.set_defaults(func=func)
        return s

    s = add("train", cmd_train, "train one network",
            "JSON config: SweepConfig fields plus H, lam, variant. Writes a JSON report "
            "with final/early-stopping errors and per-epoch history.")
    s.add_argument("--config", help="JSON config file")
    s.add_argument("--checkpoint", help="write final parameters here")

    s = add("sweep", cmd_sweep, "run a network-size sweep",
            "Writes one CSV row per cell with columns " + ",".join(sweep.CSV_COLUMNS)
            + f" under a '# schema: {sweep.CSV_SCHEMA}' line. Exit 1 if any cell diverged.")
    s.add_argument("--config", help="JSON SweepConfig file")
    s.add_argument("--aggregate", help="also write per-(variant, H) means/stds here")

    s = add("censor", cmd_censor, "relabel a dataset with a small trained network",
            "JSON config: SweepConfig fields (dataset, H0, optimizer). Writes the censored "
            "labels and disagreement count.")
    s.add_argument("--config", help="JSON config file")
    s.add_argument("--checkpoint", help="write the teacher parameters here")

    s = add("noise", cmd_noise, "flip a fraction of labels",
            "Input JSON: a list of labels or {\"labels\": [...], \"k\": K}. "
            "Writes the noisy labels and changed indices.")
    s.add_argument("--labels", required=True, help="JSON labels file")
    s.add_argument("--fraction", type=float, default=0.05)
    s.add_argument("--k", type=int, help="number of classes (default: from file)")

    s = add("convexnn", cmd_convexnn, "solve an l1-regularized convex neural net",
            "Instance JSON: X, y, lambda, optional library {scheme, m}, tol, max_iter. "
            "Writes v, units, objective, kkt_residual, iterations, converged. "
            "Exit 1 if not converged.")
    s.add_argument("--instance", required=True, help="JSON instance file")

    s = add("halfspace", cmd_halfspace, "compile and verify an intersection of halfspaces",
            "Normals are rows of signed ones, e.g. \"+1+1,+1-1\". Prints a report; "
            "--out also writes it as JSON. Exit 1 on any violation.")
    s.add_argument("--normals", help="inline normals, rows separated by commas")
    s.add_argument("--normals-file", help="file with one row of +1/-1 per line")

    s = add("balance", cmd_balance, "balance a single-output checkpoint",
            "Prints penalties before/after as JSON; --out writes the balanced checkpoint.")
    s.add_argument("--checkpoint", help="input checkpoint (JSON)")

    s = add("gradcheck", cmd_gradcheck, "compare analytic gradients with finite differences",
            "Prints the max relative error; exit 0 iff below 1e-6.")
    s.add_argument("--trials", type=int, default=50)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DomainError, FileNotFoundError, data.DataFormatError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
