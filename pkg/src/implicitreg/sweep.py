"""Network-size sweeps: train every hidden-layer size on every dataset variant.

Variants:

original        labels as given, no penalty
weight_decay    l2 weight decay, penalty weight picked by validation error
censored        all labels replaced by the predictions of a small trained network
censored_noisy  censored, then a fraction of the training labels flipped

Each repetition seed fixes the data sample, split, censoring teacher,
initialization and batch order, so a record depends only on (config, seed).
"""

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as datamod
from .loss import RegConfig, zero_one_error
from .model import init
from .numerics import Rng
from .optim import DivergenceError, OptState, StoppingRule, train

log = logging.getLogger(__name__)

VARIANTS = ("original", "weight_decay", "censored", "censored_noisy")
CSV_SCHEMA = "implicitreg-sweep/1"
DEFAULT_H_GRID = tuple(2**i for i in range(13))
DEFAULT_LAMBDA_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class SweepConfig:
    H_grid: list = field(default_factory=lambda: list(DEFAULT_H_GRID))
    variants: list = field(default_factory=lambda: ["original"])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    dataset: dict = field(default_factory=lambda: {"kind": "planted"})
    lambda_grid: list = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    H0: int = 4
    noise_fraction: float = 0.05
    init_sigma: float = 0.1
    step: float = 0.1
    momentum: float = 0.5
    batch_size: int = 100
    max_epochs: int = 1000
    loss_tol: float = 1e-5

    def __post_init__(self):
        if not self.H_grid or any(b <= a for a, b in zip(self.H_grid, self.H_grid[1:])):
            raise ValueError("H_grid must be nonempty and strictly increasing")
        if min(self.H_grid) < 1:
            raise ValueError("hidden-layer sizes must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")
        bad = set(self.variants) - set(VARIANTS)
        if bad or not self.variants:
            raise ValueError(f"unknown variants {sorted(bad)}; choose from {VARIANTS}")
        if "weight_decay" in self.variants and not self.lambda_grid:
            raise ValueError("weight_decay variant needs a lambda grid")

    @classmethod
    def from_json(cls, path) -> "SweepConfig":
        with open(path) as f:
            doc = json.load(f)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**doc)

    def stopping(self) -> StoppingRule:
        return StoppingRule(self.max_epochs, self.loss_tol)


@dataclass
class SweepRecord:
    variant: str
    seed: int
    H: int
    lam: float
    epochs_run: int
    train_error_final: float
    train_error_earlystop: float
    validation_error_best: float
    test_error_final: float
    test_error_earlystop: float
    diverged: int = 0


CSV_COLUMNS = [f.name for f in fields(SweepRecord)]
ERROR_COLUMNS = CSV_COLUMNS[5:10]


def load_base_data(spec: dict, rng: Rng, data_dir=None):
    """(train, validation, test) for one repetition."""
    kind = spec.get("kind", "planted")
    n_train = spec.get("n_train", 500)
    n_val = spec.get("n_validation", 500)
    n_test = spec.get("n_test", 2000)
    if kind == "planted":
        n = n_train + n_val + n_test
        full, _ = datamod.planted_synthetic(spec.get("d", 20), spec.get("H0", 4), spec.get("k", 5),
                                            n, rng.child(0), spec.get("margin_scale", 0.0),
                                            spec.get("input_mean", 0.0),
                                            spec.get("min_class_frac", 0.0),
                                            spec.get("unit_margin"), spec.get("input_std", 1.0))
        return datamod.split(full, datamod.SplitSpec(n_train, n_val, n_test, rng.child(1).seed))
    if kind not in ("mnist", "cifar10"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    directory = datamod.resolve_data_dir(spec.get("dir") or data_dir)
    loader = datamod.load_mnist if kind == "mnist" else datamod.load_cifar10
    full = datamod.concat([datamod.downsample_100(loader(directory, "train")),
                           datamod.downsample_100(loader(directory, "test"))])
    return datamod.split(full, datamod.SplitSpec(n_train, n_val, n_test, rng.child(1).seed))


def prepare_variant(cfg: SweepConfig, variant: str, splits, rng: Rng):
    train_ds, val_ds, test_ds = splits
    if variant in ("original", "weight_decay"):
        return splits
    union = datamod.concat([train_ds, val_ds, test_ds])
    relabeled, _ = datamod.censor(union, cfg.H0, rng.child(10), sigma=cfg.init_sigma,
                                  stop=cfg.stopping())
    a, b = train_ds.n, train_ds.n + val_ds.n
    labels = relabeled.labels
    out = [train_ds.with_labels(labels[:a]), val_ds.with_labels(labels[a:b]),
           test_ds.with_labels(labels[b:])]
    if variant == "censored_noisy":
        out[0] = datamod.add_label_noise(out[0], cfg.noise_fraction, rng.child(11))
    return tuple(out)


def run_cell(cfg: SweepConfig, variant: str, seed: int, H: int, lam: float, splits,
             rng: Rng) -> SweepRecord:
    train_ds, val_ds, test_ds = splits
    p0 = init(train_ds.d, H, train_ds.k, cfg.init_sigma, rng.child(H, 0))
    opt = OptState.fresh(p0, step=cfg.step, momentum=cfg.momentum,
                         batch_size=min(cfg.batch_size, train_ds.n))
    reg = RegConfig(lam, "l2_weight_decay" if lam > 0 else "none")
    try:
        res = train(p0, train_ds, reg, cfg.stopping(), rng.child(H, 1), val_ds, opt)
    except DivergenceError as exc:
        log.warning("%s seed=%s H=%d lambda=%g diverged: %s", variant, seed, H, lam, exc)
        nan = math.nan
        return SweepRecord(variant, seed, H, lam, 0, nan, nan, nan, nan, nan, 1)
    return SweepRecord(
        variant, seed, H, lam, res.epochs_run,
        zero_one_error(res.params, train_ds),
        zero_one_error(res.best_params, train_ds),
        min(h["validation_error"] for h in res.history),
        zero_one_error(res.params, test_ds),
        zero_one_error(res.best_params, test_ds),
    )


def _cell_job(args):
    return run_cell(*args)


def run_sweep(cfg: SweepConfig, seed: int = 0, workers: int = 1, data_dir=None):
    """Train every (variant, seed, H[, lambda]) cell and return records in canonical order.

    For weight_decay only the penalty weight with the lowest best-validation
    error (smallest weight on ties) is kept per (seed, H).
    """
    base = Rng(seed)
    jobs = []
    for rep in cfg.seeds:
        rep_rng = base.child(rep)
        splits = load_base_data(cfg.dataset, rep_rng, data_dir)
        for variant in cfg.variants:
            vrng = rep_rng.child(100 + VARIANTS.index(variant))
            vsplits = prepare_variant(cfg, variant, splits, vrng)
            lams = cfg.lambda_grid if variant == "weight_decay" else [0.0]
            for H in cfg.H_grid:
                for li, lam in enumerate(lams):
                    jobs.append((cfg, variant, rep, H, float(lam), vsplits, vrng.child(li)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_cell_job, jobs, chunksize=1))
    else:
        records = [_cell_job(j) for j in jobs]
    return canonical_order(select_weight_decay(records), cfg.variants)


def select_weight_decay(records):
    out, best = [], {}
    for r in records:
        if r.variant != "weight_decay":
            out.append(r)
            continue
        key = (r.seed, r.H)
        score = (math.inf if r.diverged else r.validation_error_best, r.lam)
        if key not in best or score < best[key][0]:
            best[key] = (score, r)
    return out + [r for _, r in best.values()]


def canonical_order(records, variants=VARIANTS):
    rank = {v: i for i, v in enumerate(variants)}
    return sorted(records, key=lambda r: (rank.get(r.variant, len(rank)), r.H, r.seed, r.lam))


def aggregate(records):
    """Mean and (population) standard deviation of each error column per (variant, H).

    Diverged records are counted but left out of the statistics.
    """
    if not records:
        raise ValueError("nothing to aggregate")
    groups = {}
    for r in records:
        groups.setdefault((r.variant, r.H), []).append(r)
    rank = {v: i for i, v in enumerate(VARIANTS)}
    rows = []
    for (variant, H) in sorted(groups, key=lambda g: (rank.get(g[0], len(rank)), g[0], g[1])):
        rs = groups[(variant, H)]
        ok = [r for r in rs if not r.diverged]
        row = {"variant": variant, "H": H, "count": len(rs), "diverged": len(rs) - len(ok)}
        for col in ERROR_COLUMNS:
            vals = np.array([getattr(r, col) for r in ok])
            row[f"{col}_mean"] = float(vals.mean()) if ok else math.nan
            row[f"{col}_std"] = float(vals.std()) if ok else math.nan
        rows.append(row)
    return rows


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def emit_csv(records, path) -> None:
    """Write records under a schema comment line and a fixed header."""
    with open(path, "w", newline="") as f:
        f.write(f"# schema: {CSV_SCHEMA}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([_fmt(v) for v in asdict(r).values()])


def read_csv(path):
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames != CSV_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
    out = []
    for row in reader:
        out.append(SweepRecord(
            row["variant"], int(row["seed"]), int(row["H"]), float(row["lam"]),
            int(row["epochs_run"]), *(float(row[c]) for c in ERROR_COLUMNS), int(row["diverged"])))
    return out


def emit_aggregate_csv(rows, path) -> None:
    if not rows:
        raise ValueError("no rows")
    with open(path, "w", newline="") as f:
        f.write(f"# schema: {CSV_SCHEMA}-aggregate\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(rows[0]))
        for row in rows:
            w.writerow([_fmt(v) for v in row.values()])
