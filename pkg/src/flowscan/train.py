"""Maximum-likelihood training with validation-based model selection."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .core import backward
from .errors import ConfigError, NumericError
from .model import evaluate_ppll
from .optim import adam_step

METRIC_COLUMNS = ("step", "train_ppll", "val_ppll", "wall_ms")
TRAIN_EVAL_SETS = 256


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 250
    checkpoint_every: int = 1000
    patience: int = 0          # evaluations without improvement before stopping; 0 disables
    clip_norm: float = 10.0
    record_wall_ms: bool = False  # keep at 0 so equal seeds give equal metrics files

    def validate(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        for name in ("batch_size", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        return self


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)
    best_val: float = -np.inf
    best_step: int = 0
    steps_run: int = 0
    stopped_early: bool = False
    best_state: dict | None = None


class Sampler:
    """Minibatches of equal cardinality. With mixed sizes a cardinality is
    picked in proportion to how many sets have it."""

    def __init__(self, sets, batch_size, rng):
        self.rng = rng
        self.batch_size = batch_size
        if isinstance(sets, np.ndarray):
            self.groups = [sets]
        else:
            by_n = {}
            for s in sets:
                by_n.setdefault(s.shape[0], []).append(s)
            self.groups = [np.stack(by_n[n]) for n in sorted(by_n)]
        sizes = np.array([len(g) for g in self.groups], dtype=float)
        if sizes.sum() == 0:
            raise ConfigError("training split is empty")
        self.weights = sizes / sizes.sum()

    def draw(self):
        g = self.groups[0] if len(self.groups) == 1 else self.groups[self.rng.choice(len(self.groups), p=self.weights)]
        idx = self.rng.choice(len(g), size=min(self.batch_size, len(g)), replace=False)
        return g[idx]


def _subset(sets, count):
    return sets[:count] if isinstance(sets, np.ndarray) else list(sets)[:count]


def write_metrics(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["step"], repr(r["train_ppll"]), repr(r["val_ppll"]), r["wall_ms"]])


def train(model, train_sets, val_sets, cfg: TrainConfig, out_dir=None, log=None, schema=None):
    """Minimize mean negative PPLL over ``train_sets``.

    Validation PPLL is measured every ``eval_every`` steps (and at steps 0 and
    the last); the best-scoring parameters are kept in ``best_state`` and, with
    ``out_dir``, written to ``best.fsck``. A non-finite value during a step
    raises :class:`NumericError` after the metrics so far are flushed; the
    checkpoints already on disk are left as they are.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    sampler = Sampler(train_sets, cfg.batch_size, rng)
    train_eval = _subset(train_sets, TRAIN_EVAL_SETS)
    has_val = len(val_sets) > 0
    result = TrainResult()
    store = model.store
    t0 = time.perf_counter()
    stale = 0

    def paths(name):
        return os.path.join(out_dir, name) if out_dir else None

    def evaluate(step):
        nonlocal stale
        tr = float(np.mean(evaluate_ppll(model, train_eval)))
        va = float(np.mean(evaluate_ppll(model, val_sets))) if has_val else tr
        wall = int((time.perf_counter() - t0) * 1000) if cfg.record_wall_ms else 0
        result.rows.append({"step": step, "train_ppll": tr, "val_ppll": va, "wall_ms": wall})
        if log:
            log(f"step {step:6d}  train {tr:.4f}  val {va:.4f}")
        if va > result.best_val:
            result.best_val, result.best_step = va, step
            result.best_state = store.state_dict()
            stale = 0
            if out_dir:
                checkpoint.save(model, paths("best.fsck"), step=step, schema=schema)
        else:
            stale += 1

    try:
        evaluate(0)
        for step in range(1, cfg.iterations + 1):
            batch = sampler.draw()
            loss = -model.ppll(batch).mean()
            backward(loss, store)
            adam_step(store, lr=cfg.lr, clip_norm=cfg.clip_norm)
            result.steps_run = step
            if out_dir and step % cfg.checkpoint_every == 0:
                checkpoint.save(model, paths("last.fsck"), step=step, schema=schema)
            if step % cfg.eval_every == 0 or step == cfg.iterations:
                evaluate(step)
                if cfg.patience and stale >= cfg.patience:
                    result.stopped_early = True
                    break
    except NumericError:
        if out_dir:
            write_metrics(result.rows, paths("metrics.csv"))
        raise
    if out_dir:
        checkpoint.save(model, paths("final.fsck"), step=result.steps_run, schema=schema)
        write_metrics(result.rows, paths("metrics.csv"))
    return result
