"""Supervised and MCVA training loops with CSV metric logs."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from latentflow.errors import ConfigError, TrainingError
from latentflow.harness.losses import sequence_loss
from latentflow.harness.metrics import aepe, f1_all
from latentflow.harness.optim import Adam, OptimConfig
from latentflow.mcva import MCVAConfig, ReconstructionHead, check_pretrain_freezing, pretext_forward
from latentflow.ndtensor import backward, no_grad

log = logging.getLogger(__name__)

CSV_FIELDS = ("step", "loss", "aepe", "f1_all")


@dataclass
class TrainConfig:
    steps: int = 2000
    gamma: float = 0.8
    log_every: int = 1
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, step: int, loss: float, aepe_v: float = float("nan"), f1: float = float("nan")) -> None:
        self.rows.append({"step": step, "loss": loss, "aepe": aepe_v, "f1_all": f1})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in self.rows:
            writer.writerow([r["step"]] + [repr(float(r[k])) for k in CSV_FIELDS[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _sample_source(data) -> Callable[[int], object]:
    if callable(data):
        return data
    data = list(data)
    if not data:
        raise TrainingError("empty training set")
    return lambda step: data[step % len(data)]


def train_supervised(model, data, cfg: Optional[TrainConfig] = None,
                     callback: Optional[Callable[[int, dict], bool]] = None) -> TrainLog:
    """Minimize the sequence loss, one sample per step.

    ``data`` is a sequence of ``SyntheticSample`` (cycled in order) or a
    callable ``step -> sample``. ``callback(step, row)`` may return True to
    stop early. Metrics are those of the step's final iterate.
    """
    cfg = cfg or TrainConfig()
    source = _sample_source(data)
    opt = Adam(model.trainable_parameters(), cfg.optim)
    out = TrainLog()
    for step in range(cfg.steps):
        s = source(step)
        pred = model(s.image1, s.image2)
        loss = sequence_loss(pred.flows, s.flow, s.valid, cfg.gamma)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}")
        opt.zero_grad()
        backward(loss)
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            final = pred.final.data
            out.append(step, value, aepe(final, s.flow, s.valid), f1_all(final, s.flow, s.valid))
            if callback is not None and callback(step, out.rows[-1]):
                break
    return out


def evaluate(model, samples: Sequence, num_iters: Optional[int] = None) -> dict:
    """Mean AEPE / F1-all of the final iterate over ``samples`` (no gradients)."""
    errs, f1s = [], []
    with no_grad():
        for s in samples:
            final = model(s.image1, s.image2, num_iters=num_iters).final.data
            errs.append(aepe(final, s.flow, s.valid))
            f1s.append(f1_all(final, s.flow, s.valid))
    return {"aepe": float(np.mean(errs)), "f1_all": float(np.mean(f1s))}


# Pretraining runs only a few hundred steps from a symmetric start, so it uses a
# larger step size and a shorter warmup than supervised training.
PRETRAIN_OPTIM = {"lr": 3e-3, "warmup": 20}


@dataclass
class PretrainConfig:
    steps: int = 500
    seed: int = 0
    log_every: int = 1
    batch_size: int = 8
    mcva: MCVAConfig = field(default_factory=MCVAConfig)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(**PRETRAIN_OPTIM))

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"pretrain batch_size must be >= 1, got {self.batch_size}")


def pretrain(model, data, cfg: Optional[PretrainConfig] = None,
             head: Optional[ReconstructionHead] = None) -> tuple[TrainLog, ReconstructionHead]:
    """MCVA pretraining; each step averages the pretext loss over ``batch_size`` pairs.

    Pairs are drawn in order (``step * batch_size + j``). With a frozen context
    encoder, cost volumes and context of a fixed corpus are computed once.
    """
    cfg = cfg or PretrainConfig()
    check_pretrain_freezing(model)
    model.set_frozen(True, cfg.mcva.freeze_context_encoder)
    rng = np.random.default_rng(cfg.seed)
    if head is None:
        head = ReconstructionHead(model.cfg.token_dim, np.random.default_rng([cfg.seed, 1]), cfg.mcva.head_depth)
    opt = Adam(model.trainable_parameters() + head.trainable_parameters(), cfg.optim)
    corpus_size = None if callable(data) else len(data)
    source = _sample_source(data)
    use_cache = cfg.mcva.freeze_context_encoder and corpus_size is not None
    cache: dict = {}
    out = TrainLog()
    for step in range(cfg.steps):
        total = None
        for j in range(cfg.batch_size):
            index = step * cfg.batch_size + j
            key = None if corpus_size is None else index % corpus_size
            if use_cache and key in cache:
                cv, context = cache[key]
            else:
                s = source(index)
                cv, context = model.encode(s.image1, s.image2)
                if use_cache:
                    cache[key] = (cv, context)
            loss = pretext_forward(model, head, cv, context, rng, cfg.mcva).loss
            total = loss if total is None else total + loss
        total = total * (1.0 / cfg.batch_size)
        value = total.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite pretext loss {value} at step {step}")
        opt.zero_grad()
        backward(total)
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            out.append(step, value)
    return out, head
