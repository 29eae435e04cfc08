"""Weighted cross-entropy training of the denoiser."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, adam_step, backward
from .data import SyntheticDataset
from .nets import Denoiser, ModelConfig
from .numerics import NumericsError, RngState
from .process import DiffusionProcess, diffuse


@dataclass
class TeacherTrainConfig:
    steps: int = 3000
    batch: int = 64
    lr: float = 3e-3
    weighting: str = "unit"  # unit | mdlm (alpha'/(1-alpha))
    eval_every: int = 500
    eval_steps: int = 16  # chain length used for the periodic exact-KL probe


def loss_weight(t: np.ndarray, process: DiffusionProcess, weighting: str) -> np.ndarray:
    if weighting == "unit":
        return np.ones_like(t)
    if weighting == "mdlm":
        alpha = process.schedule.alpha(t)
        return -process.schedule.alpha_prime(t) / np.maximum(1.0 - alpha, 1e-6)
    raise ValueError(f"unknown weighting {weighting!r}")


def teacher_loss(model: Denoiser, batch: np.ndarray, process: DiffusionProcess,
                 rng: RngState, weighting: str = "unit", params=None):
    """Mean w(t) * CE(x | softmax(model(z_t, t))) with per-example t ~ U(0,1).

    For masked processes the cross-entropy is restricted to masked positions;
    unmasked positions carry no signal under absorbing noise. Returns a Var
    when `params` contains Vars.
    """
    batch = np.asarray(batch)
    t = rng.uniform(size=batch.shape[0])
    z_t = diffuse(batch, t, process, rng)
    logits = model.forward(z_t, t, params=params)
    logp = ad.log_softmax(logits)
    ce = ad.mul(ad.take_along_last(logp, batch), -1.0)  # (B, D)
    w = loss_weight(t, process, weighting)[:, None]
    if process.masked:
        pos = (z_t == process.mask_id).astype(np.float64)
    else:
        pos = np.ones_like(batch, dtype=np.float64)
    denom = max(pos.sum(), 1.0)
    return ad.div(ad.reduce_sum(ad.mul(ce, w * pos)), denom)


def train_teacher(dataset: SyntheticDataset, process: DiffusionProcess,
                  model_config: ModelConfig, train_config: TeacherTrainConfig,
                  rng: RngState, log_path=None, record_wallclock: bool = True):
    """Returns (trained Denoiser, log rows). Log: step, loss, eval_kl, wallclock_ms."""
    init_rng, step_rng = rng.split(2)
    model = Denoiser(model_config, init_rng)
    opt = AdamState.for_store(model.store)
    rows = []
    t0 = time.monotonic()
    for step in range(train_config.steps):
        x = dataset.sample(train_config.batch, step_rng)
        params = model.store.leaves()
        model.store.zero_grad()
        loss = teacher_loss(model, x, process, step_rng, train_config.weighting, params=params)
        loss_val = float(ad.value_of(loss))
        if not np.isfinite(loss_val):
            raise NumericsError(f"teacher loss diverged at step {step}")
        backward(loss)
        adam_step(model.store, opt, lr=train_config.lr)
        if step % train_config.eval_every == 0 or step == train_config.steps - 1:
            eval_kl = _eval_kl(model, dataset, process, train_config.eval_steps)
            ms = (time.monotonic() - t0) * 1000.0 if record_wallclock else 0.0
            rows.append({"step": step, "loss": loss_val, "eval_kl": eval_kl,
                         "wallclock_ms": round(ms, 3)})
    if log_path is not None:
        write_training_log(log_path, rows)
    return model, rows


def _eval_kl(model: Denoiser, dataset: SyntheticDataset, process: DiffusionProcess,
             steps: int) -> float:
    if not dataset.enumerable:
        return float("nan")
    from .metrics import ExactDistribution, exact_chain_distribution, kl

    q = ExactDistribution(dataset.vocab, dataset.seq_len, dataset.exact_q())
    p = exact_chain_distribution(model.probs, process, steps, dataset.seq_len)
    return kl(q, p)


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "loss", "eval_kl", "wallclock_ms"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    return f"{v:.10g}" if isinstance(v, float) else v
