"""Analytic reverse-mode gradients for the fixed computation graph.

Complex parameters are differentiated as independent real/imaginary
coordinates. Gradients are carried as "packed" complex arrays with
g = dL/dRe(z) + i dL/dIm(z), whose float64 view is exactly the gradient of
the flat real parameter vector (same memory layout as ParameterSet.data).

The chain, per model kind:

  clamped BCE -> Born readout p = <.|P|.> with P = Q (Q^H Q)^{-1} Q^H
              -> composition (normalized superposition or convex mixture)
              -> row normalization of the lookup
              -> raw table rows,
or, for the real baseline, clamped BCE -> sigmoid head -> token mean -> rows.

Derivatives used (for a real loss, packed convention as above):

  p = <t|A|t>, A Hermitian            ->  g_t = 2 A t
  p = Re(t^H Q M^{-1} Q^H t), M=Q^H Q ->  g_Q = 2 (t - P t) c^H,  c = M^{-1} Q^H t
  t = u / ||u||                       ->  g_u = (g_t - Re(g_t^H t) t) / ||u||

The superposition norm is clamped at SUP_NORM_CLAMP; where the clamp is
active the норм is treated as a constant, keeping the graph differentiable
near total cancellation.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import model as model_mod
from .errors import ConfigurationError, NonFiniteGradientError
from .model import (
    KIND_MIX,
    KIND_REAL,
    KIND_SUP,
    ModelConfig,
    ParameterSet,
    SUP_NORM_CLAMP,
    forward_batch,
    init_parameters,
    param_views,
)

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-7

__all__ = [
    "bce_loss",
    "backward",
    "finite_diff_check",
    "AdamState",
    "init_adam",
    "adam_step",
    "TrainConfig",
    "TrainResult",
    "train",
    "predict_probs",
]


def bce_loss(p, y) -> float | np.ndarray:
    """Binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    out = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(out) if out.ndim == 0 else out


def _bce_grad(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """dL/dp of the clamped BCE; zero where the clamp is active."""
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0)


def _norm_chain(g_t: np.ndarray, t: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Backprop through t = z/||z||: packed gradient w.r.t. the raw rows."""
    radial = np.sum(g_t.conj() * t, axis=-1).real
    return (g_t - radial[..., None] * t) / norms[..., None]


def backward(params: ParameterSet, batch: "data_mod.Batch") -> tuple[float, np.ndarray]:
    """Mean batch loss and its gradient for every real coordinate.

    Deterministic: fixed summation order, no randomness. Gradients share the
    flat layout (and group map) of ``params.data``.
    """
    config = params.config
    probs, cache = forward_batch(params, batch.ids, batch.lengths)
    labels = np.asarray(batch.labels, dtype=np.float64)
    losses = bce_loss(probs, labels)
    mean_loss = float(np.mean(losses))
    nbatch = probs.shape[0]
    dldp = _bce_grad(probs, labels) / nbatch

    grads = np.zeros_like(params.data)
    gv = param_views(config, grads)
    mask = cache["mask"]
    ids = batch.ids
    lengths = batch.lengths

    if config.kind == KIND_REAL:
        v = params.views()
        p = cache["p"]
        ds = dldp * p * (1.0 - p)
        gv.head_w[:] = ds @ cache["xbar"]
        gv.head_b[0] = float(ds.sum())
        per_tok = (ds / lengths)[:, None, None] * v.head_w[None, None, :]
        np.add.at(gv.table, ids[mask], per_tok[mask].astype(np.complex128))
        return mean_loss, grads

    q = cache["q"]
    t = cache["t"]
    norms = cache["norms"]

    if config.kind == KIND_MIX:
        c = cache["c"]  # (B, M, r)
        pt = c @ q.T  # P t per token
        a = (dldp / lengths)[:, None, None]
        g_t = 2.0 * a * pt * mask[:, :, None]
        diff = (t - pt) * (a * mask[:, :, None])
        gv.q += 2.0 * np.einsum("bmn,bmr->nr", diff, c.conj())
    else:  # KIND_SUP
        c = cache["c"]  # (B, r)
        s = cache["s"]
        nu = cache["nu"]
        nu_c = cache["nu_c"]
        ps = c @ q.T  # (B, n)
        g_s = 2.0 * dldp[:, None] * ps
        gv.q += 2.0 * np.einsum("bn,br->nr", (s - ps) * dldp[:, None], c.conj())
        # Through S = u / max(||u||, clamp): radial term only where unclamped.
        active = (nu >= SUP_NORM_CLAMP)[:, None]
        radial = np.sum(g_s.conj() * s, axis=1).real[:, None]
        g_u = (g_s - np.where(active, radial * s, 0.0)) / nu_c[:, None]
        g_t = (g_u / lengths[:, None])[:, None, :] * mask[:, :, None]

    g_z = _norm_chain(g_t, t, norms)
    np.add.at(gv.table, ids[mask], g_z[mask])
    return mean_loss, grads


def finite_diff_check(
    params: ParameterSet,
    batch: "data_mod.Batch",
    h: float = 1e-5,
    sample: int = 200,
    seed: int = 0,
    analytic: np.ndarray | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``sample`` coordinates without replacement; for each, compares
    (L(x + h e_i) - L(x - h e_i)) / 2h against the analytic entry with the
    symmetric relative error |fd - g| / max(1e-8, |fd| + |g|).

    ``analytic`` overrides the internally computed gradient (lets tests
    verify the checker itself flags a wrong gradient).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ConfigurationError(f"finite-difference step h={h} outside [1e-7, 1e-3]")
    if sample == 0:
        warnings.warn("finite_diff_check called with sample=0; nothing checked")
        return 0.0
    if analytic is None:
        _, analytic = backward(params, batch)

    def loss_at(flat: np.ndarray) -> float:
        probs, _ = forward_batch(ParameterSet(params.config, flat), batch.ids, batch.lengths)
        return float(np.mean(bce_loss(probs, np.asarray(batch.labels, dtype=np.float64))))

    size = params.data.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 4)))
    coords = rng.choice(size, size=min(sample, size), replace=False)
    worst = 0.0
    base = params.data
    for i in coords:
        shifted = base.copy()
        shifted[i] = base[i] + h
        up = loss_at(shifted)
        shifted[i] = base[i] - h
        down = loss_at(shifted)
        fd = (up - down) / (2.0 * h)
        g = float(analytic[i])
        worst = max(worst, abs(fd - g) / max(1e-8, abs(fd) + abs(g)))
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment vectors, step count, and the default hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: ParameterSet, alpha: float = 0.001) -> AdamState:
    size = params.data.shape[0]
    return AdamState(m=np.zeros(size), v=np.zeros(size), alpha=alpha)


def adam_step(params: ParameterSet, grads: np.ndarray, state: AdamState) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam update. Pure: inputs are left untouched."""
    if grads.shape != params.data.shape:
        raise ConfigurationError("gradient vector does not match the parameter layout")
    if not np.all(np.isfinite(grads)):
        for name, sl in params.groups.items():
            if not np.all(np.isfinite(grads[sl])):
                raise NonFiniteGradientError(f"non-finite gradient in parameter group {name!r}")
        raise NonFiniteGradientError("non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_data = params.data - state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)
    new_params = ParameterSet(params.config, new_data)
    return new_params, AdamState(m=m, v=v, t=t, alpha=state.alpha, beta1=state.beta1, beta2=state.beta2, eps=state.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    patience: int = 10
    alpha: float = 0.001
    eval_batch_size: int = 256
    # Optional early exit once validation accuracy reaches a target; used by
    # fast sanity checks, never by the benchmark protocol.
    stop_at_val_acc: float | None = None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    seconds: float

    def line(self) -> str:
        return f"epoch={self.epoch} train_loss={self.train_loss:.6f} val_acc={self.val_acc:.4f} seconds={self.seconds:.3f}"


@dataclass
class TrainResult:
    params: ParameterSet
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0


def predict_probs(params: ParameterSet, corpus: "data_mod.LabeledCorpus", split: str, batch_size: int = 256):
    """Probabilities and labels for a split, in corpus order."""
    probs = []
    labels = []
    for batch in data_mod.batches(corpus, split, batch_size):
        p, _ = forward_batch(params, batch.ids, batch.lengths)
        probs.append(p)
        labels.append(batch.labels)
    if not probs:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(probs), np.concatenate(labels)


def _reinit_degenerate_rows(params: ParameterSet, rng: np.random.Generator) -> int:
    """Redraw table rows whose norm collapsed below the admissible floor."""
    table = params.views().table
    norms_sq = np.sum(table.real**2 + table.imag**2, axis=1)
    bad = norms_sq < model_mod.ROW_NORM_EPS**2
    count = int(bad.sum())
    if count:
        table[bad] = model_mod.draw_rows(rng, count, params.config.n)
        logger.warning("re-initialized %d degenerate embedding row(s)", count)
    return count


def train(
    config: ModelConfig,
    corpus: "data_mod.LabeledCorpus",
    tc: TrainConfig | None = None,
    log_sink=None,
) -> TrainResult:
    """Seeded mini-batch training with best-on-validation parameter retention.

    Shuffling mixes the epoch index into the seed; reruns with identical
    inputs produce bit-identical parameters. Early-stops after ``patience``
    epochs without a new best validation accuracy (ties keep the earlier
    epoch). ``epochs=0`` returns the initial parameters and an empty history.
    """
    tc = tc or TrainConfig()
    if not corpus.indices_of("train"):
        raise ConfigurationError("corpus has an empty train split")
    if not corpus.indices_of("val"):
        raise ConfigurationError("corpus has an empty validation split")

    params = init_parameters(config)
    state = init_adam(params, alpha=tc.alpha)
    reinit_rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 3)))
    result = TrainResult(params=params)
    best_acc = -1.0
    best_epoch = 0

    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        loss_sum = 0.0
        seen = 0
        for batch in data_mod.batches(corpus, "train", tc.batch_size, shuffle_seed=config.seed, epoch=epoch):
            loss, grads = backward(params, batch)
            params, state = adam_step(params, grads, state)
            _reinit_degenerate_rows(params, reinit_rng)
            loss_sum += loss * batch.size
            seen += batch.size
        probs, labels = predict_probs(params, corpus, "val", tc.eval_batch_size)
        val_acc = float(np.mean((probs >= 0.5).astype(np.int64) == labels))
        record = EpochRecord(epoch, loss_sum / seen, val_acc, time.perf_counter() - t0)
        result.history.append(record)
        if log_sink is not None:
            log_sink(record.line())
        else:
            logger.info("%s", record.line())
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            result.params = params.copy()
        if tc.stop_at_val_acc is not None and val_acc >= tc.stop_at_val_acc:
            break
        if epoch - best_epoch >= tc.patience:
            break

    if result.history:
        result.best_epoch = best_epoch
        result.best_val_acc = best_acc
    return result
