"""Variational training loop: minibatch ELBO, Adam, plateau LR schedule.

The per-batch objective is  beta0 * pi_i * KL(q || p) + NLL  where pi_i
re-weights the full-dataset KL across the M minibatches of an epoch
(uniform 1/M by default, or the geometric 2^(M-i)/(2^M - 1) schedule) so
that summing the weighted terms over one epoch recovers the whole-dataset
objective. The likelihood is a heteroscedastic binary cross-entropy: the
log-variance head injects Gaussian noise into the logits, averaged over K
Monte Carlo draws, which lets the network attenuate the loss on pixels it
declares noisy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream
from .tensor import Tensor
from .unet import ModelGraph


class TrainingDivergedError(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass
class ELBOConfig:
    beta0: float = 1.0
    kl_weighting: str = "uniform"  # or "geometric"
    num_batches: int = 1
    likelihood_mc_samples: int = 10

    def __post_init__(self):
        if self.beta0 < 0:
            raise ValueError(f"beta0 must be >= 0, got {self.beta0}")
        if self.kl_weighting not in ("uniform", "geometric"):
            raise ValueError(f"unknown kl_weighting: {self.kl_weighting!r}")
        if self.num_batches < 1:
            raise ValueError(f"num_batches must be >= 1, got {self.num_batches}")
        if self.likelihood_mc_samples < 1:
            raise ValueError("likelihood_mc_samples must be >= 1")


def kl_weight(i: int, cfg: ELBOConfig) -> float:
    """Weight pi_i for batch i in 1..M; both schemes sum to 1 over an epoch."""
    m = cfg.num_batches
    if not 1 <= i <= m:
        raise ValueError(f"batch index {i} out of range 1..{m}")
    if cfg.kl_weighting == "uniform":
        return 1.0 / m
    # 2^(M-i) / (2^M - 1), evaluated in log space so large M cannot overflow
    return math.exp(-i * math.log(2.0)) / -math.expm1(-m * math.log(2.0))


def heteroscedastic_nll(logits: Tensor, log_var: Tensor, target: Tensor,
                        k: int, rng: RngStream) -> Tensor:
    """Noisy-logit binary cross-entropy, averaged over pixels, batch and K draws.

    Each draw corrupts the logits with exp(log_var / 2) * eps and scores the
    result with the numerically stable form softplus(z) - target * z.
    """
    if k < 1:
        raise ValueError(f"need at least one likelihood sample, got k={k}")
    tdata = target.data
    if not np.isin(tdata, (0.0, 1.0)).all():
        raise ValueError("heteroscedastic_nll: target mask must be binary {0,1}")
    if logits.data.shape != tdata.shape or log_var.data.shape != tdata.shape:
        raise ValueError(
            f"heteroscedastic_nll: shape mismatch logits {logits.data.shape} / "
            f"log_var {log_var.data.shape} / target {tdata.shape}")
    noise_scale = (log_var * 0.5).exp()
    total = None
    for _ in range(k):
        eps = Tensor(rng.normal(tdata.shape, dtype=logits.data.dtype))
        z = logits + noise_scale * eps
        bce = z.softplus() - target * z
        term = bce.mean()
        total = term if total is None else total + term
    return total * (1.0 / k)


def elbo_loss(model: ModelGraph, images: Tensor, masks: Tensor, batch_index: int,
              cfg: ELBOConfig, rng: RngStream) -> tuple[Tensor, float, float]:
    """Scalar training loss for one minibatch, plus (nll, kl) floats for logging."""
    out = model.forward(images, mode="train", rng=rng)
    logits = out[:, 0:1]
    log_var = out[:, 1:2]
    nll = heteroscedastic_nll(logits, log_var, masks, cfg.likelihood_mc_samples, rng)
    kl = model.kl_total()
    loss = kl * (cfg.beta0 * kl_weight(batch_index, cfg)) + nll
    return loss, nll.item(), kl.item()


class Adam:
    """Standard Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise TrainingDivergedError(f"non-finite gradient in parameter {name!r}")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class PlateauSchedule:
    """Halve the learning rate after `patience` epochs without improvement."""
    lr: float
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-6
    rel_tol: float = 1e-3
    best: float = None
    bad_epochs: int = 0

    def update(self, epoch_loss: float) -> float:
        if self.best is None or epoch_loss < self.best * (1.0 - self.rel_tol):
            self.best = epoch_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    beta0: float = 1.0
    kl_weighting: str = "uniform"
    likelihood_mc_samples: int = 10
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    min_lr: float = 1e-6
    plateau_rel_tol: float = 1e-3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    nll: float
    kl: float
    lr: float
    f1: float
    iou: float


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    best_state: dict = None
    best_f1: float = -1.0
    best_epoch: int = -1


def _stack_batch(samples, idx, dtype):
    images = np.stack([samples[i].image for i in idx]).astype(dtype)
    masks = np.stack([samples[i].mask for i in idx]).astype(dtype)
    return Tensor(images), Tensor(masks)


def evaluate_frozen(model: ModelGraph, samples, threshold: float = 0.5,
                    batch_size: int = 16) -> tuple[float, float]:
    """Mean F1/IoU over samples using the deterministic posterior-mean pass."""
    from .metrics import confusion_counts, f1_score, iou
    from .tensor import no_grad

    f1s, ious = [], []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            idx = range(start, min(start + batch_size, len(samples)))
            images, _ = _stack_batch(samples, idx, model.dtype)
            out = model.forward(images, mode="frozen")
            probs = out[:, 0:1].sigmoid().data
            for row, i in enumerate(idx):
                c = confusion_counts(probs[row, 0], samples[i].mask[0], threshold)
                f1s.append(f1_score(c))
                ious.append(iou(c))
    return float(np.mean(f1s)), float(np.mean(ious))


def train(model: ModelGraph, train_set, val_set, tc: TrainConfig) -> TrainResult:
    """Run the epoch loop; returns the per-epoch log and best-F1 snapshot.

    Deterministic given tc.seed: shuffling, flipout noise and likelihood
    noise all derive from per-(epoch, batch) streams.
    """
    if not train_set:
        raise ValueError("train(): empty training set")
    params = model.parameters()
    opt = Adam(params, lr=tc.lr)
    sched = PlateauSchedule(lr=tc.lr, patience=tc.plateau_patience,
                            factor=tc.plateau_factor, min_lr=tc.min_lr,
                            rel_tol=tc.plateau_rel_tol)
    n = len(train_set)
    m = (n + tc.batch_size - 1) // tc.batch_size
    elbo_cfg = ELBOConfig(beta0=tc.beta0, kl_weighting=tc.kl_weighting,
                          num_batches=m, likelihood_mc_samples=tc.likelihood_mc_samples)
    result = TrainResult()

    for epoch in range(1, tc.epochs + 1):
        order = RngStream(tc.seed, stream_id=epoch).permutation(n)
        epoch_loss = epoch_nll = epoch_kl = 0.0
        for b in range(m):
            idx = order[b * tc.batch_size:(b + 1) * tc.batch_size]
            images, masks = _stack_batch(train_set, idx, model.dtype)
            rng = RngStream(tc.seed, stream_id=(epoch << 20) | (b + 1))
            loss, nll_val, kl_val = elbo_loss(model, images, masks, b + 1, elbo_cfg, rng)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite loss {loss_val} at epoch {epoch}, batch {b + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss_val
            epoch_nll += nll_val
            epoch_kl += kl_val

        f1, iou_val = evaluate_frozen(model, val_set) if val_set else (float("nan"),) * 2
        stats = EpochStats(epoch=epoch, loss=epoch_loss / m, nll=epoch_nll / m,
                           kl=epoch_kl / m, lr=opt.lr, f1=f1, iou=iou_val)
        result.log.append(stats)
        if val_set and f1 > result.best_f1:
            result.best_f1 = f1
            result.best_epoch = epoch
            result.best_state = {name: p.data.copy() for name, p in params.items()}
        opt.lr = sched.update(stats.loss)

    if result.best_state is None:
        result.best_state = {name: p.data.copy() for name, p in params.items()}
        result.best_epoch = tc.epochs
    return result


def load_state(model: ModelGraph, state: dict[str, np.ndarray]):
    """Copy a parameter snapshot back into the model (shapes must match)."""
    params = model.parameters()
    for name, arr in state.items():
        if name not in params:
            raise KeyError(f"unknown parameter in state: {name!r}")
        if params[name].data.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name!r}: "
                             f"{params[name].data.shape} vs {arr.shape}")
        params[name].data = arr.astype(params[name].data.dtype, copy=True)
