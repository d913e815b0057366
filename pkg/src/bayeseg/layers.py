"""Network layers: deterministic and variational 2D convolutions, group norm.

A variational convolution keeps a factorized Gaussian over its kernel,
parameterized as (mu, rho) with sigma = softplus(rho) so sigma stays
strictly positive. Biases are deterministic point estimates; only kernel
weights carry distributions. Three forward modes exist:

* ``train``  - the sign-decorrelated estimator: one shared kernel
  perturbation per minibatch, flipped per sample by Rademacher vectors,
  which cuts minibatch gradient variance roughly by the batch size.
* ``sample`` - one reparameterized kernel draw per call (used for the
  Monte Carlo passes at inference).
* ``frozen`` - kernel pinned at mu; deterministic, consumes no rng.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .tensor import ShapeError, Tensor, conv2d, group_norm


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic Gaussian prior over kernel weights."""
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"prior std must be positive, got {self.std}")


def softplus_inv(y: float) -> float:
    """Inverse of log(1 + e^x); used to seed rho from a target sigma."""
    return math.log(math.expm1(y))


class GaussianPosterior:
    """Per-weight Gaussian q(w) with trainable mean and pre-softplus scale."""

    def __init__(self, mu: Tensor, rho: Tensor):
        if mu.data.shape != rho.data.shape:
            raise ShapeError(f"mu shape {mu.data.shape} != rho shape {rho.data.shape}")
        self.mu = mu
        self.rho = rho

    @property
    def shape(self):
        return self.mu.data.shape

    def sigma(self) -> Tensor:
        return self.rho.softplus()

    def sample(self, rng: RngStream) -> Tensor:
        """Reparameterized draw mu + sigma * eps, differentiable in (mu, rho)."""
        eps = Tensor(rng.normal(self.shape, dtype=self.mu.data.dtype))
        return self.mu + self.sigma() * eps


def sample_weights(posterior: GaussianPosterior, rng: RngStream) -> Tensor:
    return posterior.sample(rng)


def kl_divergence(posterior: GaussianPosterior, prior: PriorSpec) -> Tensor:
    """Closed-form KL(q || p) between factorized Gaussians, summed over weights.

    Per weight: log(s_p/s) + (s^2 + (m - m_p)^2) / (2 s_p^2) - 1/2.
    """
    if not (np.isfinite(posterior.mu.data).all() and np.isfinite(posterior.rho.data).all()):
        raise ValueError("kl_divergence: non-finite posterior parameters")
    sigma = posterior.sigma()
    var_p = prior.std * prior.std
    centered = posterior.mu - prior.mean
    per_weight = (
        math.log(prior.std) - sigma.log()
        + (sigma * sigma + centered * centered) * (0.5 / var_p)
        - 0.5
    )
    return per_weight.sum()


class Conv2D:
    """Plain deterministic convolution with He-uniform kernel init."""

    def __init__(self, cin: int, cout: int, ksize: int, rng: RngStream,
                 stride: int = 1, padding="same", bias: bool = True,
                 dtype=np.float32):
        bound = math.sqrt(6.0 / (cin * ksize * ksize))
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin, ksize, ksize), dtype=dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor, rng: RngStream = None, mode: str = "frozen") -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def params(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class VariationalConv2D:
    """Convolution whose kernel is a factorized Gaussian posterior."""

    def __init__(self, cin: int, cout: int, ksize: int, rng: RngStream,
                 stride: int = 1, padding="same", prior: PriorSpec = PriorSpec(),
                 estimator: str = "flipout", sigma_init: float = 0.05,
                 dtype=np.float32):
        if estimator not in ("flipout", "reparam"):
            raise ValueError(f"estimator must be 'flipout' or 'reparam', got {estimator!r}")
        bound = math.sqrt(6.0 / (cin * ksize * ksize))
        mu = Tensor(rng.uniform(-bound, bound, (cout, cin, ksize, ksize), dtype=dtype),
                    requires_grad=True)
        rho = Tensor(np.full((cout, cin, ksize, ksize), softplus_inv(sigma_init), dtype=dtype),
                     requires_grad=True)
        self.posterior = GaussianPosterior(mu, rho)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.prior = prior
        self.estimator = estimator
        self.stride = stride
        self.padding = padding
        self.cin = cin
        self.cout = cout

    def forward(self, x: Tensor, rng: RngStream = None, mode: str = "frozen") -> Tensor:
        if mode == "frozen":
            return self.freeze_mean_forward(x)
        if rng is None:
            raise ValueError(f"mode {mode!r} requires an rng stream")
        if mode == "sample":
            return self.reparam_forward(x, rng)
        if mode == "train":
            if self.estimator == "flipout":
                return self.flipout_forward(x, rng)
            return self.reparam_forward(x, rng)
        raise ValueError(f"unknown forward mode: {mode!r}")

    def freeze_mean_forward(self, x: Tensor) -> Tensor:
        """Deterministic pass with the kernel pinned at its posterior mean."""
        return conv2d(x, self.posterior.mu, self.bias,
                      stride=self.stride, padding=self.padding)

    def reparam_forward(self, x: Tensor, rng: RngStream) -> Tensor:
        kernel = self.posterior.sample(rng)
        return conv2d(x, kernel, self.bias, stride=self.stride, padding=self.padding)

    def flipout_forward(self, x: Tensor, rng: RngStream) -> Tensor:
        """Shared-perturbation forward with per-sample sign flips.

        out_n = conv(x_n, mu) + r_n * conv(x_n * s_n, delta) + bias, where
        delta = sigma * eps is drawn once per call and r_n (out channels),
        s_n (in channels) are independent Rademacher vectors per sample.
        """
        n = x.data.shape[0]
        if n < 1:
            raise ShapeError("flipout_forward: batch must contain at least one sample")
        dtype = x.data.dtype
        mean_out = conv2d(x, self.posterior.mu, self.bias,
                          stride=self.stride, padding=self.padding)
        eps = Tensor(rng.normal(self.posterior.shape, dtype=dtype))
        delta = self.posterior.sigma() * eps
        s = Tensor(rng.rademacher((n, self.cin, 1, 1), dtype=dtype))
        r = Tensor(rng.rademacher((n, self.cout, 1, 1), dtype=dtype))
        perturbation = conv2d(x * s, delta, None,
                              stride=self.stride, padding=self.padding) * r
        return mean_out + perturbation

    def kl(self) -> Tensor:
        return kl_divergence(self.posterior, self.prior)

    def params(self) -> dict[str, Tensor]:
        return {"mu": self.posterior.mu, "rho": self.posterior.rho, "bias": self.bias}


class GroupNorm:
    """Group normalization with the clamped channels-per-group rule.

    `group_size` is channels per group; layers narrower than the target
    size fall back to a single group. The resulting group count must
    divide the channel count.
    """

    def __init__(self, channels: int, group_size: int = 32, eps: float = 1e-5,
                 dtype=np.float32):
        per_group = min(group_size, channels)
        if channels % per_group != 0:
            raise ShapeError(
                f"group_norm: {channels} channels not divisible by group size {per_group}")
        self.groups = channels // per_group
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor, rng: RngStream = None, mode: str = "frozen") -> Tensor:
        return group_norm(x, self.groups, self.gamma, self.beta, eps=self.eps)

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}
