"""Monte Carlo predictive inference and uncertainty decomposition.

T stochastic passes yield per-pixel probability maps y_t and predicted
variances s2_t. The predictive variance splits into two maps:

    term1 = mean(y_t^2) - mean(y_t)^2      (spread of the MC means)
    term2 = mean(s2_t)                     (mean of the predicted variances)

`label_convention` controls which term is reported as "aleatoric": the
default ties term1 to aleatoric and term2 to epistemic; `kendall_gal`
swaps the names. The numbers themselves never change, only the labels.

The network's variance head lives in logit space. With
`variance_space="probability"` (default) each s2_t is mapped through the
delta method, (p(1-p))^2 * s2, so both terms share probability units;
`variance_space="logit"` keeps the raw head output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .tensor import ShapeError, Tensor, no_grad
from .unet import ModelGraph

SWEEP_REPEAT_SHIFT = 20  # stream_id = (repeat << SHIFT) | pass_index


@dataclass
class McConfig:
    T: int = 20
    seed: int = 0
    variance_space: str = "probability"  # or "logit"
    label_convention: str = "paper"      # or "kendall_gal"

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.variance_space not in ("probability", "logit"):
            raise ValueError(f"unknown variance_space: {self.variance_space!r}")
        if self.label_convention not in ("paper", "kendall_gal"):
            raise ValueError(f"unknown label_convention: {self.label_convention!r}")


@dataclass
class UncertaintyResult:
    """Per-pixel maps plus their spatial means; total = term1 + term2 exactly."""
    mean_map: np.ndarray
    term1_map: np.ndarray
    term2_map: np.ndarray
    total_map: np.ndarray
    mean_term1: float
    mean_term2: float
    mean_total: float
    label_convention: str = "paper"

    def _labels(self):
        if self.label_convention == "paper":
            return {"aleatoric": (self.term1_map, self.mean_term1),
                    "epistemic": (self.term2_map, self.mean_term2)}
        return {"aleatoric": (self.term2_map, self.mean_term2),
                "epistemic": (self.term1_map, self.mean_term1)}

    @property
    def aleatoric_map(self) -> np.ndarray:
        return self._labels()["aleatoric"][0]

    @property
    def epistemic_map(self) -> np.ndarray:
        return self._labels()["epistemic"][0]

    @property
    def mean_aleatoric(self) -> float:
        return self._labels()["aleatoric"][1]

    @property
    def mean_epistemic(self) -> float:
        return self._labels()["epistemic"][1]


def _to_batch(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"image must be [H,W], [1,H,W] or [N,1,H,W], got {arr.shape}")
    return arr


def mc_predict_batch(model: ModelGraph, images: np.ndarray, cfg: McConfig,
                     stream_id_base: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """T stochastic passes over a batch; returns (probs, logit_vars) [T,N,H,W].

    Pass t draws its weights from stream_id = stream_id_base | t, so results
    do not depend on evaluation order and the same kernel sample is shared
    by every image in the batch (common random numbers).
    """
    batch = _to_batch(images).astype(model.dtype)
    probs, lvars = [], []
    with no_grad():
        for t in range(cfg.T):
            rng = RngStream(cfg.seed, stream_id=stream_id_base | t)
            out = model.forward(Tensor(batch), mode="sample", rng=rng)
            probs.append(out[:, 0].sigmoid().data)
            lvars.append(np.exp(np.minimum(out[:, 1].data, 30.0)))
    return np.stack(probs), np.stack(lvars)


def mc_predict(model: ModelGraph, image: np.ndarray, cfg: McConfig,
               stream_id_base: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """T independent (probability map, logit-space variance map) samples."""
    probs, lvars = mc_predict_batch(model, image, cfg, stream_id_base)
    return [(probs[t, 0], lvars[t, 0]) for t in range(cfg.T)]


def decompose_uncertainty(samples, cfg: McConfig) -> UncertaintyResult:
    """Split T MC samples into the two variance terms (needs T >= 2)."""
    if len(samples) < 2:
        raise ValueError(f"uncertainty decomposition needs T >= 2 samples, got {len(samples)}")
    ys = np.stack([np.asarray(y, dtype=np.float64) for y, _ in samples])
    v_logit = np.stack([np.asarray(v, dtype=np.float64) for _, v in samples])
    if cfg.variance_space == "probability":
        variances = (ys * (1.0 - ys)) ** 2 * v_logit
    else:
        variances = v_logit
    mean_map = ys.mean(axis=0)
    # clamp float round-off so the variance term never dips below zero
    term1 = np.maximum((ys * ys).mean(axis=0) - mean_map * mean_map, 0.0)
    term2 = variances.mean(axis=0)
    total = term1 + term2
    mean_term1 = float(term1.mean())
    mean_term2 = float(term2.mean())
    # scalar total defined as the sum so additivity is exact at both levels
    return UncertaintyResult(
        mean_map=mean_map, term1_map=term1, term2_map=term2, total_map=total,
        mean_term1=mean_term1, mean_term2=mean_term2,
        mean_total=mean_term1 + mean_term2, label_convention=cfg.label_convention)


def summarize(result: UncertaintyResult, mask: np.ndarray = None) -> dict[str, float]:
    """Scalar means of the maps, optionally restricted to a pixel mask."""
    if mask is None:
        t1, t2, tot = result.mean_term1, result.mean_term2, result.mean_total
    else:
        sel = np.asarray(mask, dtype=bool)
        if sel.shape != result.total_map.shape:
            raise ShapeError(f"mask shape {sel.shape} != map shape {result.total_map.shape}")
        if not sel.any():
            raise ValueError("summarize: empty mask region")
        t1 = float(result.term1_map[sel].mean())
        t2 = float(result.term2_map[sel].mean())
        tot = float(result.total_map[sel].mean())
    if result.label_convention == "paper":
        ale, epi = t1, t2
    else:
        ale, epi = t2, t1
    return {"mean_term1": t1, "mean_term2": t2, "mean_total": tot,
            "mean_aleatoric": ale, "mean_epistemic": epi}


def t_sweep(model: ModelGraph, images, t_values=(5, 10, 15, 20, 25, 30),
            repeats: int = 20, cfg: McConfig = None) -> list[dict]:
    """Spread of the scalar uncertainty estimates as the MC budget grows.

    For each T, the mean term1/term2 over `images` is re-estimated with
    `repeats` independent weight-noise streams, and the variance of those
    estimates across repeats is reported.
    """
    if repeats < 2:
        raise ValueError(f"t_sweep needs repeats >= 2, got {repeats}")
    cfg = cfg or McConfig()
    batch = np.stack([_to_batch(img)[0] for img in images])
    rows = []
    for t_val in t_values:
        if t_val < 2:
            raise ValueError(f"t_sweep requires T >= 2, got {t_val}")
        est1, est2 = [], []
        pass_cfg = McConfig(T=t_val, seed=cfg.seed,
                            variance_space=cfg.variance_space,
                            label_convention=cfg.label_convention)
        for r in range(repeats):
            probs, lvars = mc_predict_batch(model, batch, pass_cfg,
                                            stream_id_base=(r + 1) << SWEEP_REPEAT_SHIFT)
            t1_vals, t2_vals = [], []
            for i in range(batch.shape[0]):
                res = decompose_uncertainty(
                    [(probs[t, i], lvars[t, i]) for t in range(t_val)], pass_cfg)
                t1_vals.append(res.mean_term1)
                t2_vals.append(res.mean_term2)
            est1.append(float(np.mean(t1_vals)))
            est2.append(float(np.mean(t2_vals)))
        rows.append({
            "T": t_val,
            "var_term1": float(np.var(est1, ddof=1)),
            "var_term2": float(np.var(est2, ddof=1)),
            "mean_term1": float(np.mean(est1)),
            "mean_term2": float(np.mean(est2)),
        })
    return rows
