"""Training objectives: least-squares adversarial, binary cross entropy,
Potts, and normalized-cut losses, plus their warm-up weighted combination.

Conventions (pinned by the acceptance tests): BCE and Potts are normalized
per pixel, adversarial terms are batch means, and the normalized cut is the
scale-free ratio form with a 1e-6 denominator floor. The two-channel
segmentation is [p, 1-p] built from the generator's sigmoid output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .affinity import AffinityMatrix, apply_batch
from .tensor import Tensor

BCE_CLAMP = 1e-7
NCUT_DENOM_EPS = 1e-6

LOG_COLUMNS = ("batch_index", "L_D", "L_GAN", "L_BCE_G", "L_BCE_R",
               "L_Potts", "L_ncut", "total")


@dataclass
class LossWeights:
    """Objective coefficients with linear warm-up of the regularized terms."""

    alpha: float = 3.0
    beta: float = 3.0
    gamma: float = 1.0
    delta_max: float = 200.0
    epsilon_max: float = 2.0
    warmup_batches: int = 30000
    batch_index: int = 0

    def _ramp(self, t: int) -> float:
        if self.warmup_batches <= 0:
            return 1.0
        return min(1.0, max(0.0, t) / self.warmup_batches)

    def delta_at(self, t: int) -> float:
        return self.delta_max * self._ramp(t)

    def epsilon_at(self, t: int) -> float:
        return self.epsilon_max * self._ramp(t)

    @property
    def delta(self) -> float:
        return self.delta_at(self.batch_index)

    @property
    def epsilon(self) -> float:
        return self.epsilon_at(self.batch_index)


class SegmentationMask:
    """Two-class segmentation [p, 1-p] over a batch of probability maps."""

    def __init__(self, p: Tensor):
        if p.data.ndim != 4 or p.data.shape[1] != 1:
            raise tc.ShapeError("segmentation", f"need (N,1,H,W), got {p.data.shape}")
        self.p = p

    @property
    def k(self) -> int:
        return 2

    def channels(self) -> tuple[Tensor, Tensor]:
        return self.p, tc.rsub(self.p, 1.0)

    @property
    def raster(self) -> tuple[int, int]:
        return self.p.data.shape[2], self.p.data.shape[3]


def _check_scores(name: str, scores: Tensor) -> None:
    d = scores.data
    if d.size == 0:
        raise ValueError(f"{name}: empty batch")
    if not np.all(np.isfinite(d)) or d.min() < 0.0 or d.max() > 1.0:
        raise ValueError(f"{name}: scores must lie in [0, 1]")


def loss_discriminator(d_on_recon: Tensor, d_on_gen: Tensor) -> Tensor:
    """Least-squares discriminator objective:
    mean (1 - D(R(y)))^2 + mean D(G(x,z))^2."""
    _check_scores("loss_discriminator", d_on_recon)
    _check_scores("loss_discriminator", d_on_gen)
    real = tc.rsub(d_on_recon, 1.0)
    return tc.tmean(real * real) + tc.tmean(d_on_gen * d_on_gen)


def loss_gan_generator(d_on_gen: Tensor) -> Tensor:
    """Least-squares generator objective: mean (1 - D(G(x,z)))^2."""
    _check_scores("loss_gan_generator", d_on_gen)
    diff = tc.rsub(d_on_gen, 1.0)
    return tc.tmean(diff * diff)


def loss_bce(target, prediction: Tensor, one_sided: bool = False) -> Tensor:
    """Per-pixel mean binary cross entropy with the prediction clamped to
    [1e-7, 1 - 1e-7]. ``one_sided`` keeps only the positive term."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, np.float32)
    if t.shape != prediction.data.shape:
        raise tc.ShapeError("loss_bce", f"target {t.shape} vs prediction {prediction.data.shape}")
    p = tc.clip(prediction, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pos = tc.log(p) * t
    if one_sided:
        return tc.tmean(pos) * -1.0
    neg = tc.log(tc.rsub(p, 1.0)) * (1.0 - t)
    return tc.tmean(pos + neg) * -1.0


def _matrices_for(seg: SegmentationMask, mats) -> list:
    n = seg.p.data.shape[0]
    if isinstance(mats, AffinityMatrix):
        mats = [mats] * n
    mats = list(mats)
    if len(mats) != n:
        raise ValueError(f"{len(mats)} affinity matrices for a batch of {n}")
    return mats


def _degree_stack(mats) -> np.ndarray:
    return np.stack([m.degree().reshape(1, m.height, m.width) for m in mats])


def loss_potts(seg: SegmentationMask, mats) -> Tensor:
    """sum_k s_k . W (1 - s_k), divided by the pixel count, batch-averaged.

    With s = [p, 1-p] this reduces to p.d + 1.Wp - 2 p.Wp, needing a single
    matrix product per sample.
    """
    mats = _matrices_for(seg, mats)
    p = seg.p
    n_pix = p.data.shape[2] * p.data.shape[3]
    a = apply_batch(mats, p)
    deg = _degree_stack(mats)
    per_sample = (tc.sum_per_sample(p * deg) + tc.sum_per_sample(a)
                  - 2.0 * tc.sum_per_sample(p * a))
    return tc.tmean(per_sample * (1.0 / n_pix))


def loss_ncut(seg: SegmentationMask, mats) -> Tensor:
    """sum_k [s_k . W (1 - s_k)] / [d . s_k + 1e-6], batch-averaged."""
    mats = _matrices_for(seg, mats)
    p = seg.p
    a = apply_batch(mats, p)
    deg = _degree_stack(mats)
    pa = tc.sum_per_sample(p * a)
    pd = tc.sum_per_sample(p * deg)
    a_total = tc.sum_per_sample(a)
    d_total = np.array([m.degree().sum(dtype=np.float64) for m in mats], np.float32)
    num_fg = pd - pa                      # p . W(1-p)
    den_fg = pd + NCUT_DENOM_EPS
    num_bg = a_total - pa                 # (1-p) . Wp
    den_bg = tc.rsub(pd, d_total) + NCUT_DENOM_EPS
    return tc.tmean(tc.div(num_fg, den_fg) + tc.div(num_bg, den_bg))


@dataclass
class LossComponents:
    """Unweighted scalar loss terms of one batch; regularized terms may be
    absent when their coefficients are zero."""

    l_gan: Tensor
    l_bce_g: Tensor
    l_bce_r: Tensor
    l_potts: Tensor | None = None
    l_ncut: Tensor | None = None


def full_objective(components: LossComponents, weights: LossWeights) -> Tensor:
    """alpha L_GAN + beta L_BCE_G + gamma L_BCE_R + delta(t) L_Potts
    + epsilon(t) L_ncut, with t = weights.batch_index.

    Zero-coefficient terms are omitted from the graph, so during warm-up
    the regularized losses contribute exactly zero gradient.
    """
    total = (components.l_gan * weights.alpha
             + components.l_bce_g * weights.beta
             + components.l_bce_r * weights.gamma)
    delta = weights.delta
    epsilon = weights.epsilon
    if delta != 0.0:
        if components.l_potts is None:
            raise ValueError("delta > 0 but no Potts component")
        total = total + components.l_potts * delta
    if epsilon != 0.0:
        if components.l_ncut is None:
            raise ValueError("epsilon > 0 but no normalized-cut component")
        total = total + components.l_ncut * epsilon
    return total
