"""Adversarial training loop.

Each batch runs two sub-steps on the same samples: (a) a discriminator
update on detached generator and reconstruction outputs, then (b) one joint
update of both encoders and the shared decoder against the full objective
with the discriminator frozen. Optimizer is Adam for every net, with one
learning-rate schedule shared by all of them: constant, then linear decay
to zero.

Checkpoints carry parameters, batch-norm statistics, Adam moments, and the
sampler RNG state, so an interrupted single-threaded run resumes
bit-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, nets
from . import tensor as tc
from .affinity import AffinityParams, build_affinity
from .losses import LossComponents, LossWeights, SegmentationMask
from .nets import NetConfig, NetworkBundle
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries the offending batch record."""

    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at batch {record.get('batch_index')}: {record}")
        self.record = record


@dataclass(frozen=True)
class Schedule:
    """Constant learning rate, then linear decay to zero."""

    total_batches: int = 80000
    constant_batches: int = 60000
    base_lr: float = 2e-4
    warmup_batches: int = 30000

    def __post_init__(self):
        if not 0 < self.constant_batches <= self.total_batches:
            raise ValueError(f"bad schedule phases: {self}")

    @property
    def decay_batches(self) -> int:
        return self.total_batches - self.constant_batches

    def lr_at(self, t: int) -> float:
        if not 0 <= t < self.total_batches:
            raise ValueError(f"batch index {t} outside [0, {self.total_batches})")
        if t < self.constant_batches:
            return self.base_lr
        return self.base_lr * (self.total_batches - t) / self.decay_batches

    @classmethod
    def scaled(cls, total_batches: int, base_lr: float = 2e-4) -> "Schedule":
        """Shrink the published 80k/60k/30k schedule, preserving its fractions
        (75% constant, 25% decay, 37.5% warm-up)."""
        return cls(total_batches=total_batches,
                   constant_batches=int(total_batches * 0.75),
                   base_lr=base_lr,
                   warmup_batches=int(total_batches * 0.375))


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    slots: dict = field(default_factory=dict)

    def slot(self, name: str, shape) -> AdamSlot:
        if name not in self.slots:
            self.slots[name] = AdamSlot(np.zeros(shape, np.float32),
                                        np.zeros(shape, np.float32))
        return self.slots[name]


def adam_update(param: Tensor, slot: AdamSlot, lr: float, opt: OptimizerState) -> None:
    """Standard Adam with bias correction, float32 throughout."""
    g = param.grad if param.grad is not None else np.zeros_like(param.data)
    slot.step += 1
    b1 = np.float32(opt.beta1)
    b2 = np.float32(opt.beta2)
    slot.m = b1 * slot.m + np.float32(1.0 - opt.beta1) * g
    slot.v = b2 * slot.v + np.float32(1.0 - opt.beta2) * (g * g)
    mhat = slot.m / np.float32(1.0 - opt.beta1 ** slot.step)
    vhat = slot.v / np.float32(1.0 - opt.beta2 ** slot.step)
    param.data -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(opt.eps))


def _update_group(params, opt: OptimizerState, lr: float) -> None:
    for name, p in params.items():
        adam_update(p, opt.slot(name, p.data.shape), lr, opt)


def _require_finite(record: dict) -> None:
    for key, val in record.items():
        if isinstance(val, float) and not math.isfinite(val):
            raise TrainingDiverged(record)


def train_step(x: np.ndarray, z: np.ndarray, y: np.ndarray,
               bundle: NetworkBundle, opt: OptimizerState,
               weights: LossWeights, affinities, lr: float,
               bce_one_sided: bool = False) -> dict:
    """One batch: discriminator sub-step, then the joint sub-step.
    ``affinities`` is one AffinityMatrix per sample, or None when both
    regularizer weights are permanently zero. Returns the loss record."""
    tc.clear_graph()
    t = weights.batch_index
    xt, zt, yt = Tensor(x), Tensor(z), Tensor(y)
    g_out = nets.generator_forward(xt, zt, bundle, training=True)
    r_out = nets.reconstruction_forward(yt, bundle, training=True)
    for name, out in (("G(x,z)", g_out), ("R(y)", r_out)):
        if not np.all(np.isfinite(out.data)):
            raise TrainingDiverged({"batch_index": t, "non_finite": name})

    # (a) discriminator: minimize (1 - D(R(y)))^2 + D(G(x,z))^2, paths detached
    d_real = nets.discriminator_forward(r_out.detach(), bundle, training=True)
    d_fake = nets.discriminator_forward(g_out.detach(), bundle, training=True)
    l_d = losses.loss_discriminator(d_real, d_fake)
    record = {"batch_index": t, "L_D": l_d.item()}
    _require_finite(record)
    disc_params = bundle.discriminator_parameters()
    tc.zero_grads(disc_params.values())
    tc.backward(l_d)
    _update_group(disc_params, opt, lr)

    # (b) joint E_G / E_R / F update against the full objective, D frozen
    d_gen = nets.discriminator_forward(g_out, bundle, training=True)
    l_gan = losses.loss_gan_generator(d_gen)
    l_bce_g = losses.loss_bce(x, g_out, one_sided=bce_one_sided)
    l_bce_r = losses.loss_bce(y, r_out, one_sided=bce_one_sided)
    l_potts = l_ncut = None
    if affinities is not None:
        seg = SegmentationMask(g_out)
        l_potts = losses.loss_potts(seg, affinities)
        l_ncut = losses.loss_ncut(seg, affinities)
    comp = LossComponents(l_gan=l_gan, l_bce_g=l_bce_g, l_bce_r=l_bce_r,
                          l_potts=l_potts, l_ncut=l_ncut)
    total = losses.full_objective(comp, weights)
    record.update({
        "L_GAN": l_gan.item(), "L_BCE_G": l_bce_g.item(), "L_BCE_R": l_bce_r.item(),
        "L_Potts": l_potts.item() if l_potts is not None else 0.0,
        "L_ncut": l_ncut.item() if l_ncut is not None else 0.0,
        "total": total.item(),
    })
    _require_finite(record)
    gen_params = bundle.generator_parameters()
    tc.zero_grads(gen_params.values())
    tc.backward(total)
    _update_group(gen_params, opt, lr)
    tc.clear_graph()
    return record


class AffinityCache:
    """Per-sample affinity matrices, built lazily from the intensity images.
    They depend only on z, so one cache serves the whole run."""

    def __init__(self, dataset, params: AffinityParams):
        self.dataset = dataset
        self.params = params
        self._cache: dict = {}

    def for_indices(self, indices) -> list:
        out = []
        for i in indices:
            key = int(i)
            if key not in self._cache:
                self._cache[key] = build_affinity(self.dataset.z[key], self.params)
            out.append(self._cache[key])
        return out


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    batches_run: int


def _rng_state_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _rng_from_json(payload: str) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(payload)
    return rng


def _sample_batch(rng, train_idx: np.ndarray, batch_size: int) -> np.ndarray:
    replace = train_idx.size < batch_size
    return rng.choice(train_idx, size=batch_size, replace=replace)


def _save_state(path, bundle, opt, rng, t_next, schedule, weights, meta_extra=None):
    extra = {}
    for name, slot in opt.slots.items():
        extra[f"opt.{name}.m"] = slot.m
        extra[f"opt.{name}.v"] = slot.v
        extra[f"opt.{name}.step"] = np.float32(slot.step)
    meta = {
        "batch_next": str(t_next),
        "rng_state": _rng_state_json(rng),
        "schedule.total_batches": str(schedule.total_batches),
        "schedule.constant_batches": str(schedule.constant_batches),
        "schedule.base_lr": repr(schedule.base_lr),
        "schedule.warmup_batches": str(schedule.warmup_batches),
        "weights.alpha": repr(weights.alpha), "weights.beta": repr(weights.beta),
        "weights.gamma": repr(weights.gamma), "weights.delta_max": repr(weights.delta_max),
        "weights.epsilon_max": repr(weights.epsilon_max),
        "weights.warmup_batches": str(weights.warmup_batches),
    }
    meta.update(meta_extra or {})
    nets.save_checkpoint(path, bundle, extra_tensors=extra, meta=meta)


def load_training_state(path):
    """Rebuild (bundle, optimizer, rng, batch_next) from a checkpoint."""
    bundle, extra, meta = nets.load_checkpoint(path)
    opt = OptimizerState()
    for key, arr in extra.items():
        if not key.startswith("opt."):
            continue
        name, _, kind = key[4:].rpartition(".")
        slot = opt.slot(name, arr.shape if kind != "step" else (1,))
        if kind == "m":
            slot.m = arr
        elif kind == "v":
            slot.v = arr
        elif kind == "step":
            slot.step = int(arr)
    rng = _rng_from_json(meta["rng_state"])
    return bundle, opt, rng, int(meta["batch_next"]), meta


def _truncate_log(log_path: Path, keep_below: int) -> None:
    if not log_path.exists():
        return
    lines = log_path.read_text().splitlines()
    kept = [lines[0]] if lines else []
    for row in lines[1:]:
        try:
            if int(row.split(",", 1)[0]) < keep_below:
                kept.append(row)
        except ValueError:
            continue
    log_path.write_text("".join(line + "\n" for line in kept))


def run_training(dataset, out_dir, *, net_config: NetConfig, schedule: Schedule,
                 weights: LossWeights, affinity_params: AffinityParams,
                 batch_size: int = 8, seed: int = 0, checkpoint_interval: int = 1000,
                 resume=None, stop_after: int | None = None, threads: int = 0,
                 bce_one_sided: bool = False, progress=None) -> TrainResult:
    """Train to the schedule's budget, checkpointing every interval.

    ``stop_after`` interrupts the run at that batch count (a checkpoint is
    always written there); resuming from it continues the same trajectory.
    ``threads=1`` pins BLAS pools to one thread for bit-exact reproducibility;
    0 leaves the ambient configuration alone. On divergence the loss log and
    the last interval checkpoint are retained and TrainingDiverged propagates.
    """
    if len(dataset.train_idx) == 0:
        raise ValueError("dataset has no training split")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.csv"

    if resume is not None:
        bundle, opt, rng, start, _ = load_training_state(resume)
        _truncate_log(log_path, start)
        log_handle = log_path.open("a")
    else:
        bundle = nets.init_parameters(net_config, seed)
        opt = OptimizerState()
        rng = np.random.default_rng(seed)
        start = 0
        log_handle = log_path.open("w")
        log_handle.write(",".join(losses.LOG_COLUMNS) + "\n")

    use_reg = weights.delta_max > 0.0 or weights.epsilon_max > 0.0
    cache = AffinityCache(dataset, affinity_params) if use_reg else None

    stop = schedule.total_batches if stop_after is None else min(stop_after,
                                                                 schedule.total_batches)

    def loop():
        last_ckpt = Path(resume) if resume is not None else None
        completed = start
        try:
            for t in range(start, stop):
                idx = _sample_batch(rng, dataset.train_idx, batch_size)
                weights.batch_index = t
                affinities = cache.for_indices(idx) if cache is not None else None
                record = train_step(dataset.x[idx], dataset.z[idx], dataset.y[idx],
                                    bundle, opt, weights, affinities,
                                    lr=schedule.lr_at(t), bce_one_sided=bce_one_sided)
                log_handle.write(",".join(
                    f"{record[c]:.6g}" if c != "batch_index" else str(record[c])
                    for c in losses.LOG_COLUMNS) + "\n")
                completed = t + 1
                if completed % checkpoint_interval == 0 or completed == stop:
                    log_handle.flush()
                    last_ckpt = out / f"ckpt_{completed:06d}.freg"
                    _save_state(last_ckpt, bundle, opt, rng, completed, schedule, weights)
                if progress is not None:
                    progress(t, record)
        finally:
            log_handle.close()
        return TrainResult(checkpoint=last_ckpt, log_path=log_path,
                           batches_run=completed)

    if threads == 1:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=1):
            return loop()
    return loop()
