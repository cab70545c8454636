"""AdamW optimizer, step schedule, masked heatmap loss and the train loop.

The learning rate starts at the configured base, drops by 10x at the
170/210 and 200/210 fractions of the run, and is additionally scaled per
parameter by layer_decay ** depth, where depth counts encoder layers from
the output side (decoder, matcher and prompts sit at depth 0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .tensor import ParamSet, Tensor, mul, sub, sum_all

__all__ = [
    "TrainConfig",
    "DivergenceError",
    "lr_at",
    "AdamW",
    "heatmap_loss",
    "train_loop",
    "prepare_samples",
]


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    weight_decay: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    total_steps: int = 2000
    milestone_fracs: tuple = (170.0 / 210.0, 200.0 / 210.0)
    lr_drop: float = 0.1
    layer_decay: float = 0.75
    batch_size: int = 16
    seed: int = 0
    finetune_mode: str = "full"
    log_every: int = 25

    def __post_init__(self):
        if not 0 < self.layer_decay <= 1:
            raise ValueError("layer_decay must lie in (0, 1]")
        fracs = tuple(self.milestone_fracs)
        if list(fracs) != sorted(fracs) or any(f >= 1.0 for f in fracs):
            raise ValueError("milestone fractions must be increasing and < 1")
        if self.finetune_mode not in ("full", "visual_prompt", "last_layer"):
            raise ValueError(f"unknown finetune mode {self.finetune_mode!r}")

    @property
    def milestones(self) -> tuple:
        return tuple(int(self.total_steps * f) for f in self.milestone_fracs)


def lr_at(step: int, config: TrainConfig, layer_depth: int = 0) -> float:
    if not 0 <= step < config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps})")
    passed = sum(1 for m in config.milestones if step >= m)
    return config.base_lr * (config.lr_drop ** passed) * (config.layer_decay ** layer_depth)


def _wants_decay(name: str, tensor: Tensor) -> bool:
    """Decoupled decay targets weight matrices only; norms, biases and prompt
    tokens are exempt."""
    return tensor.data.ndim >= 2 and "prompt" not in name


class AdamW:
    """Decoupled-weight-decay Adam over the trainable part of a ParamSet."""

    def __init__(self, paramset: ParamSet, config: TrainConfig, depth_of: dict | None = None):
        self.paramset = paramset
        self.config = config
        self.depth_of = depth_of or {}
        self.m: dict = {}
        self.v: dict = {}
        for name in paramset.trainable_names():
            p = paramset.params[name]
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)
        self.t = 0
        self.n_updates = 0

    def step(self, step_index: int) -> None:
        cfg = self.config
        b1, b2 = cfg.betas
        self.t += 1
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name in self.paramset.trainable_names():
            p = self.paramset.params[name]
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient for parameter {name!r} at step {step_index}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            if cfg.weight_decay and _wants_decay(name, p):
                update = update + cfg.weight_decay * p.data
            lr = lr_at(step_index, cfg, self.depth_of.get(name, 0))
            p.data -= (lr * update).astype(p.data.dtype)
            self.n_updates += 1


def heatmap_loss(pred, target, mask) -> Tensor:
    """Mean squared error over the cells of keypoints with a nonzero mask."""
    pred_t = pred.maps if hasattr(pred, "maps") else pred
    target_arr = target.array if hasattr(target, "array") else np.asarray(target)
    if pred_t.data.shape != target_arr.shape:
        raise ValueError(f"prediction {pred_t.data.shape} and target {target_arr.shape} differ")
    mask = np.asarray(mask, dtype=pred_t.data.dtype).reshape(-1)
    cells = float(mask.sum()) * target_arr.shape[1] * target_arr.shape[2]
    if cells == 0:
        return Tensor(np.zeros((), dtype=pred_t.data.dtype))
    diff = sub(pred_t, Tensor(target_arr.astype(pred_t.data.dtype)))
    masked = mul(mul(diff, diff), mask[:, None, None])
    return mul(sum_all(masked), 1.0 / cells)


@dataclass
class Sample:
    image_id: int
    instance: codec.PersonInstance
    inputs: Tensor
    transform: codec.CropTransform
    target: object
    mask: np.ndarray


def prepare_samples(images: dict, instances, input_hw: tuple, sigma: float = 2.0) -> list:
    """Crop every instance and build its heatmap target once, up front."""
    out = []
    grid = (input_hw[0] // 4, input_hw[1] // 4)
    for inst in instances:
        image = images[inst.image_id]
        inputs, transform = codec.affine_crop(image, inst.bbox, out_hw=input_hw)
        kp_in = transform.apply(inst.keypoints[:, :2])
        kp = np.concatenate([kp_in, inst.keypoints[:, 2:3]], axis=1)
        target, mask = codec.gaussian_targets(kp, sigma=sigma, grid_hw=grid)
        out.append(Sample(inst.image_id, inst, inputs, transform, target, mask))
    return out


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    log: list = field(default_factory=list)
    diverged: bool = False


def train_loop(model, samples: list, config: TrainConfig, log_path=None) -> TrainResult:
    """Deterministic single-threaded optimization of ``model`` on ``samples``.

    Applies the configured finetune mode before stepping; on divergence the
    parameters are rolled back to the last logged snapshot and a
    DivergenceError is raised after the rollback.
    """
    model.set_finetune_mode(config.finetune_mode)
    paramset = model.param_set()
    optimizer = AdamW(paramset, config, depth_of=model.layer_depths())
    rng = np.random.default_rng(config.seed)
    result = TrainResult()
    last_good = paramset.snapshot()
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(config.total_steps):
            picks = rng.integers(0, len(samples), size=config.batch_size)
            paramset.zero_grads()
            total = 0.0
            for idx in picks:
                sample = samples[int(idx)]
                heatmaps = model.forward(sample.inputs, sample.instance.category_id, training=True, rng=rng)
                loss = heatmap_loss(heatmaps, sample.target, sample.mask)
                if loss.requires_grad:
                    loss.backward(seed=np.asarray(1.0 / config.batch_size, dtype=loss.data.dtype))
                total += loss.item()
            mean_loss = total / config.batch_size
            if not np.isfinite(mean_loss):
                for name, value in last_good.items():
                    paramset.params[name].data[...] = value
                raise DivergenceError(f"loss diverged at step {step}; parameters rolled back")
            optimizer.step(step)
            result.losses.append(mean_loss)
            if step % config.log_every == 0 or step == config.total_steps - 1:
                entry = {"step": step, "loss": round(mean_loss, 8), "lr": lr_at(step, config)}
                result.log.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry) + "\n")
                    log_fh.flush()
                last_good = paramset.snapshot()
    finally:
        if log_fh:
            log_fh.close()
    return result
