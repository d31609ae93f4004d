"""End-to-end training through the simulated channel."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .. import ops
from ..channel import KINDS, sample_realization
from ..codec import MambaJSCC, checkpoint_hash, save_checkpoint
from ..tensor import backward
from .data import Image, random_crop
from .metrics import mse_loss
from .optim import Adam, clip_grad_norm

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    channel: str = "awgn"
    snr_min: float = 1.0
    snr_max: float = 20.0
    crop: int = 32
    seed: int = 0
    grad_clip: float = 0.0  # global-norm clip, 0 disables
    ssm_lr_scale: float = 1.0  # multiplier on the learning rate of scan parameters

    def __post_init__(self):
        if self.channel not in KINDS:
            raise ValueError(f"channel must be one of {KINDS}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.steps < 0 or self.crop < 1:
            raise ValueError("learning_rate >= 0, batch_size >= 1, steps >= 0, crop >= 1 required")
        if self.grad_clip < 0 or self.ssm_lr_scale < 0:
            raise ValueError("grad_clip and ssm_lr_scale must be non-negative")
        if self.snr_max < self.snr_min:
            raise ValueError("snr_max must be >= snr_min")

    def to_manifest(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


@dataclass
class TrainResult:
    losses: list[float]
    checkpoint: Path | None = None


def step_seed(seed: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 0x7A1, step])


def sample_snr(cfg: TrainConfig, rng: np.random.Generator) -> float:
    if cfg.snr_max == cfg.snr_min:
        return float(cfg.snr_min)
    return float(rng.uniform(cfg.snr_min, cfg.snr_max))


def train(cfg: TrainConfig, model: MambaJSCC, dataset: list[Image],
          out_dir: str | Path | None = None) -> TrainResult:
    """Adam over random crops; each sample draws its own SNR and channel realization."""
    if not dataset:
        raise ValueError("training dataset is empty")
    usable = [img for img in dataset
              if img.pixels.shape[1] >= cfg.crop and img.pixels.shape[2] >= cfg.crop]
    if not usable:
        raise ValueError(f"no image is at least {cfg.crop}x{cfg.crop}")
    named = list(model.named_parameters())
    scales = [cfg.ssm_lr_scale if ".vs6." in name else 1.0 for name, _ in named]
    params = [p for _, p in named]
    opt = Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
               eps=cfg.adam_eps, lr_scales=scales)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    losses: list[float] = []
    for step in range(cfg.steps):
        rng = np.random.default_rng(step_seed(cfg.seed, step))
        total = None
        for _ in range(cfg.batch_size):
            img = usable[int(rng.integers(len(usable)))]
            s = random_crop(img, cfg.crop, rng)
            realization = sample_realization(cfg.channel, sample_snr(cfg, rng), rng)
            l = mse_loss(s, model(s, realization))
            total = l if total is None else ops.add(total, l)
        loss = ops.mul(total, 1.0 / cfg.batch_size)
        value = loss.item()
        if not math.isfinite(value):
            _dump_divergence(out, cfg, step)
            raise TrainingDiverged(f"non-finite loss at step {step} (batch seed "
                                   f"{cfg.seed}/{step})")
        backward(loss)
        if cfg.grad_clip > 0:
            clip_grad_norm(params, cfg.grad_clip)
        opt.step()
        opt.zero_grad()
        losses.append(value)
        if step % 100 == 0:
            log.info("step %d loss %.6f", step, value)
    ckpt = None
    if out is not None:
        write_loss_curve(out / "loss_curve.csv", losses)
        ckpt = save_checkpoint(model, out / "checkpoint")
        write_run_manifest(out / "run_manifest.txt", cfg, model, ckpt)
    return TrainResult(losses, ckpt)


def write_loss_curve(path: Path, losses: list[float]) -> None:
    with open(path, "w", newline="") as f:
        f.write("step,loss\n")
        for i, v in enumerate(losses):
            f.write(f"{i},{v:.17g}\n")


def write_run_manifest(path: Path, cfg: TrainConfig, model: MambaJSCC, ckpt: Path) -> None:
    text = ["# model\n", model.config.to_manifest(), "# train\n", cfg.to_manifest(),
            f"checkpoint_hash = {checkpoint_hash(ckpt)}\n"]
    path.write_text("".join(text))


def _dump_divergence(out: Path | None, cfg: TrainConfig, step: int) -> None:
    msg = (f"non-finite loss\nstep = {step}\nseed = {cfg.seed}\n"
           f"batch_seed_entropy = {step_seed(cfg.seed, step).entropy}\n")
    log.error(msg)
    if out is not None:
        (out / "divergence.txt").write_text(msg + cfg.to_manifest())
