"""Autodiff-versus-finite-difference checks.

Gradients are compared with central differences (step ``1e-5``). The error
of one tensor is ``max|a - n| / max(max|a|, max|n|, floor)``: normalizing by
the tensor's gradient scale rather than per element keeps coordinates whose
true gradient is essentially zero from dividing noise by noise. The floor
``1e-6 * max(1, |loss|)`` sits a decade above the central-difference roundoff
``eps * |loss| / step``, so gradients below it are checked in absolute terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .. import ops
from ..channel import ChannelRealization
from ..codec import MambaJSCC, ModelConfig
from ..csi import CsiEmbedding, CsiEncoder
from ..ssm import VSSMBlock, vssm_block_forward
from ..tensor import Tensor, backward, tensor
from .metrics import mse_loss

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def rel_error(a: np.ndarray, n: np.ndarray, floor: float = FLOOR) -> float:
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    if a.size == 0:
        return 0.0
    denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), floor)
    return float(np.max(np.abs(a - n))) / denom


def scalarize(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce any output to a scalar with fixed random weights."""
    if out.size == 1:
        return ops.reshape(out, ())
    w = Tensor._wrap(rng.standard_normal(out.shape))
    return ops.sum(ops.mul(out, w))


def check(name: str, loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
          samples: int | None = None, rng: np.random.Generator | None = None,
          step: float = STEP) -> GradcheckResult:
    """Compare analytic and numeric gradients of ``loss_fn`` w.r.t. ``params``.

    With ``samples`` set, only that many random coordinates per tensor are
    perturbed (large models); otherwise every coordinate is.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss0 = loss_fn()
    floor = FLOOR * max(1.0, abs(loss0.item()))
    backward(loss0)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst, count = 0.0, 0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and flat.size > samples:
            idx = rng.choice(flat.size, size=samples, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn().item()
            flat[i] = orig - step
            fm = loss_fn().item()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * step)
        worst = max(worst, rel_error(ga.reshape(-1)[idx], num, floor))
        count += len(idx)
    for p in params:
        p.grad = None
    return GradcheckResult(name, worst, count)


def _leaf(rng, shape, low=None, high=None) -> Tensor:
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, high, size=shape)
    return tensor(data, requires_grad=True)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """``name -> (fn(*inputs) -> Tensor, inputs)`` for every differentiable primitive."""
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    pos = _leaf(rng, (3, 4), 0.5, 2.0)
    m1, m2 = _leaf(rng, (3, 5)), _leaf(rng, (5, 2))
    b1, b2 = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4, 2))
    img = _leaf(rng, (2, 4, 4))
    w = _leaf(rng, (3, 2, 3, 3))
    wd = _leaf(rng, (2, 1, 3, 3))
    bias = _leaf(rng, (3,))
    ln_x, gamma, beta = _leaf(rng, (4, 5)), _leaf(rng, (5,)), _leaf(rng, (5,))
    ps = _leaf(rng, (8, 2, 3))
    sq = _leaf(rng, (3, 3))
    return {
        "add": (ops.add, [a, b]),
        "sub": (ops.sub, [a, b]),
        "mul": (ops.mul, [a, b]),
        "div": (ops.div, [a, pos]),
        "neg": (ops.neg, [a]),
        "power": (lambda x: ops.power(x, 1.5), [pos]),
        "reciprocal": (ops.reciprocal, [pos]),
        "exp": (ops.exp, [a]),
        "sigmoid": (ops.sigmoid, [a]),
        "silu": (ops.silu, [a]),
        "sum": (ops.sum, [a]),
        "mean": (ops.mean, [a]),
        "matmul": (ops.matmul, [m1, m2]),
        "bmm": (ops.bmm, [b1, b2]),
        "reshape": (lambda x: ops.reshape(x, (4, 3)), [a]),
        "permute": (lambda x: ops.permute(x, (2, 0, 1)), [b1]),
        "flip": (lambda x: ops.flip(x, 1), [a]),
        "getitem": (lambda x: ops.getitem(x, (slice(0, 2), 1)), [a]),
        "stack": (lambda x, y: ops.stack([x, y], axis=1), [a, b]),
        "broadcast_to": (lambda x: ops.broadcast_to(ops.reshape(x, (3, 4, 1)), (3, 4, 2)), [a]),
        "pixel_shuffle": (lambda x: ops.pixel_shuffle(x, 2), [ps]),
        "pixel_unshuffle": (lambda x: ops.pixel_unshuffle(x, 2), [img]),
        "conv2d": (lambda x, k, c: ops.conv2d(x, k, c, stride=1, padding=1), [img, w, bias]),
        "conv2d_strided": (lambda x, k: ops.conv2d(x, k, stride=2), [img, w]),
        "conv2d_depthwise": (lambda x, k: ops.conv2d(x, k, padding=1, groups=2), [img, wd]),
        "layer_norm": (ops.layer_norm, [ln_x, gamma, beta]),
        "mse": (ops.mse, [a, b]),
        "matrix_exp": (lambda x: _matrix_exp(ops.mul(x, 0.5)), [sq]),
    }


def _matrix_exp(x: Tensor) -> Tensor:
    from ..ssm import matrix_exp
    return ops.reshape(matrix_exp(ops.reshape(x, (1, *x.shape))), x.shape)


def check_primitives(seed: int) -> list[GradcheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, inputs) in primitive_cases(rng).items():
        wrng = np.random.default_rng([seed, len(results)])
        weights_rng_state = wrng.bit_generator.state

        def loss(fn=fn, inputs=inputs):
            wrng.bit_generator.state = weights_rng_state
            return scalarize(fn(*inputs), wrng)

        results.append(check(name, loss, inputs))
    return results


def check_block(seed: int, channels: int = 2, hw: int = 4, n_state: int = 2,
                csi_dim: int = 4) -> GradcheckResult:
    """One VSSM block with CSI embedding: input, every block and CSI parameter."""
    rng = np.random.default_rng(seed)
    block = VSSMBlock(channels, hw, hw, rng, n_state=n_state)
    enc = CsiEncoder(csi_dim, rng)
    emb = CsiEmbedding(csi_dim, block.inner_channels, rng)
    for m in (block, enc, emb):
        _rescale(m, rng)
    x = _leaf(rng, (channels, hw, hw))
    w = rng.standard_normal((channels, hw, hw))

    def loss():
        out = vssm_block_forward(x, block, emb.offsets(enc(7.0)))
        return ops.sum(ops.mul(out, Tensor._wrap(w)))

    params = [x, *block.parameters(), *enc.parameters(), *emb.parameters()]
    return check("vssm_ca_block", loss, params, samples=8, rng=rng)


def _rescale(module, rng: np.random.Generator) -> None:
    """Redraw a generic, well-conditioned evaluation point.

    Weights get fan-in scale and scan parameters a 0.1 perturbation: large
    enough that every gradient sits above finite-difference noise, small
    enough that the scan stays contractive.
    """
    for name, p in module.named_parameters():
        if ".vs6." in f".{name}" or name.startswith("vs6."):
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
        elif name.endswith("weight"):
            fan_in = int(np.prod(p.shape[1:]))
            p.data = rng.standard_normal(p.shape) / np.sqrt(fan_in)
        else:
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)


def _perturb(module, rng: np.random.Generator, scale: float = 0.05) -> None:
    """Move parameters off their symmetric init so every path carries gradient."""
    for p in module.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def check_pipeline(seed: int, cfg: ModelConfig | None = None, samples: int = 2,
                   snr_db: float = 10.0) -> GradcheckResult:
    """encode -> channel (fixed noise) -> decode -> MSE on a desk-scale codec."""
    cfg = cfg or ModelConfig.desk()
    rng = np.random.default_rng(seed)
    model = MambaJSCC(cfg, seed=seed)
    _perturb(model, rng, scale=0.01)
    H, W = cfg.image_size
    s = Tensor._wrap(rng.uniform(0.0, 1.0, size=(3, H, W)))
    realization = ChannelRealization("awgn", snr_db, noise_seed=seed)

    def loss():
        return mse_loss(s, model(s, realization))

    return check("pipeline", loss, model.parameters(), samples=samples, rng=rng)


def run_all(seeds: Sequence[int] = (0, 1, 2, 3, 4), pipeline: bool = True) -> list[GradcheckResult]:
    results = []
    for seed in seeds:
        results += [GradcheckResult(f"{r.name}[{seed}]", r.max_rel_error, r.checked)
                    for r in check_primitives(seed)]
        r = check_block(seed)
        results.append(GradcheckResult(f"{r.name}[{seed}]", r.max_rel_error, r.checked))
        if pipeline:
            r = check_pipeline(seed)
            results.append(GradcheckResult(f"{r.name}[{seed}]", r.max_rel_error, r.checked))
    return results
