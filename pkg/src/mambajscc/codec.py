"""Hierarchical encoder/decoder built from VSSM-CA blocks.

Encoder: stride-2 patch embedding, then per stage (patch merging for k >= 2)
and a stack of blocks, then a 1x1 convolution down to ``2c`` real channels.
Decoder mirrors it: 1x1 expansion, then per stage a stack of blocks followed
by 2D patch division (layer norm, FC to ``4 * c_{k-1}``, pixel shuffle); the
last division emits the 3 image channels at full resolution.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import ops
from .channel import ChannelRealization, mmse_equalize, power_normalize, transmit
from .csi import CsiEmbedding, CsiEncoder, CsiVector
from .nn import ChannelLayerNorm, Conv2d, Linear, Module
from .ssm import EXP_MODES, VSSMBlock, vssm_block_forward
from .tensor import DimensionError, Tensor, load_tensor, save_tensor

CSI_MODES = ("off", "embed")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    num_blocks: int
    channels: int
    height: int
    width: int


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (256, 256)
    channels: tuple[int, ...] = (128, 192, 256, 320)
    blocks: tuple[int, ...] = (2, 2, 6, 2)
    decoder_blocks: tuple[int, ...] | None = None
    cbr: Fraction = Fraction(3, 128)
    csi_mode: str = "embed"
    n_state: int = 16
    expansion: int = 2
    csi_dim: int = 128
    embed_kernel: int = 2
    exp_mode: str = "matrix"
    csi_snr_ceiling_db: float = 20.0

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(image_size=(32, 32), channels=(8, 16), blocks=(1, 1),
                    cbr=Fraction(1, 16), n_state=4, csi_dim=16)
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        object.__setattr__(self, "cbr", Fraction(self.cbr))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.decoder_blocks is not None:
            object.__setattr__(self, "decoder_blocks", tuple(self.decoder_blocks))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def validate(self) -> None:
        H, W = self.image_size
        L = self.num_stages
        if L < 1 or len(self.blocks) != L:
            raise ConfigError(f"need one block count per stage: channels={self.channels}, blocks={self.blocks}")
        if self.decoder_blocks is not None and len(self.decoder_blocks) != L:
            raise ConfigError("decoder_blocks must have one entry per stage")
        if any(c2 <= c1 for c1, c2 in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"stage channels must strictly increase, got {self.channels}")
        if min(self.channels) < 1 or min(self.blocks) < 0:
            raise ConfigError("channels must be positive and block counts non-negative")
        if H % (2 ** L) or W % (2 ** L):
            raise ConfigError(f"image {H}x{W} not divisible by 2^{L} for a {L}-stage ladder")
        if self.csi_mode not in CSI_MODES:
            raise ConfigError(f"csi_mode must be one of {CSI_MODES}")
        if self.exp_mode not in EXP_MODES:
            raise ConfigError(f"exp_mode must be one of {EXP_MODES}")
        if self.csi_dim < 2 or self.csi_dim % 2:
            raise ConfigError("csi_dim must be even (it doubles as the sinusoidal code length)")
        if self.embed_kernel < 2 or self.embed_kernel % 2:
            raise ConfigError("embed_kernel must be an even size >= 2 for stride-2 embedding")
        self.latent_channels  # noqa: B018  (raises on a bad symbol budget)

    def stages(self) -> list[StageConfig]:
        H, W = self.image_size
        return [StageConfig(n, c, H // 2 ** (k + 1), W // 2 ** (k + 1))
                for k, (n, c) in enumerate(zip(self.blocks, self.channels))]

    def decoder_stages(self) -> list[StageConfig]:
        dec = self.decoder_blocks or self.blocks
        return [replace(s, num_blocks=n) for s, n in zip(self.stages(), dec)]

    @property
    def num_symbols(self) -> int:
        """Complex channel uses per image: ``cbr * 3 * H * W``."""
        H, W = self.image_size
        total = self.cbr * 3 * H * W
        if total.denominator != 1:
            raise ConfigError(f"cbr={self.cbr} gives {float(total)} complex symbols for {H}x{W}")
        return int(total)

    @property
    def latent_channels(self) -> int:
        """Complex channels ``c`` of the compressed latent (``2c`` real channels)."""
        last = self.stages()[-1]
        c = Fraction(self.num_symbols, last.height * last.width)
        if c.denominator != 1:
            raise ConfigError(
                f"cbr={self.cbr}: {self.num_symbols} complex symbols do not fill a "
                f"{last.height}x{last.width} grid ({float(c)} channels)")
        return int(c)

    def to_manifest(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = ""
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "ModelConfig":
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        return cls(**parse_model_fields(raw))


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


_FIELD_PARSERS = {
    "image_size": _int_tuple,
    "channels": _int_tuple,
    "blocks": _int_tuple,
    "decoder_blocks": lambda s: _int_tuple(s) or None,
    "cbr": Fraction,
    "csi_mode": str,
    "n_state": int,
    "expansion": int,
    "csi_dim": int,
    "embed_kernel": int,
    "exp_mode": str,
    "csi_snr_ceiling_db": float,
}


def parse_model_fields(raw: dict[str, str]) -> dict:
    unknown = raw.keys() - _FIELD_PARSERS.keys()
    if unknown:
        raise ConfigError(f"unknown model keys: {sorted(unknown)}")
    try:
        return {k: _FIELD_PARSERS[k](v) for k, v in raw.items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- building blocks

class PatchMerge(Module):
    """Space-to-channel regroup (inverse pixel shuffle, r=2), then ``4c_in -> c_out``."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.proj = Linear(4 * in_channels, out_channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise DimensionError(f"patch merging needs even spatial dims, got {list(x.shape)}")
        return self.proj(ops.pixel_unshuffle(x, 2))


class PatchDivide(Module):
    """Layer norm, FC ``c_in -> 4 c_out``, pixel shuffle (r=2)."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.norm = ChannelLayerNorm(in_channels)
        self.fc = Linear(in_channels, 4 * out_channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.pixel_shuffle(self.fc(self.norm(x)), 2)


class VSSMCABlock(Module):
    """A VSSM block plus (optionally) its CSI embedding."""

    def __init__(self, stage: StageConfig, cfg: ModelConfig, rng: np.random.Generator,
                 csi_rng: np.random.Generator | None):
        self.block = VSSMBlock(stage.channels, stage.height, stage.width, rng,
                               n_state=cfg.n_state, expansion=cfg.expansion,
                               exp_mode=cfg.exp_mode)
        self.csi = (CsiEmbedding(cfg.csi_dim, self.block.inner_channels, csi_rng)
                    if csi_rng is not None else None)

    def __call__(self, x: Tensor, u: CsiVector | None) -> Tensor:
        csi_add = self.csi.offsets(u) if self.csi is not None and u is not None else None
        return vssm_block_forward(x, self.block, csi_add)


class EncoderStage(Module):
    def __init__(self, merge: PatchMerge | None, blocks: list[VSSMCABlock]):
        self.merge = merge
        self.blocks = blocks


class DecoderStage(Module):
    def __init__(self, blocks: list[VSSMCABlock], divide: PatchDivide):
        self.blocks = blocks
        self.divide = divide


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 csi_rng: np.random.Generator | None):
        stages = cfg.stages()
        self.csi = CsiEncoder(cfg.csi_dim, csi_rng) if csi_rng is not None else None
        self.patch_embed = Conv2d(3, stages[0].channels, cfg.embed_kernel, rng, stride=2,
                                  padding=(cfg.embed_kernel - 2) // 2)
        self.stages = []
        for k, st in enumerate(stages):
            merge = PatchMerge(stages[k - 1].channels, st.channels, rng) if k else None
            blocks = [VSSMCABlock(st, cfg, rng, csi_rng) for _ in range(st.num_blocks)]
            self.stages.append(EncoderStage(merge, blocks))
        self.compress = Conv2d(stages[-1].channels, 2 * cfg.latent_channels, 1, rng)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 csi_rng: np.random.Generator | None):
        stages = cfg.decoder_stages()
        self.csi = CsiEncoder(cfg.csi_dim, csi_rng) if csi_rng is not None else None
        self.expand = Conv2d(2 * cfg.latent_channels, stages[-1].channels, 1, rng)
        # ordered as traversed: stage L first, stage 1 last
        self.stages = []
        for k in range(len(stages) - 1, -1, -1):
            st = stages[k]
            blocks = [VSSMCABlock(st, cfg, rng, csi_rng) for _ in range(st.num_blocks)]
            out_c = stages[k - 1].channels if k else 3
            self.stages.append(DecoderStage(blocks, PatchDivide(st.channels, out_c, rng)))


class MambaJSCC(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg
        enc_ss, dec_ss, enc_csi_ss, dec_csi_ss = np.random.SeedSequence(seed).spawn(4)
        csi_on = cfg.csi_mode == "embed"
        self.encoder = Encoder(cfg, np.random.default_rng(enc_ss),
                               np.random.default_rng(enc_csi_ss) if csi_on else None)
        self.decoder = Decoder(cfg, np.random.default_rng(dec_ss),
                               np.random.default_rng(dec_csi_ss) if csi_on else None)

    def csi_snr(self, snr_db: float) -> float:
        return min(float(snr_db), self.config.csi_snr_ceiling_db)

    def encode(self, s: Tensor, snr_db: float) -> Tensor:
        return encode(s, snr_db, self)

    def decode(self, y: Tensor, snr_db: float) -> Tensor:
        return decode(y, snr_db, self)

    def __call__(self, s: Tensor, realization: ChannelRealization) -> Tensor:
        return transmit_image(self, s, realization)


# ---------------------------------------------------------------- functional surface

def patch_embed(s: Tensor, model: MambaJSCC) -> Tensor:
    H, W = model.config.image_size
    if s.shape != (3, H, W):
        raise DimensionError(f"model expects images of shape [3,{H},{W}], got {list(s.shape)}")
    return model.encoder.patch_embed(s)


def patch_merge(x: Tensor, merge: PatchMerge) -> Tensor:
    return merge(x)


def patch_divide(x: Tensor, divide: PatchDivide) -> Tensor:
    return divide(x)


def conv_compress(x: Tensor, model: MambaJSCC) -> Tensor:
    return model.encoder.compress(x)


def conv_expand(y: Tensor, model: MambaJSCC) -> Tensor:
    return model.decoder.expand(y)


def encode(s: Tensor, snr_db: float, model: MambaJSCC) -> Tensor:
    enc = model.encoder
    u = enc.csi(model.csi_snr(snr_db)) if enc.csi is not None else None
    x = patch_embed(s, model)
    for stage in enc.stages:
        if stage.merge is not None:
            x = stage.merge(x)
        for blk in stage.blocks:
            x = blk(x, u)
    return conv_compress(x, model)


def decode(y: Tensor, snr_db: float, model: MambaJSCC) -> Tensor:
    dec = model.decoder
    u = dec.csi(model.csi_snr(snr_db)) if dec.csi is not None else None
    x = conv_expand(y, model)
    for stage in dec.stages:
        for blk in stage.blocks:
            x = blk(x, u)
        x = stage.divide(x)
    return x


def transmit_image(model: MambaJSCC, s: Tensor, realization: ChannelRealization) -> Tensor:
    """encode -> power normalize -> channel -> equalize -> decode."""
    tr = power_normalize(encode(s, realization.snr_db, model))
    r = transmit(tr, realization)
    eq = mmse_equalize(r, realization)
    return decode(eq.symbols, realization.snr_db, model)


# ---------------------------------------------------------------- checkpoints

MANIFEST = "manifest.txt"


def save_checkpoint(model: MambaJSCC, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, p in model.named_parameters():
        save_tensor(d / f"{name}.mjt", p)
    (d / MANIFEST).write_text(model.config.to_manifest())
    return d


def load_checkpoint(directory: str | os.PathLike) -> MambaJSCC:
    d = Path(directory)
    if not (d / MANIFEST).is_file():
        raise FileNotFoundError(f"no checkpoint manifest in {d}")
    cfg = ModelConfig.from_manifest((d / MANIFEST).read_text())
    model = MambaJSCC(cfg)
    state = {name: load_tensor(d / f"{name}.mjt").data for name, _ in model.named_parameters()}
    model.load_state_dict(state)
    return model


def checkpoint_hash(directory: str | os.PathLike) -> str:
    """Git-style content hash: sha1 over the sorted (name, blob-sha1) listing."""
    d = Path(directory)
    entries = []
    for path in sorted(d.iterdir()):
        if path.is_file():
            blob = path.read_bytes()
            sha = hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()
            entries.append(f"{sha} {path.name}\n")
    listing = "".join(entries).encode()
    return hashlib.sha1(b"tree %d\0" % len(listing) + listing).hexdigest()


__all__ = [
    "ModelConfig", "StageConfig", "ConfigError", "MambaJSCC", "PatchMerge", "PatchDivide",
    "VSSMCABlock", "encode", "decode", "transmit_image", "patch_embed", "patch_merge",
    "patch_divide", "conv_compress", "conv_expand", "save_checkpoint", "load_checkpoint",
    "checkpoint_hash",
]
