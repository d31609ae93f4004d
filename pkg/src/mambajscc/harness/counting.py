"""Analytic MAC and parameter accounting.

Conventions (one MAC = one multiply plus one add):

* Linear on ``L`` tokens: ``L * in * out``; the bias add is free.
* Convolution: ``C_out * (C_in / groups) * k^2 * H' * W'``; bias free.
* V-S6, per direction and channel with sequence length ``D`` and state ``N``:
  projections ``H1 v, H2 v, H3 v`` cost ``3 N D``, the outer product
  ``(H1 v) G`` costs ``N^2``, ``Delta A`` costs ``N^3``, ``Delta B`` costs
  ``N^2``, the recurrence ``D (N^2 + 2N)`` and the skip term ``D``. The
  exponential of ``Delta A`` is not counted (elementwise, or a data-dependent
  scaling-and-squaring in matrix mode).
* Layer norm, activations, gating products, residual adds, pixel shuffles,
  power normalization and the channel itself count as zero MACs.

Parameters are read off the tensors, so report totals always match
``Module.num_parameters``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..codec import MambaJSCC, PatchDivide, PatchMerge, VSSMCABlock
from ..csi import CsiEmbedding, CsiEncoder
from ..nn import ChannelLayerNorm, Conv2d, Linear, Module
from ..ssm import VS6Params, VSSMBlock, scan_core_macs


@dataclass(frozen=True)
class LayerCount:
    name: str
    macs: int
    params: int


@dataclass
class CountReport:
    layers: list[LayerCount] = field(default_factory=list)

    @property
    def macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def params(self) -> int:
        return sum(layer.params for layer in self.layers)

    def add(self, name: str, macs: int, params: int) -> None:
        self.layers.append(LayerCount(name, int(macs), int(params)))

    def subtotal(self, marker: str) -> LayerCount:
        """Sum of every layer whose dotted name contains ``marker`` as a path component."""
        picked = [l for l in self.layers if marker in l.name.split(".")]
        return LayerCount(marker, sum(l.macs for l in picked), sum(l.params for l in picked))

    def to_csv(self) -> str:
        rows = ["name,macs,params\n"]
        rows += [f"{l.name},{l.macs},{l.params}\n" for l in self.layers]
        rows.append(f"total,{self.macs},{self.params}\n")
        return "".join(rows)


def _nparams(m: Module) -> int:
    return m.num_parameters()


def vs6_macs(seq_len: int, n_state: int) -> dict[str, int]:
    """MAC breakdown of one direction of one V-S6 module."""
    D, N = seq_len, n_state
    return {
        "projection": 3 * N * D,
        "outer": N * N,
        "delta_a": N ** 3,
        "delta_b": N * N,
        "scan": scan_core_macs(D, N),
        "skip": D,
    }


def attention_macs(seq_len: int, dim: int) -> int:
    """Score and mixing products of single-head self attention: ``2 D^2 d``.

    Reference only, to contrast with the linear scan term.
    """
    return 2 * seq_len * seq_len * dim


def _count(m: Module, name: str, hw: tuple[int, int], rep: CountReport) -> tuple[int, int]:
    """Append counts for ``m`` applied on an ``hw`` grid; return the output grid."""
    tokens = hw[0] * hw[1]
    if isinstance(m, Conv2d):
        oh, ow = m.output_hw(*hw)
        k = m.kernel_size
        macs = m.out_channels * (m.in_channels // m.groups) * k * k * oh * ow
        rep.add(name, macs, _nparams(m))
        return oh, ow
    if isinstance(m, Linear):
        rep.add(name, tokens * m.in_features * m.out_features, _nparams(m))
    elif isinstance(m, ChannelLayerNorm):
        rep.add(name, 0, _nparams(m))
    elif isinstance(m, VS6Params):
        per_dir = sum(vs6_macs(m.seq_len, m.n_state).values())
        rep.add(name, 4 * m.channels * per_dir, _nparams(m))
    elif isinstance(m, VSSMBlock):
        for part in ("norm", "in_proj", "dw_conv", "vs6", "gate_proj", "out_proj"):
            _count(getattr(m, part), f"{name}.{part}", hw, rep)
    elif isinstance(m, PatchMerge):
        h, w = hw[0] // 2, hw[1] // 2
        _count(m.proj, f"{name}.proj", (h, w), rep)
        return h, w
    elif isinstance(m, PatchDivide):
        _count(m.norm, f"{name}.norm", hw, rep)
        _count(m.fc, f"{name}.fc", hw, rep)
        return hw[0] * 2, hw[1] * 2
    elif isinstance(m, CsiEncoder):
        _count(m.fc1, f"{name}.fc1", (1, 1), rep)
        _count(m.fc2, f"{name}.fc2", (1, 1), rep)
    elif isinstance(m, CsiEmbedding):
        _count(m.fc, f"{name}.fc", (1, 1), rep)
    elif isinstance(m, VSSMCABlock):
        if m.csi is not None:
            _count(m.csi, f"{name}.csi", hw, rep)
        _count(m.block, f"{name}.block", hw, rep)
    else:
        for key, child in vars(m).items():
            if isinstance(child, Module):
                hw = _count(child, f"{name}.{key}" if name else key, hw, rep)
            elif isinstance(child, (list, tuple)):
                for i, item in enumerate(child):
                    if isinstance(item, Module):
                        prefix = f"{name}.{key}.{i}" if name else f"{key}.{i}"
                        hw = _count(item, prefix, hw, rep)
    return hw


def count_macs_params(model: Module, input_hw: tuple[int, int] | None = None) -> CountReport:
    """Per-layer MACs and parameters of one forward pass.

    For a full codec the grid comes from its config and the layers are listed
    in execution order (encoder CSI path, encoder, decoder CSI path, decoder).
    Other modules need ``input_hw``; a module with no layers yields an empty
    report.
    """
    rep = CountReport()
    if isinstance(model, MambaJSCC):
        hw = model.config.image_size
        enc, dec = model.encoder, model.decoder
        if enc.csi is not None:
            _count(enc.csi, "encoder.csi", hw, rep)
        hw = _count(enc.patch_embed, "encoder.patch_embed", hw, rep)
        for k, stage in enumerate(enc.stages):
            hw = _count(stage, f"encoder.stages.{k}", hw, rep)
        hw = _count(enc.compress, "encoder.compress", hw, rep)
        if dec.csi is not None:
            _count(dec.csi, "decoder.csi", hw, rep)
        hw = _count(dec.expand, "decoder.expand", hw, rep)
        for k, stage in enumerate(dec.stages):
            hw = _count(stage, f"decoder.stages.{k}", hw, rep)
        return rep
    if input_hw is None and model.num_parameters():
        raise ValueError("input_hw is required to count a bare module")
    _count(model, "", input_hw or (1, 1), rep)
    return rep


def csi_overhead(rep: CountReport) -> LayerCount:
    """Extra MACs and parameters of the whole CSI path."""
    return rep.subtotal("csi")
