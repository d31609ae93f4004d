"""PSNR-versus-SNR sweeps and inference-delay measurement."""

from __future__ import annotations

import logging
import math
import os
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..channel import KINDS, sample_realization
from ..codec import MambaJSCC, load_checkpoint
from ..tensor import Tensor, no_grad
from .counting import count_macs_params
from .data import Image, center_crop
from .metrics import image_psnr

log = logging.getLogger(__name__)

ROWS_CSV = "psnr.csv"
AGGREGATE_CSV = "psnr_mean.csv"
PLOT_CSV = "plot_data.csv"


@dataclass
class EvalReport:
    kind: str
    snrs: list[float]
    rows: list[tuple[str, float, float]] = field(default_factory=list)
    macs: int = 0
    params: int = 0
    inference_delay_ms: dict[str, float] | None = None

    def mean_psnr(self) -> dict[float, float]:
        out = {}
        for snr in self.snrs:
            vals = [p for _, s, p in self.rows if s == snr]
            if vals:
                out[snr] = float(np.mean(vals))
        return out

    def psnr_for(self, image_id: str, snr_db: float) -> float:
        for i, s, p in self.rows:
            if i == image_id and s == snr_db:
                return p
        raise KeyError((image_id, snr_db))


def pair_seed(seed: int, image_id: str, snr_db: float) -> np.random.SeedSequence:
    """Stream for one (image, snr) pair; independent of evaluation order."""
    (bits,) = struct.unpack("<Q", struct.pack("<d", float(snr_db)))
    return np.random.SeedSequence([seed, zlib.crc32(image_id.encode()), bits])


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.17g}"


def eval_sweep(model: MambaJSCC, dataset: list[Image], snrs: list[float], kind: str = "awgn",
               seed: int = 0, out_dir: str | os.PathLike | None = None) -> EvalReport:
    """Score every (image, snr) pair on center crops at the model's resolution.

    ``inf`` in ``snrs`` is the noiseless row. Writes the per-pair CSV, the
    per-SNR means and the plot data when ``out_dir`` is given.
    """
    if kind not in KINDS:
        raise ValueError(f"channel kind must be one of {KINDS}")
    snrs = [float(s) for s in snrs]
    counts = count_macs_params(model)
    report = EvalReport(kind=kind, snrs=snrs, macs=counts.macs, params=counts.params)
    size = model.config.image_size
    crops = []
    for img in dataset:
        if size[0] != size[1]:
            raise ValueError("evaluation crops need a square model resolution")
        s = center_crop(img, size[0])
        if s is not None:
            crops.append((img.image_id, s))
    with no_grad():
        for image_id, s in crops:
            for snr in snrs:
                rng = np.random.default_rng(pair_seed(seed, image_id, snr))
                s_hat = model(s, sample_realization(kind, snr, rng))
                report.rows.append((image_id, snr, image_psnr(s, s_hat)))
    if out_dir is not None:
        write_report(report, out_dir, label=f"{kind}_csi_{model.config.csi_mode}")
    return report


def write_report(report: EvalReport, out_dir: str | os.PathLike, label: str = "model") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / ROWS_CSV, "w", newline="") as f:
        f.write("image_id,snr_db,psnr_db\n")
        for image_id, snr, p in report.rows:
            f.write(f"{image_id},{_fmt(snr)},{_fmt(p)}\n")
    means = report.mean_psnr()
    with open(out / AGGREGATE_CSV, "w", newline="") as f:
        f.write("snr_db,mean_psnr_db,count,macs,params\n")
        for snr, p in means.items():
            n = sum(1 for _, s, _ in report.rows if s == snr)
            f.write(f"{_fmt(snr)},{_fmt(p)},{n},{report.macs},{report.params}\n")
    with open(out / PLOT_CSV, "w", newline="") as f:
        f.write("series,x,y\n")
        for snr, p in means.items():
            f.write(f"{label},{_fmt(snr)},{_fmt(p)}\n")


def eval_checkpoint(checkpoint: str | os.PathLike, dataset: list[Image], snrs: list[float],
                    kind: str = "awgn", seed: int = 0,
                    out_dir: str | os.PathLike | None = None) -> EvalReport:
    path = Path(checkpoint)
    if not path.is_dir():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return eval_sweep(load_checkpoint(path), dataset, snrs, kind, seed, out_dir)


def measure_inference_delay(model: MambaJSCC, image: Tensor, snr_db: float = 10.0,
                            kind: str = "awgn", warmups: int = 5, runs: int = 30,
                            seed: int = 0) -> dict[str, float]:
    """Wall-clock of encode -> channel -> decode in milliseconds."""
    if runs < 1:
        raise ValueError("need at least one timed run")
    realization = sample_realization(kind, snr_db, np.random.default_rng(seed))
    times = []
    with no_grad():
        for i in range(warmups + runs):
            t0 = time.perf_counter()
            model(image, realization)
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmups:
                times.append(dt)
    arr = np.array(times)
    return {"median_ms": float(np.median(arr)), "mean_ms": float(arr.mean()),
            "min_ms": float(arr.min()), "max_ms": float(arr.max()), "runs": float(runs)}
