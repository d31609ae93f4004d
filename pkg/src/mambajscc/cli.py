"""Command line entry point: ``mambajscc {train,eval,sweep,count,timeit,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from .codec import ConfigError, MambaJSCC, load_checkpoint
from .harness.config import RunConfig, load_config, parse_snr_list
from .harness.counting import attention_macs, count_macs_params
from .harness.data import Image, center_crop, ingest_images, synthetic_images
from .harness.evaluate import eval_sweep, measure_inference_delay, write_report
from .harness.gradcheck import run_all
from .harness.train import TrainingDiverged, train
from .ssm import scan_core_macs

log = logging.getLogger("mambajscc")

EVAL_SEED_OFFSET = 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--channel", choices=("awgn", "rayleigh"))
    common.add_argument("--snr", help="comma-separated SNRs in dB (inf = noiseless)")
    common.add_argument("--csi", choices=("off", "embed"))
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="checkpoint directory to load")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mambajscc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    sub.add_parser("eval", parents=[common], help="score a checkpoint at the given SNRs")
    sub.add_parser("sweep", parents=[common], help="PSNR-versus-SNR sweep of a checkpoint")
    sub.add_parser("count", parents=[common], help="analytic MACs and parameters")
    p = sub.add_parser("timeit", parents=[common], help="median inference delay")
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--warmups", type=int, default=5)
    p = sub.add_parser("gradcheck", parents=[common], help="autodiff vs finite differences")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--no-pipeline", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    model, tr = cfg.model, cfg.train
    if args.seed is not None:
        tr = replace(tr, seed=args.seed)
    if args.channel:
        tr = replace(tr, channel=args.channel)
    if args.csi:
        model = replace(model, csi_mode=args.csi)
    snrs = cfg.eval_snrs
    if args.snr:
        snrs = tuple(parse_snr_list(args.snr))
        if args.command == "train":
            finite = [s for s in snrs if math.isfinite(s)]
            if not finite:
                raise ConfigError("training needs at least one finite SNR")
            tr = replace(tr, snr_min=min(finite), snr_max=max(finite))
    return replace(cfg, model=model, train=tr, eval_snrs=snrs)


def training_set(cfg: RunConfig) -> list[Image]:
    if cfg.data_dir:
        return ingest_images(cfg.data_dir)
    return synthetic_images(cfg.synthetic_count, cfg.train.crop, cfg.synthetic_seed)


def evaluation_set(cfg: RunConfig, size: int) -> list[Image]:
    """Center crops of the corpus; the synthetic corpus uses a held-out draw."""
    if cfg.data_dir:
        images = ingest_images(cfg.data_dir)
    else:
        images = synthetic_images(cfg.eval_count or 16, size,
                                  cfg.synthetic_seed + EVAL_SEED_OFFSET)
    return images[:cfg.eval_count] if cfg.eval_count else images


def _model(cfg: RunConfig, args: argparse.Namespace) -> MambaJSCC:
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    return MambaJSCC(cfg.model, seed=cfg.train.seed)


def _require_checkpoint(args: argparse.Namespace) -> MambaJSCC:
    if not args.checkpoint:
        raise ConfigError(f"{args.command} needs --checkpoint")
    return load_checkpoint(args.checkpoint)


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = Path(args.out or "run")
    model = MambaJSCC(cfg.model, seed=cfg.train.seed)
    result = train(cfg.train, model, training_set(cfg), out)
    print(f"trained {cfg.train.steps} steps, final loss {result.losses[-1]:.6g}"
          if result.losses else "trained 0 steps")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def _evaluate(cfg: RunConfig, args: argparse.Namespace, timing: bool) -> int:
    model = _require_checkpoint(args)
    size = model.config.image_size[0]
    data = evaluation_set(cfg, size)
    report = eval_sweep(model, data, list(cfg.eval_snrs), cfg.train.channel,
                        seed=cfg.train.seed)
    if timing and data:
        image = center_crop(data[0], size)
        if image is not None:
            report.inference_delay_ms = measure_inference_delay(model, image)
    if args.out:
        write_report(report, args.out,
                     label=f"{cfg.train.channel}_csi_{model.config.csi_mode}")
        if report.inference_delay_ms is not None:
            lines = [f"{k} = {v:.6g}\n" for k, v in report.inference_delay_ms.items()]
            (Path(args.out) / "timing.txt").write_text("".join(lines))
    print(f"macs = {report.macs}\nparams = {report.params}")
    for snr, p in report.mean_psnr().items():
        print(f"snr {snr:g} dB: mean PSNR {p:.3f} dB")
    if report.inference_delay_ms is not None:
        print(f"inference delay (median) = {report.inference_delay_ms['median_ms']:.3f} ms")
    return 0


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    return _evaluate(cfg, args, timing=True)


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    return _evaluate(cfg, args, timing=False)


def cmd_count(cfg: RunConfig, args: argparse.Namespace) -> int:
    model = _model(cfg, args)
    rep = count_macs_params(model)
    text = rep.to_csv()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "counts.csv").write_text(text)
    sys.stdout.write(text)
    csi = rep.subtotal("csi")
    print(f"csi path: {csi.macs} MACs, {csi.params} params")
    n = model.config.n_state
    for D in (64, 128, 256):
        print(f"D={D}: scan core {scan_core_macs(D, n)} MACs per direction, "
              f"attention reference {attention_macs(D, n)}")
    return 0


def cmd_timeit(cfg: RunConfig, args: argparse.Namespace) -> int:
    model = _model(cfg, args)
    size = model.config.image_size[0]
    image = synthetic_images(1, size, cfg.synthetic_seed)[0].pixels
    snr = cfg.eval_snrs[0] if cfg.eval_snrs else 10.0
    stats = measure_inference_delay(model, image, snr, cfg.train.channel,
                                    warmups=args.warmups, runs=args.runs)
    for k, v in stats.items():
        print(f"{k} = {v:.6g}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args: argparse.Namespace) -> int:
    base = cfg.train.seed
    results = run_all(range(base, base + args.seeds), pipeline=not args.no_pipeline)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: max rel error {r.max_rel_error:.3e} "
              f"({r.checked} coords)")
    return 0 if all(r.ok for r in results) else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "count": cmd_count,
            "timeit": cmd_timeit, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
