"""Command-line entry point: ``fino <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Noise levels on
the command line use the 0-255 scale.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T

log = logging.getLogger("fino")


def _sigma_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI (e.g. 0,55), got {text!r}") from None
    if not 0 <= lo < hi:
        raise argparse.ArgumentTypeError(f"need 0 <= LO < HI, got {text!r}")
    return lo, hi


def _add_noise_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("noise")
    g.add_argument("--sigma", type=float, default=25.0, help="AWGN std on the 0-255 scale (default 25)")
    g.add_argument("--sigma-range", type=_sigma_range, metavar="LO,HI",
                   help="blind: per-image sigma uniform on (LO,HI]; with --variant: per-pixel map range")
    g.add_argument("--variant", action="store_true", help="spatially variant noise (needs --sigma-range)")
    g.add_argument("--seed", type=int, default=0, help="PRNG seed (default 0)")


def _noise_spec(args):
    from .data import NoiseSpec

    if args.variant:
        if args.sigma_range is None:
            raise UsageError("--variant needs --sigma-range LO,HI")
        lo, hi = args.sigma_range
        return NoiseSpec("variant", sigma_range=(lo / 255, hi / 255), seed=args.seed)
    if args.sigma_range is not None:
        lo, hi = args.sigma_range
        return NoiseSpec("blind", sigma_range=(lo / 255, hi / 255), seed=args.seed)
    if args.sigma < 0:
        raise UsageError("--sigma must be >= 0")
    return NoiseSpec("uniform", sigma=args.sigma / 255, seed=args.seed)


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fino", description="Flow-based joint image and noise denoiser.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("config", help="config file (keys mirror TrainConfig)")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.add_argument("--steps", type=int, help="override total steps")
    p.add_argument("--checkpoint", metavar="PATH", help="override checkpoint_path")
    p.add_argument("--log", metavar="PATH", help="override log_path (CSV)")

    p = sub.add_parser("denoise", help="denoise one image or a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory (.pgm/.ppm/.fnt)")
    p.add_argument("--output", required=True, help="output file or directory")
    p.add_argument("--mode", choices=("zero", "sample", "average"), default="zero")
    p.add_argument("--samples", type=int, default=8, help="draws for --mode average")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="PSNR/SSIM report (CSV)")
    p.add_argument("--clean", required=True, help="directory of clean reference images")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="denoise synthesized noisy copies with this model")
    src.add_argument("--denoised", help="compare an existing directory of outputs instead")
    p.add_argument("--mode", choices=("zero", "sample", "average"), default="zero")
    p.add_argument("--report", help="write the CSV here instead of stdout")
    _add_noise_flags(p)

    p = sub.add_parser("noisegen", help="synthesize noisy copies of clean images")
    p.add_argument("--input", help="directory of clean images")
    p.add_argument("--toy", type=int, metavar="N", help="generate N toy clean images instead of reading --input")
    p.add_argument("--size", type=int, default=32, help="toy image size (default 32)")
    p.add_argument("--channels", type=int, choices=(1, 3), default=1, help="toy image channels")
    p.add_argument("--output", required=True, help="output directory (clean/, noisy/, noise/ subdirs)")
    p.add_argument("--format", choices=("fnt", "pnm"), default="fnt",
                   help="fnt keeps unclipped floats; pnm quantizes to 8 bit")
    _add_noise_flags(p)

    p = sub.add_parser("roundtrip", help="invertibility audit: max |inverse(forward(x)) - x|")
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", help="audit a trained model instead of a random one")
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("inputs", nargs="*", help="image files to audit in addition to random inputs")

    p = sub.add_parser("gradcheck", help="finite-difference audit of the full training loss")
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-6, help="finite-difference step h")
    p.add_argument("--tolerance", type=float, default=1e-5)

    sub.add_parser("selftest", help="run the built-in property checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    handler = COMMANDS[args.command]
    try:
        return handler(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, FloatingPointError, ZeroDivisionError) as exc:
        print(f"fino {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


# -- subcommands -----------------------------------------------------------

def cmd_train(args) -> int:
    from .trainer import TrainConfig, load_dataset, train, write_log

    cfg = TrainConfig.from_file(args.config)
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.checkpoint:
        overrides["checkpoint_path"] = args.checkpoint
    if args.log:
        overrides["log_path"] = args.log
    if overrides:
        cfg = TrainConfig(**{**cfg.__dict__, **overrides})
    train_set, held = load_dataset(cfg)
    res = train(train_set, cfg, eval_images=held, resume_from=args.resume, progress=True)
    if cfg.checkpoint_path:
        from .trainer import save_checkpoint

        save_checkpoint(res.model, res.opt, cfg, cfg.checkpoint_path, step=res.step)
        print(f"checkpoint: {cfg.checkpoint_path}")
    if cfg.log_path:
        write_log(res.log, cfg.log_path)
        print(f"log: {cfg.log_path} ({len(res.log)} records)")
    if res.log:
        last = res.log[-1]
        evals = [r.eval_psnr for r in res.log if r.eval_psnr is not None]
        msg = f"final step {last.step} loss {last.total_loss:.6f}"
        if evals:
            msg += f" eval_psnr {evals[-1]:.3f} dB"
        print(msg)
    return 0


def _image_pairs(src: Path, dst: Path) -> list[tuple[Path, Path]]:
    from .data import list_images

    if src.is_dir():
        dst.mkdir(parents=True, exist_ok=True)
        return [(p, dst / p.name) for p in list_images(src)]
    return [(src, dst)]


def cmd_denoise(args) -> int:
    from .data import load_image, save_image
    from .inference import denoise
    from .trainer import load_checkpoint

    model, _, _, _ = load_checkpoint(args.checkpoint)
    for src, dst in _image_pairs(Path(args.input), Path(args.output)):
        out, pads = denoise(model, load_image(src), args.mode, seed=args.seed, k=args.samples,
                            return_padding=True)
        save_image(out, dst)
        note = f" (reflect-padded by {pads})" if any(pads) else ""
        print(f"{src} -> {dst}{note}")
    return 0


def cmd_eval(args) -> int:
    from .data import list_images, load_image, synthesize
    from .inference import evaluate_pairs
    from .trainer import load_checkpoint

    clean_paths = list_images(args.clean)
    if not clean_paths:
        raise ValueError(f"{args.clean}: no images found")
    if args.denoised:
        items = []
        for p in clean_paths:
            other = Path(args.denoised) / p.name
            items.append((p.name, load_image(p), load_image(other)))
        report = evaluate_pairs(None, items, seed=args.seed)
        report.config = {"source": args.denoised}
    else:
        spec = _noise_spec(args)
        model, _, _, _ = load_checkpoint(args.checkpoint)
        items = []
        for i, p in enumerate(clean_paths):
            x = load_image(p)
            y, _, _ = synthesize(x, spec, stream=i)
            items.append((p.name, x, y))
        report = evaluate_pairs(model, items, mode=args.mode, seed=args.seed)
        report.config = {"checkpoint": args.checkpoint, "noise": spec.kind, "sigma255": args.sigma,
                         "sigma_range255": args.sigma_range, "mode": args.mode}
    text = report.to_csv()
    if args.report:
        Path(args.report).write_text(text)
        print(f"report: {args.report}")
        m = report.means()
        print(f"mean noisy_psnr {m['noisy_psnr']:.3f} denoised_psnr {m['denoised_psnr']:.3f} ssim {m['ssim']:.4f}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_noisegen(args) -> int:
    from .data import list_images, load_image, make_toy_dataset, save_image, synthesize

    spec = _noise_spec(args)
    out = Path(args.output)
    if args.toy:
        clean = [(f"toy{i:03d}", img) for i, img in enumerate(make_toy_dataset(args.toy, args.size, args.seed,
                                                                                   args.channels))]
    elif args.input:
        clean = [(p.stem, load_image(p)) for p in list_images(args.input)]
    else:
        raise UsageError("noisegen needs --input DIR or --toy N")
    suffix = ".fnt" if args.format == "fnt" else None
    for sub in ("clean", "noisy", "noise"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i, (stem, x) in enumerate(clean):
        y, n, _ = synthesize(x, spec, stream=i)
        ext = suffix or (".pgm" if x.shape[0] == 1 else ".ppm")
        save_image(x, out / "clean" / f"{stem}{ext}")
        save_image(y, out / "noisy" / f"{stem}{ext}")
        T.save_raw(out / "noise" / f"{stem}.fnt", n)
    print(f"wrote {len(clean)} clean/noisy pairs to {out} ({spec.kind} noise)")
    return 0


def cmd_roundtrip(args) -> int:
    from .data import load_image
    from .flow import flow_forward, flow_inverse, init_model
    from .inference import _reflect_pad
    from .trainer import load_checkpoint

    if args.checkpoint:
        model, _, _, _ = load_checkpoint(args.checkpoint)
    else:
        model = init_model(args.channels, args.blocks, args.layers, args.width, seed=args.seed,
                           identity_init=False)
    rng = np.random.default_rng(args.seed)
    inputs = [("random", rng.uniform(size=(args.samples, model.input_channels, args.size, args.size)))]
    for path in args.inputs:
        img, _ = _reflect_pad(load_image(path)[None], 2**model.num_blocks)
        inputs.append((path, img))
    worst = 0.0
    with T.no_grad():
        for label, x in inputs:
            x = x.astype(model.dtype)
            err = float(np.abs(flow_inverse(flow_forward(x, model), model).data - x).max())
            worst = max(worst, err)
            print(f"{label}: max abs error {err:.3e}")
    print(f"max error {worst:.3e} (tolerance {args.tolerance:.0e})")
    return 0 if worst < args.tolerance else 1


def cmd_gradcheck(args) -> int:
    from .gradcheck import audit_full_loss, tiny_problem

    model, batch = tiny_problem(args.seed, num_blocks=args.blocks, layers=args.layers, width=args.width,
                                size=args.size)
    audit = audit_full_loss(model, batch, h=args.step)
    name = audit.worst_parameter()
    print(f"checked {audit.checked} parameter entries across {len(audit.worst)} tensors")
    print(f"worst relative error {audit.max_error:.3e} ({name}); "
          f"largest entry-wise deviation {max(audit.max_abs.values()):.3e}")
    return 0 if audit.max_error < args.tolerance else 1


def cmd_selftest(args) -> int:
    from .selftest import run

    return 0 if run() else 1


COMMANDS = {
    "train": cmd_train,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "noisegen": cmd_noisegen,
    "roundtrip": cmd_roundtrip,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}

if __name__ == "__main__":
    sys.exit(main())
