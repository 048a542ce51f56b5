"""Command-line entry point: ``umsn <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("umsn")

COMMANDS = ("synth-kernels", "synth-dataset", "train-snet", "train-stage1", "train-umsn", "deblur", "evaluate")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _HelpFormatter(argparse.HelpFormatter):
    """Appends real defaults and marks required flags; fixed width for stable help text."""

    def __init__(self, prog):
        super().__init__(prog, width=100, max_help_position=32)

    def _get_help_string(self, action):
        text = action.help or ""
        if action.required and action.option_strings:
            return text + " (required)"
        default = action.default
        if default in (None, False, argparse.SUPPRESS) or "default" in text:
            return text
        return f"{text} (default: {default})"


_formatter = _HelpFormatter


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="umsn", description="Semantic multi-stream face deblurring pipeline.",
                formatter_class=_formatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_):
        return sub.add_parser(name, help=help_, description=help_, formatter_class=_formatter)

    s = cmd("synth-kernels", "generate a bank of motion-blur kernels")
    s.add_argument("--config", required=True, help="dataset config (JSON)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=None, help="number of kernels (default: config kernel_count)")
    s.add_argument("--seed", type=int, default=None, help="override the config master seed")

    s = cmd("synth-dataset", "build a paired clean/blurry dataset with manifest")
    s.add_argument("--config", required=True, help="dataset config (JSON)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=None, help="override the config master seed")
    s.add_argument("--workers", type=int, default=None, help="parallel sample writers (default: $UMSN_NUM_WORKERS or 1)")

    for name, help_ in (("train-snet", "train or fine-tune the segmentation network"),
                        ("train-stage1", "train one class-specific first-stage network"),
                        ("train-umsn", "jointly train the multi-stream network and confidence scorer")):
        s = cmd(name, help_)
        s.add_argument("--config", required=True, help="training config (JSON)")
        s.add_argument("--out", required=True, help="run directory (checkpoints, log, figures)")
        s.add_argument("--manifest", default=None, help="dataset manifest (overrides config `dataset`)")
        s.add_argument("--checkpoint", default=None, help="checkpoint to resume from")
        s.add_argument("--seed", type=int, default=None, help="override the config master seed")
        s.add_argument("--width", type=float, default=None, help="override the width multiplier")
        s.add_argument("--iterations", type=int, default=None, help="override the iteration count")
        if name == "train-snet":
            s.add_argument("--finetune", action="store_true", help="fine-tune on blurry images from --checkpoint")
        if name == "train-stage1":
            s.add_argument("--class", dest="class_index", type=int, choices=(1, 2, 3, 4), required=True,
                           help="semantic class to train (1..4)")
        if name == "train-umsn":
            s.add_argument("--stage1", nargs=4, default=None, metavar="CKPT",
                           help="four stage-1 checkpoints, classes 1..4 in order")
            s.add_argument("--snet-checkpoint", default=None, help="S-Net checkpoint for mask_source 'snet'")
            s.add_argument("--variant", default=None, help="ablation variant (bnet, bnet_masks, bnet_masks_nrl, "
                                                           "umsn_no_lc, umsn)")

    s = cmd("deblur", "deblur one image")
    s.add_argument("--in", dest="input", required=True, help="blurry input PNG")
    s.add_argument("--masks", required=True, help="'snet' or a class-index mask PNG (values 0-3)")
    s.add_argument("--checkpoint", required=True, help="trained UMSN checkpoint directory")
    s.add_argument("--snet-checkpoint", default=None, help="S-Net checkpoint (needed with --masks snet)")
    s.add_argument("--out", required=True, help="output PNG")

    s = cmd("evaluate", "score a checkpoint on a dataset manifest")
    s.add_argument("--manifest", required=True, help="dataset manifest.json")
    s.add_argument("--checkpoint", required=True, help="UMSN checkpoint directory, or 'identity'")
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--masks", choices=("manifest", "snet"), default="manifest", help="masks fed to the network")
    s.add_argument("--snet-checkpoint", default=None, help="S-Net checkpoint (needed with --masks snet)")
    s.add_argument("--extractor-weights", default=None, help="pretrained feature-extractor state dict")
    s.add_argument("--grids", action="store_true", help="write blurry | deblurred | truth PNG grids")
    return p


# -- commands -------------------------------------------------------------

def _dataset_config(args):
    from .synthesis import DatasetConfig

    cfg = DatasetConfig.load(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    return cfg


def cmd_synth_kernels(args):
    from . import imageio
    from .synthesis import make_kernel_bank

    cfg = _dataset_config(args)
    if args.count is not None:
        if args.count < 1:
            raise ValueError("--count must be positive")
        cfg.kernel_count = args.count
    cfg.validate()
    bank = make_kernel_bank(cfg)
    with imageio.atomic_dir(args.out) as root:
        index = []
        for k, kernel in bank.items():
            kid = f"k{k:06d}"
            imageio.write_array(root / f"{kid}.npy", kernel)
            index.append({"kernel_id": kid, "path": f"{kid}.npy", "side": int(kernel.shape[0])})
        imageio.write_text(root / "kernels.json", json.dumps(index, indent=1) + "\n")
    log.info("wrote %d kernels to %s", len(bank), args.out)
    return EXIT_OK


def cmd_synth_dataset(args):
    from .synthesis import build_dataset

    cfg = _dataset_config(args)
    build_dataset(cfg, args.out, workers=args.workers)
    return EXIT_OK


_PHASE_FOR = {"train-snet": "snet", "train-stage1": "stage1", "train-umsn": "umsn"}


def _train_config(args):
    from .training import TrainConfig

    with open(args.config) as fh:
        data = json.load(fh)
    data["phase"] = _PHASE_FOR[args.command]
    if getattr(args, "finetune", False):
        data["phase"] = "snet_finetune"
    overrides = {
        "dataset": args.manifest,
        "resume": args.checkpoint,
        "master_seed": args.seed,
        "width_multiplier": args.width,
        "iterations": args.iterations,
        "class_index": getattr(args, "class_index", None),
        "stage1": getattr(args, "stage1", None),
        "snet_checkpoint": getattr(args, "snet_checkpoint", None),
        "variant": getattr(args, "variant", None),
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if data["phase"] == "snet_finetune" and not data.get("resume"):
        raise UsageError("umsn train-snet: --finetune requires --checkpoint")
    return TrainConfig.from_dict(data)


def cmd_train(args):
    from . import imageio, plotting
    from .training import train

    cfg = _train_config(args)
    out = Path(args.out)
    with imageio.atomic_dir(out) as tmp:
        result = train(replace(cfg, out=str(tmp)))
        plotting.training_curves(result.history, tmp / "training.png")
        imageio.write_text(tmp / "config.json", json.dumps(cfg.to_dict(), indent=2, default=str) + "\n")
    log.info("final checkpoint: %s", out / "final")
    return EXIT_OK


def _load_masks(args, image):
    from . import imageio
    from .semantics import index_to_masks, snet_forward

    if args.masks == "snet":
        if not args.snet_checkpoint:
            raise UsageError("umsn deblur: --masks snet requires --snet-checkpoint")
        from .network import load_model
        snet, _ = load_model(args.snet_checkpoint, expected_phase=("snet", "snet_finetune"))
        return snet_forward(snet, image)
    idx = imageio.read_index(args.masks)
    if idx.shape != image.shape[:2]:
        raise ValueError(f"mask {args.masks} shape {idx.shape} does not match image {image.shape[:2]}")
    return index_to_masks(idx)


def cmd_deblur(args):
    import torch

    from . import imageio
    from .network import load_model

    image = imageio.read_image(args.input)
    model, _ = load_model(args.checkpoint, expected_phase="umsn")
    masks = _load_masks(args, image)
    y = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    m = torch.from_numpy(masks.astype(np.float32))[None]
    out = model.deblur(y, m)[0].permute(1, 2, 0).numpy()
    imageio.write_image(args.out, out)
    return EXIT_OK


def _identity(y, masks):
    return y


def cmd_evaluate(args):
    from .evaluation import evaluate_dataset
    from .losses import FeatureExtractor
    from .network import load_model

    if args.checkpoint == "identity":
        model, digest = _identity, None
    else:
        model, meta = load_model(args.checkpoint, expected_phase="umsn")
        digest = meta.config_digest
    snet = None
    if args.masks == "snet":
        if not args.snet_checkpoint:
            raise UsageError("umsn evaluate: --masks snet requires --snet-checkpoint")
        snet, _ = load_model(args.snet_checkpoint, expected_phase=("snet", "snet_finetune"))
    extractor = FeatureExtractor()
    if args.extractor_weights:
        extractor.load_weights(args.extractor_weights)
    report = evaluate_dataset(model, args.manifest, extractor, out=args.out, snet=snet, grids=args.grids,
                              config_digest=digest)
    m = report.means
    print(f"{len(report.records)} images  PSNR {m['psnr']}  SSIM {m['ssim']:.4f}  d_feat {m['d_feat']:.4f}")
    for f in report.failures:
        print(f"missing: {f['id']}: {f['error']}", file=sys.stderr)
    return EXIT_PARTIAL if report.failures else EXIT_OK


HANDLERS = {
    "synth-kernels": cmd_synth_kernels,
    "synth-dataset": cmd_synth_dataset,
    "train-snet": cmd_train,
    "train-stage1": cmd_train,
    "train-umsn": cmd_train,
    "deblur": cmd_deblur,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (OSError, ValueError, KeyError, TypeError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: umsn {args.command}: {msg}", file=sys.stderr)
    return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
