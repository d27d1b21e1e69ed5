"""``nucleo`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
``NUCLEO_THREADS`` caps the thread pools of the BLAS backend.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

REFERENCE_LINE = (
    "Reference (ResNet-FPN with COCO-pretrained weights, full-scale training; not comparable): "
    "ResNet-50-FPN AP 56.06 / Mask Average IoU 66.98, ResNet-101-FPN AP 59.40 / Mask Average IoU 70.54"
)

log = logging.getLogger("nucleo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        out["seed"] = str(args.seed)
    if getattr(args, "dataset_root", None) is not None:
        out["dataset_root"] = str(args.dataset_root)
    return out


def _read_split(path) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _eval_ids(args, root) -> list[str]:
    from nucleo.data import discover_samples

    if args.split is None:
        return discover_samples(root)
    split = _read_split(args.split)
    if args.subset not in split:
        raise UsageError(f"split file has no subset {args.subset!r}")
    return list(split[args.subset])


def _load_model(path):
    from nucleo.training import load_model

    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_model(path)


def _rle_rows(image_id, masks):
    from nucleo.maskops import rle_encode

    return [(image_id, rle_encode(m)) for m in masks if m.any()] or [(image_id, None)]


# ---------------------------------------------------------------- commands


def cmd_make_synth(args) -> int:
    from nucleo.synth import make_synthetic_dataset

    ids = make_synthetic_dataset(args.n, args.out, seed=args.seed or 0, size=args.size)
    print(f"wrote {len(ids)} samples to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    from nucleo.config import load_config
    from nucleo.data import DataError, discover_samples, split_dataset

    cfg = load_config(args.config, _overrides(args))
    ids = discover_samples(cfg.dataset_root)
    if not ids:
        raise DataError(f"no samples found under {cfg.dataset_root}")
    split = split_dataset(ids, cfg.seed, cfg.test_count, cfg.val_fraction)
    payload = {"seed": cfg.seed, "train": split.train_ids, "val": split.val_ids, "test": split.test_ids}
    text = json.dumps(payload, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(f"discovered {len(ids)}: train {len(split.train_ids)}, val {len(split.val_ids)}, test {len(split.test_ids)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from nucleo.config import load_config
    from nucleo.training import prepare_trainer

    overrides = _overrides(args)
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    cfg = load_config(args.config, overrides)
    trainer = prepare_trainer(cfg)
    train_log = trainer.fit()
    last = train_log.steps[-1]
    print(f"trained {len(train_log.steps)} steps; final loss {last.total:.4f}; checkpoints in {cfg.out_dir}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from PIL import Image

    from nucleo.data import Sample, read_png
    from nucleo.inference import overlay, predict
    from nucleo.maskops import merge_masks, write_submission

    model, means, _ = _load_model(args.checkpoint)
    out = Path(args.out)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    failed = 0
    rows, det_lines = [], ["image_id,index,x1,y1,x2,y2,score"]
    for path in args.images:
        path = Path(path)
        try:
            raw = read_png(path)
        except (OSError, ValueError) as exc:
            print(f"skipping {path}: {exc}", file=sys.stderr)
            failed += 1
            continue
        rgb = np.repeat(raw[..., None], 3, axis=2) if raw.ndim == 2 else raw
        sample = Sample(path.stem, np.ascontiguousarray(rgb.transpose(2, 0, 1)).astype(np.float32), [])
        dets = predict(model, sample, means)
        masks = [d.mask for d in dets]
        if args.resolve_overlaps and masks:
            labels = merge_masks(masks)
            masks = [labels == k for k in range(1, labels.max() + 1)]
        for k, d in enumerate(dets):
            det_lines.append(f"{sample.id},{k}," + ",".join(f"{v:.2f}" for v in d.box) + f",{d.score:.6f}")
        rows.extend(_rle_rows(sample.id, masks))
        Image.fromarray(overlay(rgb.astype(np.uint8), masks)).save(out / "overlays" / f"{sample.id}.png")
        print(f"{sample.id}: {len(dets)} detections")
    (out / "detections.csv").write_text("\n".join(det_lines) + "\n", encoding="utf-8")
    write_submission(out / "submission.csv", rows)
    return EXIT_DATA if failed else EXIT_OK


def cmd_export_rle(args) -> int:
    from nucleo.data import load_dataset
    from nucleo.inference import predict
    from nucleo.maskops import merge_masks, write_submission

    model, means, cfg = _load_model(args.checkpoint)
    root = args.dataset_root or cfg.dataset_root
    samples = load_dataset(root, _eval_ids(args, root))
    rows = []
    for s in samples:
        masks = [d.mask for d in predict(model, s, means)]
        if args.resolve_overlaps and masks:
            labels = merge_masks(masks)
            masks = [labels == k for k in range(1, labels.max() + 1)]
        rows.extend(_rle_rows(s.id, masks))
    write_submission(args.out, rows)
    print(f"wrote {len(rows)} lines for {len(samples)} images to {args.out}")
    return EXIT_OK


def _predictions_from_rle(path, samples):
    from nucleo.data import DataError
    from nucleo.maskops import RleMask, read_submission, rle_decode

    table = read_submission(path)
    known = {s.id for s in samples}
    unknown = sorted(set(table) - known)
    if unknown:
        raise DataError(f"submission has ids outside the evaluated set: {unknown[:5]}")
    preds = {}
    for s in samples:
        h, w = s.orig_hw
        # submissions carry no scores; all masks tie at 1.0
        preds[s.id] = [(rle_decode(RleMask.from_string(enc, h, w)), 1.0) for enc in table.get(s.id, [])]
    return preds


def cmd_eval(args) -> int:
    from nucleo.config import load_config
    from nucleo.data import DataError, load_dataset
    from nucleo.evaluation import evaluate_dataset, format_summary, write_report_csv
    from nucleo.inference import predict_samples

    if (args.checkpoint is None) == (args.rle is None):
        raise UsageError("eval needs exactly one of --checkpoint or --rle")
    if args.checkpoint is not None:
        model, means, cfg = _load_model(args.checkpoint)
    else:
        cfg = load_config(args.config, _overrides(args))
    root = args.dataset_root or cfg.dataset_root
    ids = _eval_ids(args, root)
    if not ids:
        raise DataError(f"no samples to evaluate under {root}")
    samples = load_dataset(root, ids)
    if args.checkpoint is not None:
        preds = predict_samples(model, samples, means)
    else:
        preds = _predictions_from_rle(args.rle, samples)
    report = evaluate_dataset(preds, {s.id: s.instances for s in samples})
    print(format_summary(report))
    print(REFERENCE_LINE)
    if args.out:
        write_report_csv(report, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from nucleo.certify import certify, format_table

    try:
        results = certify(seed=args.seed or 0, corrupt=args.corrupt)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    print(format_table(results))
    failed = [r.op for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} ops pass")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nucleo", description="Micro Mask R-CNN for nucleus instance segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True, root=True):
        if config:
            sp.add_argument("--config", type=Path, help="flat key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int)
        if root:
            sp.add_argument("--dataset-root", type=Path)

    sp = sub.add_parser("make-synth", help="write a synthetic nucleus dataset")
    sp.add_argument("--n", type=int, default=2)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--out", type=Path, required=True)
    common(sp, config=False, root=False)
    sp.set_defaults(func=cmd_make_synth)

    sp = sub.add_parser("split", help="seeded train/val/test split of a dataset")
    common(sp)
    sp.add_argument("--out", type=Path, help="write the split as JSON")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("train", help="three-stage training")
    common(sp)
    sp.add_argument("--out", type=Path, help="checkpoint directory (overrides out_dir)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="detect on PNG images, write detections, RLE and overlays")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--resolve-overlaps", action="store_true")
    sp.add_argument("images", nargs="+", type=Path)
    sp.set_defaults(func=cmd_infer)

    for name, func, hlp in (
        ("eval", cmd_eval, "AP and mask IoU of a checkpoint or RLE file"),
        ("export-rle", cmd_export_rle, "write a submission file for a dataset"),
    ):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--checkpoint", type=Path, required=name == "export-rle")
        if name == "eval":
            sp.add_argument("--rle", type=Path, help="evaluate a submission file instead")
            sp.add_argument("--out", type=Path, help="per-image report CSV")
        else:
            sp.add_argument("--out", type=Path, required=True)
            sp.add_argument("--resolve-overlaps", action="store_true")
        sp.add_argument("--split", type=Path, help="split JSON written by 'nucleo split'")
        sp.add_argument("--subset", choices=("train", "val", "test"), default="val")
        sp.set_defaults(func=func)

    sp = sub.add_parser("gradcheck", help="finite-difference certification of every op")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--corrupt", metavar="OP", help="double one op's backward (harness self-test)")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit():
    value = os.environ.get("NUCLEO_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    from nucleo.autodiff import CheckpointError
    from nucleo.config import ConfigError
    from nucleo.data import DataError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"nucleo: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"nucleo: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"nucleo: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
