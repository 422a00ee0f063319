"""``dfm`` command line entry point."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np


def _cmd_gt_df(args):
    from .direction_field import compute_direction_field, read_mask, save_field_png, write_field

    df = compute_direction_field(read_mask(args.mask))
    write_field(df, args.out)
    if args.viz:
        save_field_png(df, args.viz)
    print(f"wrote {args.out} ({df.shape[1]}x{df.shape[2]})")


def _cmd_synth(args):
    from .data import write_synth_dataset

    manifest = write_synth_dataset(args.out, args.count, args.seed, args.size)
    print(f"wrote {args.count} samples, manifest {manifest}")


def _cmd_train(args):
    from .harness import load_config, train

    cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
    ckpt = train(cfg, device=args.device)
    print(f"best checkpoint: {ckpt}")


def _print_summary(report):
    from .harness import summary_rows

    names = [r.structure for r in report.rows]
    print("head,metric," + ",".join(names) + ",Mean")
    for row in summary_rows(report):
        print(",".join(str(x) for x in row))


def _cmd_eval(args):
    from .harness import evaluate

    out = args.out or Path(args.ckpt).with_suffix("").as_posix() + "_eval"
    report = evaluate(args.ckpt, args.data, split=args.split, fold=args.fold, out_dir=out, max_d=args.max_d, device=args.device)
    _print_summary(report)
    print(f"reports in {out}")


def _cmd_ablate(args):
    from .harness import ABLATION_FIELDS, ablate_steps, load_config

    cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
    steps = [int(s) for s in args.steps.split(",") if s.strip()]
    rows = ablate_steps(cfg, steps, device=args.device)
    print(",".join(ABLATION_FIELDS[:3]))
    for r in rows:
        print(f"{r['steps']},{r['mean_dice']:.6f},{r['mean_hd_mm']:.6f}")


def _match_pairs(pred_dir, gt_dir):
    pairs = []
    for gt in sorted(Path(gt_dir).glob("*.nii*")):
        name = gt.name
        candidates = [Path(pred_dir) / name, Path(pred_dir) / name.replace("_gt.nii", ".nii")]
        pred = next((c for c in candidates if c.exists()), None)
        if pred is None:
            raise FileNotFoundError(f"no prediction for {gt.name} in {pred_dir}")
        pairs.append((name.split(".nii")[0].removesuffix("_gt"), pred, gt))
    if not pairs:
        raise FileNotFoundError(f"no NIfTI files in {gt_dir}")
    return pairs


def _cmd_metrics(args):
    from . import REPORT_ORDER
    from .data import read_nifti
    from .harness import aggregate, parse_structures, write_csv, write_stratified, fmt_num
    from .metrics import boundary_distance_accuracy, evaluate_case

    structures = parse_structures(args.structures)
    names = [n for n in REPORT_ORDER if n in structures.values()]
    names += [n for n in structures.values() if n not in names]
    per_case, preds, gts = {}, [], []
    for case_id, pred_path, gt_path in _match_pairs(args.pred, args.gt):
        pred, _ = read_nifti(pred_path)
        gt, spacing = read_nifti(gt_path)
        if not args.spacing_from_header:
            spacing = tuple(float(s) for s in args.spacing.split(","))
        pred, gt = np.rint(pred).astype(np.int64), np.rint(gt).astype(np.int64)
        per_case[case_id] = evaluate_case(pred, gt, spacing, structures)
        preds.append(pred)
        gts.append(gt)
    rows, mean = aggregate(per_case, names)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = [[cid, r.structure, fmt_num(r.dice), fmt_num(r.hausdorff_mm)] for cid, rs in per_case.items() for r in rs]
    table += [["MEAN", r.structure, fmt_num(r.dice), fmt_num(r.hausdorff_mm)] for r in rows + [mean]]
    write_csv(out / "metrics.csv", ["case_id", "structure", "dice", "hd_mm"], table)
    acc = boundary_distance_accuracy(
        np.concatenate([p.reshape(-1, *p.shape[-2:]) for p in preds]),
        np.concatenate([g.reshape(-1, *g.shape[-2:]) for g in gts]),
        args.max_d,
    )
    write_stratified(out / "stratified.csv", {"accuracy": acc})
    from .plotting import plot_stratified

    plot_stratified({"prediction": acc}, out / "stratified.png")
    for row in table:
        print(",".join(str(x) for x in row))


def build_parser():
    p = argparse.ArgumentParser(prog="dfm", description="Directional feature maps for cardiac MRI segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gt-df", help="ground-truth direction field from a label mask")
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--viz")
    s.set_defaults(func=_cmd_gt_df)

    s = sub.add_parser("synth", help="write a synthetic phantom dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth)

    for name, func in (("train", _cmd_train), ("ablate", _cmd_ablate)):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="override output_dir")
        s.add_argument("--device", default="cpu")
        if name == "ablate":
            s.add_argument("--steps", default="0,1,3,5,7")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", default="", help="dataset spec; defaults to $DFM_DATA_ROOT")
    s.add_argument("--split", choices=("all", "train", "val"), default="all")
    s.add_argument("--fold", type=int)
    s.add_argument("--out")
    s.add_argument("--max-d", type=int, default=10)
    s.add_argument("--device", default="cpu")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("metrics", help="score NIfTI predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--spacing-from-header", action="store_true")
    s.add_argument("--spacing", default="1,1,1", help="sz,sy,sx in mm when not read from headers")
    s.add_argument("--structures", default="1:RV,2:MYO,3:LV")
    s.add_argument("--max-d", type=int, default=10)
    s.add_argument("--out", default="metrics_out")
    s.set_defaults(func=_cmd_metrics)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"dfm: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
