"""Training, evaluation and step-count ablation."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import subprocess
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import REPORT_ORDER, __version__
from .data import (
    MANIFEST,
    augment,
    fold_split,
    load_acdc_root,
    load_manifest_dir,
    slice_and_preprocess,
    synth_volumes,
)
from .losses import LossConfig, cross_entropy, direction_field_loss, total_loss
from .metrics import StructureResult, boundary_distance_accuracy, evaluate_case
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "DFM_DATA_ROOT"


@dataclass
class TrainConfig:
    data: str = "acdc"
    val_data: str = ""
    fold: int = 0
    num_folds: int = 5
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    frf_steps: int = 5
    alpha: float = 1.0
    lambda_df: float = 1.0
    epsilon_acos: float = 1e-7
    squared_l2: bool = False
    seed: int = 0
    augment: bool = True
    deterministic: bool = True
    image_size: int = 256
    base_channels: int = 64
    depth: int = 4
    structures: str = "1:RV,2:MYO,3:LV"
    output_dir: str = "runs/dfm"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.image_size % 2**self.depth:
            raise ValueError(f"image_size {self.image_size} not divisible by 2**depth")

    @property
    def loss(self):
        return LossConfig(self.alpha, self.lambda_df, self.epsilon_acos, self.squared_l2)

    @property
    def model(self):
        return ModelConfig(
            num_classes=len(self.structure_map) + 1,
            base_channels=self.base_channels,
            depth=self.depth,
            frf_steps=self.frf_steps,
        )

    @property
    def structure_map(self):
        return parse_structures(self.structures)

    def to_text(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def _fmt(v):
    return str(v).lower() if isinstance(v, bool) else str(v)


def parse_structures(text):
    out = {}
    for item in text.split(","):
        k, _, name = item.partition(":")
        out[int(k)] = name.strip()
    if sorted(out) != list(range(1, len(out) + 1)):
        raise ValueError(f"structure ids must be 1..K, got {sorted(out)}")
    return out


def _convert(raw, typ):
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def parse_config(text, **overrides):
    """Flat ``key = value`` document; ``#`` starts a comment, unknown keys are an error."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = (s.strip() for s in line.partition("="))
        if not sep:
            raise ValueError(f"line {n}: expected 'key = value'")
        if key not in types:
            raise ValueError(f"line {n}: unknown config key {key!r}")
        values[key] = _convert(raw, types[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def load_config(path, **overrides):
    return parse_config(Path(path).read_text(), **overrides)


# -- datasets ----------------------------------------------------------------

def load_cases(spec, num_classes=3):
    """Resolve a dataset spec to ``{group_id: [VolumeSample, ...]}``.

    Accepted forms: ``synth:count=N,seed=S,size=P``, ``acdc:<root>``, a
    directory written by ``dfm synth``, an ACDC root directory, or ``acdc`` /
    empty to fall back on ``$DFM_DATA_ROOT``.
    """
    spec = (spec or "").strip()
    if spec.startswith("synth:") or spec == "synth":
        opts = dict(count=250, seed=0, size=64)
        for item in filter(None, spec[6:].split(",")):
            k, _, v = item.partition("=")
            if k not in opts:
                raise ValueError(f"unknown synthetic option {k!r}")
            opts[k] = int(v)
        return {v.case_id: [v] for v in synth_volumes(opts["count"], opts["seed"], opts["size"])}
    if spec in ("", "acdc"):
        root = os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise FileNotFoundError(f"no dataset given and ${DATA_ROOT_ENV} is not set")
        spec = root
    if spec.startswith("acdc:"):
        spec = spec[5:]
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if (path / MANIFEST).exists():
        return {v.case_id: [v] for v in load_manifest_dir(path, num_classes)}
    return load_acdc_root(path, num_classes)


def select_split(cases, split, fold, num_folds):
    if split == "all":
        return cases
    train, val = fold_split(cases, fold, num_folds)
    keep = train if split == "train" else val
    return {k: cases[k] for k in keep}


def to_slices(cases, size, labelled_only=True):
    out = []
    for group in cases.values():
        for v in group:
            if labelled_only and v.label is None:
                continue
            out.extend(slice_and_preprocess(v, size))
    return out


# -- training ----------------------------------------------------------------

def set_deterministic(seed, enabled=True):
    torch.manual_seed(seed)
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _stack(samples, device):
    img = torch.from_numpy(np.stack([s.image for s in samples])).to(device)
    lab = torch.from_numpy(np.stack([s.label for s in samples])).to(device)
    df = torch.from_numpy(np.stack([s.df_gt for s in samples])).to(device)
    w = torch.from_numpy(np.stack([s.weight for s in samples])).to(device)
    return img, lab, df, w


def loss_terms(out, lab, df, w, loss_cfg):
    ce_i = cross_entropy(out.initial_logits, lab)
    ce_f = cross_entropy(out.final_logits, lab)
    l_df = direction_field_loss(out.direction_field, df, w, loss_cfg)
    return ce_i, ce_f, l_df, total_loss(ce_i, ce_f, l_df, loss_cfg)


@torch.no_grad()
def predict(model, slices, batch_size=16, device="cpu"):
    """Argmax label maps of the final and initial heads, one per slice."""
    model.eval()
    final, initial = [], []
    for i in range(0, len(slices), batch_size):
        img = torch.from_numpy(np.stack([s.image for s in slices[i : i + batch_size]])).to(device)
        out = model(img)
        final.extend(out.final_logits.argmax(1).cpu().numpy())
        initial.extend(out.initial_logits.argmax(1).cpu().numpy())
    return final, initial


def assemble(slices, preds):
    """Stack per-slice predictions back into ``{case_id: (pred, gt, spacing)}`` volumes."""
    by_case = {}
    for s, p in zip(slices, preds):
        by_case.setdefault(s.case_id, []).append((s.index, p, s.label, s.spacing))
    vols = {}
    for cid, items in by_case.items():
        items.sort(key=lambda t: t[0])
        vols[cid] = (
            np.stack([t[1] for t in items]),
            np.stack([t[2] for t in items]),
            items[0][3],
        )
    return vols


def case_results(vols, structures):
    return {cid: evaluate_case(p, g, sp, structures) for cid, (p, g, sp) in vols.items()}


def _val_pass(model, slices, cfg, device):
    model.eval()
    total, n = 0.0, 0
    finals = []
    with torch.no_grad():
        for i in range(0, len(slices), cfg.batch_size):
            chunk = slices[i : i + cfg.batch_size]
            img, lab, df, w = _stack(chunk, device)
            out = model(img)
            total += float(loss_terms(out, lab, df, w, cfg.loss)[3]) * len(chunk)
            n += len(chunk)
            finals.extend(out.final_logits.argmax(1).cpu().numpy())
    per_case = case_results(assemble(slices, finals), cfg.structure_map)
    dice = float(np.mean([[r.dice for r in rows] for rows in per_case.values()]))
    return total / max(n, 1), dice


def _dump_nonfinite(out_dir, epoch, batch, terms):
    path = Path(out_dir) / "nonfinite_dump.json"
    path.write_text(
        json.dumps(
            {
                "epoch": epoch,
                "batch": [f"{s.case_id}:{s.index}" for s in batch],
                "ce_initial": terms[0].item(),
                "ce_final": terms[1].item(),
                "df_loss": terms[2].item(),
                "total": terms[3].item(),
            },
            indent=2,
        )
    )
    return path


HISTORY_FIELDS = ["epoch", "train_loss", "train_ce_initial", "train_ce_final", "train_df", "val_loss", "val_dice"]


def train(cfg: TrainConfig, device="cpu"):
    """Train and return the path of the best-validation-Dice checkpoint.

    Writes ``history.csv``, ``curves.png``, ``best.pt``, ``last.pt`` and
    ``config.txt`` under ``cfg.output_dir``.
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())
    set_deterministic(cfg.seed, cfg.deterministic)

    k = len(cfg.structure_map)
    cases = load_cases(cfg.data, k)
    if cfg.val_data:
        train_cases, val_cases = cases, load_cases(cfg.val_data, k)
    else:
        train_cases = select_split(cases, "train", cfg.fold, cfg.num_folds)
        val_cases = select_split(cases, "val", cfg.fold, cfg.num_folds)
    train_slices = to_slices(train_cases, cfg.image_size)
    val_slices = to_slices(val_cases, cfg.image_size)
    if not train_slices:
        raise ValueError("training split has no labelled slices")
    log.info("train slices %d, val slices %d", len(train_slices), len(val_slices))

    model = build_model(cfg.model, seed=cfg.seed).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    meta = dict(train_config=cfg.to_text(), config_hash=cfg.hash(), seed=cfg.seed)

    history = []
    best = -1.0
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_slices))
        model.train()
        sums = np.zeros(4)
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_slices[i] for i in order[start : start + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, rng) for s in batch]
            img, lab, df, w = _stack(batch, device)
            terms = loss_terms(model(img), lab, df, w, cfg.loss)
            if not torch.isfinite(terms[3]):
                dump = _dump_nonfinite(out_dir, epoch, batch, terms)
                raise FloatingPointError(f"non-finite loss at epoch {epoch}; diagnostics in {dump}")
            opt.zero_grad()
            terms[3].backward()
            opt.step()
            sums += np.array([t.item() for t in (terms[3], *terms[:3])]) * len(batch)
            seen += len(batch)
        sums /= seen
        val_loss, val_dice = _val_pass(model, val_slices, cfg, device) if val_slices else (float("nan"), float("nan"))
        row = dict(zip(HISTORY_FIELDS, [epoch, *sums.tolist(), val_loss, val_dice]))
        history.append(row)
        log.info("epoch %d loss %.4f val_loss %.4f val_dice %.4f", epoch, sums[0], val_loss, val_dice)

        save_checkpoint(model, out_dir / "last.pt", epoch=epoch, val_dice=val_dice, **meta)
        if not val_slices or val_dice > best:
            best = val_dice
            save_checkpoint(model, out_dir / "best.pt", epoch=epoch, val_dice=val_dice, **meta)

    write_csv(out_dir / "history.csv", HISTORY_FIELDS, history)
    from .plotting import plot_training_curves

    plot_training_curves(history, out_dir / "curves.png")
    return out_dir / "best.pt"


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list  # StructureResult per structure, report order
    mean: StructureResult
    per_case: dict = field(default_factory=dict)
    initial_rows: list = field(default_factory=list)
    initial_mean: StructureResult | None = None
    stratified: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def mean_dice(self):
        return self.mean.dice

    @property
    def mean_hd(self):
        return self.mean.hausdorff_mm


def aggregate(per_case, names):
    """Per-structure means over cases (HD ignores undefined cases) plus the mean row."""
    rows = []
    for name in names:
        vals = [r for rows_ in per_case.values() for r in rows_ if r.structure == name]
        hds = [r.hausdorff_mm for r in vals if np.isfinite(r.hausdorff_mm)]
        rows.append(
            StructureResult(
                name,
                float(np.mean([r.dice for r in vals])) if vals else float("nan"),
                float(np.mean(hds)) if hds else float("nan"),
            )
        )
    mean = StructureResult(
        "Mean",
        float(np.mean([r.dice for r in rows])),
        float(np.mean([r.hausdorff_mm for r in rows])),
    )
    return rows, mean


def revision():
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, check=True, cwd=Path(__file__).parent,
        ).stdout.strip()
    except (OSError, subprocess.CalledProcessError):
        rev = "unknown"
    return f"{__version__}+{rev}"


def evaluate_model(model, slices, structures, batch_size=16, max_d=10, device="cpu"):
    order = [structures[c] for c in sorted(structures)]
    names = [n for n in REPORT_ORDER if n in order] + [n for n in order if n not in REPORT_ORDER]
    final, initial = predict(model, slices, batch_size, device)
    vols_f = assemble(slices, final)
    vols_i = assemble(slices, initial)
    per_case = case_results(vols_f, structures)
    rows, mean = aggregate(per_case, names)
    init_rows, init_mean = aggregate(case_results(vols_i, structures), names)
    strat = {}
    for head, vols in (("final", vols_f), ("initial", vols_i)):
        preds = np.concatenate([p for p, _, _ in vols.values()])
        gts = np.concatenate([g for _, g, _ in vols.values()])
        strat[head] = boundary_distance_accuracy(preds, gts, max_d)
    return EvalReport(rows, mean, per_case, init_rows, init_mean, strat)


def evaluate(checkpoint, data_spec, split="all", fold=None, out_dir=None, max_d=10, device="cpu"):
    """Evaluate a checkpoint on a dataset spec; optionally write CSV/PNG reports."""
    model, meta = load_checkpoint(checkpoint)
    cfg = parse_config(meta["train_config"]) if "train_config" in meta else TrainConfig()
    if cfg.model != model.cfg:
        raise ValueError(f"checkpoint config {model.cfg} disagrees with its training config {cfg.model}")
    model.to(device)
    structures = cfg.structure_map
    cases = select_split(
        load_cases(data_spec, len(structures)), split, cfg.fold if fold is None else fold, cfg.num_folds
    )
    slices = to_slices(cases, cfg.image_size)
    if not slices:
        raise ValueError("dataset has no labelled slices to evaluate")
    report = evaluate_model(model, slices, structures, cfg.batch_size, max_d, device)
    report.metadata = dict(
        config_hash=meta.get("config_hash", cfg.hash()),
        seed=cfg.seed,
        revision=revision(),
        data=data_spec,
        split=split,
        fold=cfg.fold if fold is None else fold,
        checkpoint_epoch=meta.get("epoch"),
    )
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[h] for h in header] if isinstance(r, dict) else r)


def fmt_num(x):
    return "" if x is None or not np.isfinite(x) else f"{x:.6f}"


def summary_rows(report):
    """Table-1 layout: one row per (head, metric) with LV, RV, MYO, Mean columns."""
    out = []
    for head, rows, mean in (("final", report.rows, report.mean), ("initial", report.initial_rows, report.initial_mean)):
        if mean is None:
            continue
        out.append([head, "dice", *[fmt_num(r.dice) for r in rows], fmt_num(mean.dice)])
        out.append([head, "hd_mm", *[fmt_num(r.hausdorff_mm) for r in rows], fmt_num(mean.hausdorff_mm)])
    return out


def write_report(report, out_dir):
    from .plotting import plot_stratified

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [r.structure for r in report.rows]
    write_csv(out_dir / "summary.csv", ["head", "metric", *names, "Mean"], summary_rows(report))
    per_case = [
        [cid, r.structure, fmt_num(r.dice), fmt_num(r.hausdorff_mm)]
        for cid, rows in sorted(report.per_case.items())
        for r in rows
    ]
    per_case += [["MEAN", r.structure, fmt_num(r.dice), fmt_num(r.hausdorff_mm)] for r in report.rows + [report.mean]]
    write_csv(out_dir / "per_case.csv", ["case_id", "structure", "dice", "hd_mm"], per_case)
    if report.stratified:
        write_stratified(out_dir / "stratified.csv", report.stratified)
        plot_stratified(report.stratified, out_dir / "stratified.png")
    (out_dir / "metadata.json").write_text(json.dumps(report.metadata, indent=2, default=str))


def write_stratified(path, curves):
    heads = list(curves)
    dists = sorted({d for acc in curves.values() for d in acc.distances})
    lookup = {h: dict(zip(curves[h].distances, curves[h].accuracy)) for h in heads}
    rows = [[d, *[fmt_num(lookup[h].get(d, float("nan"))) for h in heads]] for d in dists]
    header = ["distance", "accuracy"] if heads == ["accuracy"] else ["distance", *[f"accuracy_{h}" for h in heads]]
    write_csv(path, header, rows)


# -- ablation ----------------------------------------------------------------

ABLATION_FIELDS = ["steps", "mean_dice", "mean_hd_mm", "checkpoint"]


def ablate_steps(cfg: TrainConfig, step_list, device="cpu"):
    """One training run per FRF step count on the same seed and split; returns table rows."""
    if len(set(step_list)) != len(step_list) or any(n < 0 for n in step_list):
        raise ValueError("step_list must hold distinct non-negative integers")
    root = Path(cfg.output_dir)
    rows = []
    for n in step_list:
        run = replace(cfg, frf_steps=n, output_dir=str(root / f"steps_{n}"))
        # score the final epoch: best.pt was picked on the split being scored
        ckpt = train(run, device).with_name("last.pt")
        report = evaluate(ckpt, run.val_data or run.data, split="all" if run.val_data else "val", device=device)
        rows.append(dict(steps=n, mean_dice=report.mean_dice, mean_hd_mm=report.mean_hd, checkpoint=str(ckpt)))
    root.mkdir(parents=True, exist_ok=True)
    write_csv(root / "ablation.csv", ABLATION_FIELDS, rows)
    from .plotting import plot_ablation

    plot_ablation(rows, root / "ablation.png")
    return rows
