"""Command-line entry point: ``sitsclue <subcommand> [flags]``.

Subcommands: synth, train-cls, pseudo, train-seg, eval, ablate, plot.
Every subcommand takes --config/--seed/--preset/--ablation-flags and writes
``effective_config.txt`` into its output directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_named_tensors, load_state_dict, save_module, save_named_tensors
from .clues import PrototypeBank
from .config import PRESETS, load_config, parse_ablation_flags, write_config
from .data import load_arrays, read_manifest, read_tensor_file, synth_dataset, write_tensor_file
from .encoder import ModelConfig, TSViT
from .errors import ConfigError, GenerationError, SitsClueError
from .experiments import SplitArrays, run_ablation, run_ratio
from .metrics import evaluate
from .training import (
    PSEUDO_MODES,
    generate_pseudo_labels,
    predict_segmentation,
    torch_dtype,
    train_classifier,
    train_segmentation,
)

log = logging.getLogger("sitsclue")


# -- helpers ----------------------------------------------------------------


def _config(args):
    overrides = parse_ablation_flags(args.ablation_flags)
    return load_config(args.config, args.preset, overrides, args.seed)


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(data_dir, split):
    path = Path(data_dir) / f"{split}_manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no {split} manifest in {data_dir}")
    manifest = read_manifest(path)
    series, masks, labels, ids = load_arrays(manifest)
    return SplitArrays(series, masks, labels, ids)


def dir_digest(directory):
    """sha256 over relative paths and bytes of every file under ``directory``."""
    directory = Path(directory)
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(directory).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def save_classifier(directory, run, cfg):
    directory = Path(directory)
    mcfg = run.model.config
    save_module(directory / "model", run.model, {"model_config": mcfg.to_dict()}, kind="model")
    meta = {"alpha": run.bank.alpha, "tau": run.bank.tau, "Np": run.bank.Np}
    save_named_tensors(directory / "bank", run.bank.state(), meta, kind="bank")


def load_classifier(directory, dtype, need_bank=False):
    directory = Path(directory)
    tensors, meta = load_named_tensors(directory / "model", expect_kind="model")
    model = TSViT(ModelConfig(**meta["model_config"])).to(dtype)
    load_state_dict(model, tensors)
    model.eval()
    bank = None
    if (directory / "bank" / "manifest.txt").exists():
        bt, bm = load_named_tensors(directory / "bank", expect_kind="bank")
        bt = {
            k: torch.from_numpy(np.ascontiguousarray(v.astype(bool) if k.startswith("init_") else v))
            for k, v in bt.items()
        }
        bt["positive"] = bt["positive"].to(dtype)
        bt["negative"] = bt["negative"].to(dtype)
        bank = PrototypeBank.from_state(bt, bm["alpha"], bm["tau"])
    elif need_bank:
        raise GenerationError("prototype bank missing")
    return model, bank


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- subcommands ------------------------------------------------------------


def cmd_synth(args):
    cfg = _config(args)
    out = _out(args)
    synth_dataset(cfg.synth, cfg.data.n_train, out, "train")
    synth_dataset(cfg.synth, cfg.data.n_test, out, "test")
    write_config(cfg, out)


def cmd_train_cls(args):
    cfg = _config(args)
    out = _out(args)
    write_config(cfg, out)
    train = _split(args.data, "train")
    run = train_classifier(train.series, train.labels, cfg.train, cfg.model_for_data(), progress=args.progress)
    save_classifier(out, run, cfg)
    _write_jsonl(out / "train_log.jsonl", run.log)


def cmd_pseudo(args):
    cfg = _config(args)
    mode = args.mode or ("raw_cam" if cfg.train.disable_cbcam else "cb_cam")
    if mode not in PSEUDO_MODES:
        raise ConfigError(f"--mode must be one of {PSEUDO_MODES}")
    model, bank = load_classifier(args.ckpt, torch_dtype(cfg.train.dtype), need_bank=mode == "cb_cam")
    out = _out(args)
    write_config(cfg, out)
    train = _split(args.data, "train")
    masks, report = generate_pseudo_labels(model, bank, train.series, train.labels, cfg.train, mode, train.masks)
    (out / "masks").mkdir(exist_ok=True)
    for sid, m in zip(train.ids, masks):
        write_tensor_file(out / "masks" / f"{sid}.pseudo.stsr", m)
    sidecar = [
        f"mode={mode}",
        f"theta_bg={cfg.train.theta_bg}",
        f"mu_low={cfg.train.mu_low}",
        f"mu_high={cfg.train.mu_high}",
        f"tau={cfg.train.tau}",
        f"checkpoint_sha256={dir_digest(args.ckpt)}",
    ]
    (out / "provenance.txt").write_text("\n".join(sidecar) + "\n", encoding="utf-8")
    report.write(out / "pseudo_report")


def _load_masks(mask_dir, ids, suffix=".pseudo.stsr"):
    mask_dir = Path(mask_dir)
    missing = [sid for sid in ids if not (mask_dir / f"{sid}{suffix}").exists()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} masks missing in {mask_dir}, e.g. {missing[0]}{suffix}")
    return np.stack([read_tensor_file(mask_dir / f"{sid}{suffix}").astype(np.int64) for sid in ids])


def cmd_train_seg(args):
    cfg = _config(args)
    out = _out(args)
    write_config(cfg, out)
    train = _split(args.data, "train")
    test = _split(args.data, "test")
    masks = train.masks if args.pseudo is None else _load_masks(Path(args.pseudo) / "masks", train.ids)
    run = train_segmentation(
        train.series, masks, test.series, test.masks, cfg.seg, cfg.model_for_data(), cfg.train.dtype
    )
    save_module(out / "model", run.model, {"model_config": run.model.config.to_dict()}, kind="segmentation")
    _write_jsonl(out / "train_log.jsonl", run.log)
    run.report.write(out / "test_report")
    preds = predict_segmentation(run.model, test.series)
    (out / "predictions").mkdir(exist_ok=True)
    for sid, p in zip(test.ids, preds):
        write_tensor_file(out / "predictions" / f"{sid}.pred.stsr", p)


def cmd_eval(args):
    """Score a directory of predicted masks against the ground truth of a split."""
    cfg = _config(args)
    out = _out(args)
    write_config(cfg, out)
    split = _split(args.data, args.split)
    pred_dir = Path(args.pred)
    suffix = ".pred.stsr" if args.split == "test" else ".pseudo.stsr"
    if (pred_dir / "masks").is_dir():
        pred_dir = pred_dir / "masks"
    elif (pred_dir / "predictions").is_dir():
        pred_dir = pred_dir / "predictions"
    preds = _load_masks(pred_dir, split.ids, suffix)
    report = evaluate(preds, split.masks, cfg.synth.K + 1, include_background=not args.foreground_only)
    report.write(out / "report")
    print(report.to_text(), end="")


def cmd_ablate(args):
    cfg = _config(args)
    out = _out(args)
    write_config(cfg, out)
    train = _split(args.data, "train")
    result = run_ablation(cfg, train, progress=args.progress)
    table = result.table()
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in result.rows], fh, indent=1, sort_keys=True)
        fh.write("\n")
    if args.with_ratio:
        test = _split(args.data, "test")
        ratio = run_ratio(cfg, train, test, result.masks["full"], result.masks["baseline"])
        with open(out / "ratio.json", "w", encoding="utf-8") as fh:
            json.dump(ratio.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
    print(table, end="")


def cmd_plot(args):
    from .plots import plot_attention, plot_panels

    cfg = _config(args)
    out = _out(args)
    write_config(cfg, out)
    model, bank = load_classifier(args.ckpt, torch_dtype(cfg.train.dtype))
    train = _split(args.data, "train")
    n = min(args.n_samples, len(train.ids))
    sub = SplitArrays(train.series[:n], train.masks[:n], train.labels[:n], train.ids[:n])
    plot_panels(model, bank, sub, cfg.train, out / "cam_panels.png")
    plot_attention(model, sub, cfg.train, out / "attention_time.png")


# -- parser -----------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value config file (section.key = value)")
    common.add_argument("--seed", type=int, help="single seed for every random sub-stream")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--ablation-flags", default="", help="e.g. 'disable_cbl,cam_source=temporal'")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--progress", type=int, default=0, help="log every N iterations (0 = quiet)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sitsclue", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic train/test dataset")

    s = sub.add_parser("train-cls", parents=[common], help="train the classifier and prototype bank")
    s.add_argument("--data", required=True)

    s = sub.add_parser("pseudo", parents=[common], help="write pseudo masks for the train split")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True, help="train-cls output directory")
    s.add_argument("--mode", choices=PSEUDO_MODES)

    s = sub.add_parser("train-seg", parents=[common], help="train segmentation on pseudo or true masks")
    s.add_argument("--data", required=True)
    s.add_argument("--pseudo", help="pseudo output directory (omit for ground-truth masks)")

    s = sub.add_parser("eval", parents=[common], help="score predicted masks against ground truth")
    s.add_argument("--data", required=True)
    s.add_argument("--pred", required=True, help="pseudo or train-seg output directory")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--foreground-only", action="store_true", help="exclude background from mIoU")

    s = sub.add_parser("ablate", parents=[common], help="baseline / +tap / +cbl+tap / full comparison")
    s.add_argument("--data", required=True)
    s.add_argument("--with-ratio", action="store_true", help="also run the supervision-ratio segmentation")

    s = sub.add_parser("plot", parents=[common], help="CAM panels and attention-over-time charts")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n-samples", type=int, default=4)
    return p


COMMANDS = {
    "synth": cmd_synth,
    "train-cls": cmd_train_cls,
    "pseudo": cmd_pseudo,
    "train-seg": cmd_train_seg,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if (args.verbose or args.progress) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (SitsClueError, FileNotFoundError, KeyError) as exc:
        print(f"sitsclue {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
