"""Command-line entry point: gen-data, train, eval, count-params, gradcheck, ablate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, gradsuite, params_count, report
from . import config as C
from . import params as P
from .model import SegModel
from .synthetic import SyntheticSpec, gen_dataset, read_dataset, split, write_dataset
from .train import PROMPT_SETTINGS, TrainConfig, evaluate, normalize_setting, prompts_for, train

log = logging.getLogger("adaptseg")

MODES = ("none", "add", "concat", "hyper")
# largest model the count-params audit will also assemble to cross-check the formula
ASSEMBLE_LIMIT = 20_000_000


class CLIError(Exception):
    pass


def _train_config(args, **extra) -> TrainConfig:
    overrides = {"seed": args.seed, "mode": getattr(args, "mode", None), **extra}
    if args.config:
        return C.load(TrainConfig, args.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def _load_data(path, cfg: TrainConfig):
    if not path:
        raise CLIError("no dataset given: set data=<dir> in the config or pass --data")
    try:
        samples = read_dataset(path)
    except FileNotFoundError as exc:
        raise CLIError(str(exc)) from None
    want = (cfg.depth, cfg.image_size, cfg.image_size, cfg.channels)
    if samples and samples[0].image.shape != want:
        raise CLIError(f"dataset images are {samples[0].image.shape}, config expects {want}")
    return samples


def cmd_gen_data(args) -> int:
    spec = C.load(SyntheticSpec, args.config, seed=args.seed) if args.config else SyntheticSpec(seed=args.seed or 0)
    out = Path(args.out)
    write_dataset(out, gen_dataset(spec), spec)
    print(f"wrote {spec.count} samples ({spec.kind}, {spec.depth}x{spec.image_size}x{spec.image_size}) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args, eval_prompt=args.prompt, data=args.data)
    samples = _load_data(cfg.data, cfg)
    train_set, test_set = split(samples, cfg.train_fraction, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.jsonl"
    result = train(cfg, train_set, test_set, log_path=log_path, on_epoch=lambda r: print(json.dumps(r.as_dict()), flush=True))
    checkpoint.save(out / "checkpoint", result.model, cfg, step=result.steps)
    if result.history:
        report.plot_history([h.as_dict() for h in result.history], out / "training.png")
    print(f"checkpoint: {out / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    try:
        model, cfg, _ = checkpoint.load(args.checkpoint)
    except checkpoint.CheckpointError as exc:
        raise CLIError(str(exc)) from None
    samples = _load_data(args.data or cfg.data, cfg)
    if args.split == "test":
        _, samples = split(samples, cfg.train_fraction, cfg.seed)
    settings = PROMPT_SETTINGS if args.prompt == "all" else (normalize_setting(args.prompt),)
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary_rows = []
    for setting in settings:
        rep = evaluate(model, samples, setting, seed=seed)
        report.write_tsv(out / f"eval_{setting}.tsv", rep.rows, ["index", "dice", "iou", "hd95"])
        summary_rows.append({"setting": setting, "seed": seed, "samples": len(rep.rows), **rep.summary})
        k = min(8, len(samples))
        shown = samples[:k]
        prompts = prompts_for(shown, setting, seed, cfg.model_config.is_volume)
        probs = model.predict(np.stack([s.image for s in shown]), prompts)
        titles = [f"dice {r['dice']:.2f}" for r in rep.rows[:k]]
        report.plot_overlays(
            [s.image for s in shown], [s.mask for s in shown], probs > 0.5, prompts, out / f"overlay_{setting}.png", titles
        )
    report.write_tsv(out / "summary.tsv", summary_rows, ["setting", "seed", "samples", "dice", "iou", "hd95"])
    for r in summary_rows:
        print(f"{r['setting']}\tdice={r['dice']:.4f}\tiou={r['iou']:.4f}\thd95={r['hd95']:.3f}")
    return 0


def count_rows(model_cfg, assemble: bool) -> list[dict]:
    counted = params_count.count(model_cfg)
    row = {
        "total": counted.total,
        "trainable": counted.trainable,
        "fraction": counted.fraction,
        "check": "formula only",
    }
    if assemble:
        model = SegModel(model_cfg)
        total = P.count(model.params)
        trainable = sum(t.size for t in model.trainable_parameters())
        if (total, trainable) != (counted.total, counted.trainable):
            raise CLIError(f"closed-form count {counted} disagrees with assembled model ({total}, {trainable})")
        row["check"] = "assembled model agrees"
    return [row]


def cmd_count_params(args) -> int:
    if args.vit_h:
        model_cfg = params_count.vit_h_config(args.reduction or 16, args.mode or "hyper")
    else:
        model_cfg = _train_config(args).model_config
        if args.reduction:
            model_cfg = dataclasses.replace(model_cfg, reduction=args.reduction)
    counted = params_count.count(model_cfg)
    rows = count_rows(model_cfg, assemble=counted.total <= ASSEMBLE_LIMIT)
    print("group\tparameters")
    for name, n in params_count.breakdown(model_cfg).items():
        print(f"{name}\t{n}")
    r = rows[0]
    print(f"total\t{r['total']}\ntrainable\t{r['trainable']}\nfraction\t{r['fraction']:.6f}\ncheck\t{r['check']}")
    if args.out:
        report.write_tsv(args.out, rows, ["total", "trainable", "fraction", "check"])
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = gradsuite.run_all(cases=args.cases, seed=seed, only=args.only)
    print("suite\top\tcases\tcoords\tkinks\tmax_rel_err\tresult")
    for r in results:
        print(f"{r.suite}\t{r.op}\t{r.cases}\t{r.coords}\t{r.kinks}\t{r.max_rel_err:.3e}\t{'pass' if r.passed else 'FAIL'}")
    if args.out:
        report.write_tsv(args.out, [r.row() for r in results])
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} op(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    base = _train_config(args, data=args.data)
    samples = _load_data(base.data, base)
    modes = args.modes.split(",") if args.modes else list(MODES)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        train_set, test_set = split(samples, base.train_fraction, seed)
        for mode in modes:
            cfg = dataclasses.replace(base, seed=seed, mode=mode)
            res = train(cfg, train_set, test_set)
            summary = evaluate(res.model, test_set, args.prompt, seed=seed).summary
            rows.append({"mode": mode, "seed": seed, **summary})
            print(f"{mode}\tseed={seed}\tdice={summary['dice']:.4f}", flush=True)
    report.write_tsv(out / "ablation_runs.tsv", rows, ["mode", "seed", "dice", "iou", "hd95"])
    table = report.summarize(rows, "mode")
    report.write_tsv(out / "ablation.tsv", table, ["mode", "runs", "dice", "dice_std", "iou", "iou_std", "hd95", "hd95_std"])
    report.plot_ablation(table, "mode", out / "ablation.png")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the adapters on a dataset")
    common(p)
    p.add_argument("--data", help="dataset directory (overrides the config)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--prompt", choices=PROMPT_SETTINGS, help="prompt setting for the per-epoch held-out evaluation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a prompt setting")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--prompt", choices=PROMPT_SETTINGS + ("all",), default="1point")
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-params", help="total / trainable parameter audit")
    common(p, out_required=False)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--vit-h", action="store_true", help="audit ViT-H/16 dimensions instead of the config")
    p.add_argument("--reduction", type=int, help="adapter reduction ratio override")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--only", nargs="*", help="op or suite names")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train every prompt-conditioning mode and tabulate")
    common(p)
    p.add_argument("--data")
    p.add_argument("--modes", help="comma-separated subset of none,add,concat,hyper")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--prompt", choices=PROMPT_SETTINGS, default="1point")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CLIError, C.ConfigError, checkpoint.CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
