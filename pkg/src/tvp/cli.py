"""Command-line entry points: gen-data, train, eval, bench.

Reports go to stdout as JSON; logs go to stderr; figures and delimited
outputs land next to each command's file artifacts. Every command is
deterministic given the same config and seed (single-threaded mode for
training).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from tvp.config import ConfigError, RunConfig, config_from_dict, default_config, load_config
from tvp.data import load_dataset, load_split
from tvp.evaluator import evaluate, write_per_sample_csv
from tvp.figures import save_accuracy_bars, save_bench_bars, save_loss_curve, save_tiou_histogram
from tvp.bench import BenchConfig, run_bench
from tvp.model import GroundingModel, PromptState
from tvp.prompts import init_prompts
from tvp.synthgen import SyntheticSpec, gen_dataset
from tvp.trainer import Checkpoint, Trainer, TrainingDiverged

log = logging.getLogger("tvp")


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _load_run_config(path: str | None) -> RunConfig:
    return load_config(path) if path else default_config()


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {value!r}")


def _parse_thresholds(value: str) -> tuple[float, ...]:
    try:
        out = tuple(float(part) for part in value.split(",") if part != "")
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad threshold list {value!r}") from exc
    if not out:
        raise argparse.ArgumentTypeError("threshold list is empty")
    return out


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args.config)
    spec = cfg.synth
    if args.seed is not None:
        spec = SyntheticSpec.from_json({**spec.to_json(), "seed": args.seed})
    out_dir = Path(args.out)
    dataset = gen_dataset(spec, out_dir)
    splits = {name: sum(1 for r in dataset.records if r.split == name) for name in ("train", "val", "test")}
    _emit(
        {
            "command": "gen-data",
            "out_dir": str(out_dir),
            "n_samples": len(dataset.records),
            "splits": splits,
            "self_check": {
                "oracle_hit_rate": dataset.self_check["oracle_hit_rate"],
                "min_contrast": dataset.self_check["min_contrast"],
            },
            "config": cfg.to_json() | {"synth": spec.to_json()},
        }
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _write_metrics_csv(history: list[dict], path: Path) -> None:
    fields: list[str] = []
    for row in history:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    stage = args.stage
    if stage == "base" and args.init_ckpt:
        raise ValueError("base stage starts from random init; --init-ckpt is not accepted")
    if stage in ("prompt", "finetune") and not args.init_ckpt:
        raise ValueError(f"{stage} stage requires --init-ckpt")

    dataset = load_dataset(args.data)
    train_samples = load_split(dataset, "train", cfg.pipeline)
    val_samples = load_split(dataset, "val", cfg.pipeline)

    train_cfg = cfg.train.build(stage, cfg.loss, seed=args.seed, threads=args.threads)
    if stage == "base":
        model = GroundingModel.create(cfg.model, seed=train_cfg.seed)
        prompts = None
    else:
        ckpt_in = Checkpoint.load(args.init_ckpt)
        model = ckpt_in.restore_model(cfg.model)
        if stage == "prompt":
            vis, txt = init_prompts(
                cfg.pipeline.n_sam,
                cfg.pipeline.canvas,
                cfg.prompts.width,
                cfg.prompts.n_text,
                cfg.model.hidden_dim,
                mode=cfg.prompts.mode,
                seed=train_cfg.seed,
            )
            prompts = PromptState.from_sets(vis, txt, trainable=True)
        else:
            prompts = ckpt_in.restore_prompts()
            if prompts is None:
                raise ValueError("finetune requires a checkpoint that carries prompt tensors")

    echo = {"run": cfg.to_json(), "stage": stage, "train_stage": train_cfg.to_json()}
    trainer = Trainer(model, train_cfg, prompts=prompts, config_echo=echo)
    ckpt = trainer.train(train_samples, val_samples, thresholds=cfg.eval.thresholds)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.ckpt"
    ckpt.save(ckpt_path)
    _write_metrics_csv(trainer.history, out_dir / "metrics.csv")
    save_loss_curve(trainer.history, out_dir / "loss_curve.png")

    _emit(
        {
            "command": "train",
            "stage": stage,
            "steps": trainer.global_step,
            "checkpoint": str(ckpt_path),
            "final": trainer.history[-1],
            "config": cfg.to_json(),
        }
    )
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    if "run" not in ckpt.config:
        raise ValueError("checkpoint lacks an embedded run config")
    cfg = config_from_dict(ckpt.config["run"])
    model = ckpt.restore_model(cfg.model)
    prompts = ckpt.restore_prompts()

    dataset = load_dataset(args.data)
    samples = load_split(dataset, args.split, cfg.pipeline)
    report = evaluate(
        model, samples, prompts=prompts, thresholds=args.thresholds, strict=args.strict_iou
    )
    doc = {
        "command": "eval",
        "ckpt": str(args.ckpt),
        "data": str(args.data),
        "split": args.split,
        "stage": ckpt.stage,
        "report": report.to_json(),
        "config": cfg.to_json(),
    }
    _emit(doc)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        write_per_sample_csv(report, out_dir / "per_sample.csv")
        save_accuracy_bars(report.to_json(), out_dir / "accuracy.png")
        save_tiou_histogram(report.per_sample, out_dir / "tiou_hist.png")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    cfg = _load_run_config(args.config)
    b = cfg.bench
    bench_cfg = BenchConfig(
        n_frames=b.n_frames,
        canvas=b.canvas,
        reps=args.reps if args.reps is not None else b.reps,
        warmup=b.warmup,
        seed=b.seed,
        channels=b.channels,
    )
    report = run_bench(bench_cfg)
    doc = {"command": "bench", "report": report.to_json()}
    _emit(doc)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "bench.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        save_bench_bars(report.to_json(), out_dir / "bench.png")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tvp",
        description="Desk-scale 2D temporal video grounding with text-visual prompts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic grounding dataset")
    p.add_argument("--config", help="run config JSON (defaults used when omitted)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one stage (base, prompt, finetune)")
    p.add_argument("--stage", required=True, choices=("base", "prompt", "finetune"))
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--init-ckpt", help="checkpoint to start from (prompt/finetune)")
    p.add_argument("--out", required=True, help="output directory for checkpoint/metrics/figures")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--threads", type=int, help="sample-parallel workers (1 = strict determinism)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--thresholds", type=_parse_thresholds, default=(0.3, 0.5, 0.7))
    p.add_argument("--strict-iou", type=_parse_bool, default=True,
                   help="count a hit only when tIoU is strictly greater than the threshold")
    p.add_argument("--out-dir", help="also write report.json, per_sample.csv and figures here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="2D vs 3D encoder FLOP and wall-clock comparison")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--reps", type=int, help="override timing repetitions")
    p.add_argument("--out-dir", help="also write bench.json and bench.png here")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TrainingDiverged) as exc:
        log.error("%s", exc)
        return 1
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
