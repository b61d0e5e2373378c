"""Command-line entry point: ``projplan <command> [flags]``.

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .classifier import TaskClassifier, load_classifier, save_classifier, train_classifier
from .data import (PlanArrays, SyntheticConfig, generate_synthetic, group_by_horizon, read_records, split,
                   windows_for, write_records)
from .denoiser import load_denoiser, save_denoiser
from .evaluation import EvalReport, evaluate_plans, format_predictions, miou, read_predictions
from .pipeline import (PipelineConfig, inference_tasks, predict_plans, run_directory, run_pipeline, score,
                       score_distribution, seed_from_env, write_manifest)
from .sampling import SamplerConfig
from .training import (PRESETS, TrainConfig, joint_train, make_layout, make_model, train_endpoint_model,
                       train_interior)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def str_list(text: str) -> tuple[str, ...]:
    return tuple(v for v in text.split(",") if v)


# -- flag groups -------------------------------------------------------------------------------

SYNTH_FLAGS = {
    "n_tasks": int, "n_actions": int, "subset_size": int, "concentration": float, "branching": int,
    "obs_dim": int, "obs_noise": float, "task_offset": float, "videos_per_task": int, "min_actions": int,
    "max_actions": int,
}

TRAIN_FLAGS = {
    "N": (int, "diffusion steps"), "steps": (int, "training steps"), "batch_size": (int, None),
    "warmup": (int, "linear warmup steps"), "lr": (float, "peak learning rate"),
    "milestones": (int_list, "comma-separated lr decay steps"), "decay": (float, "lr factor per milestone"),
    "w": (float, "loss weight on a_1 and a_T"), "horizons": (int_list, "comma-separated horizons"),
    "task_cond": (str, "none | concat | mask"), "horizon_cond": (str, "none | concat | moe"),
    "cfg_dropout": (float, "condition dropout probability"), "variant": (str, "unet3 | unet_attn2 | transformer12"),
    "scale": (str, "desk | full"), "moe_routing": (str, "direct | learned"),
}
TRAIN_RENAMES = {"task_cond": "task_mode", "horizon_cond": "horizon_mode", "cfg_dropout": "cfg_dropout_p"}

SAMPLER_FLAGS = {
    "method": (str, "ddpm | ddim"), "ddim_steps": (int, None), "eta": (float, None),
    "baseline": (str, "none | deterministic | noise"), "chunk": (int, "queries per sampling batch"),
}


def flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_run_args(p):
    p.add_argument("--run-dir", help="output directory (default: <runs-root>/<timestamp>-<config hash>)")
    p.add_argument("--runs-root", default="runs")
    p.add_argument("--seed", type=int, default=0, help="overridden by the PDPP_SEED environment variable")


def add_train_args(p):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    for name, (typ, help_) in TRAIN_FLAGS.items():
        p.add_argument(flag(name), type=typ, default=None, help=help_)
    p.add_argument("--model-config", help="JSON object of denoiser overrides, e.g. '{\"widths\": [32, 64]}'")


def add_sampler_args(p):
    for name, (typ, help_) in SAMPLER_FLAGS.items():
        p.add_argument(flag(name), type=typ, default=None, help=help_)


def train_config(args) -> TrainConfig:
    d = dict(PRESETS[args.preset]) if args.preset else {}
    if args.config:
        d.update(json.loads(Path(args.config).read_text()))
    for name in TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            d[TRAIN_RENAMES.get(name, name)] = value
    if args.model_config:
        d["model"] = json.loads(args.model_config)
    d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def sampler_config(args, seed: int) -> SamplerConfig:
    d = {name: getattr(args, name) for name in SAMPLER_FLAGS if getattr(args, name) is not None}
    return SamplerConfig(seed=seed, **d)


def open_run(args, command: str, config: dict) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return run_directory(args.runs_root, {"command": command, **config})


# -- commands ------------------------------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    cfg = SyntheticConfig(seed=args.seed, **{k: getattr(args, k) for k in SYNTH_FLAGS if getattr(args, k) is not None})
    config = {"synthetic": asdict(cfg), "horizons": list(args.horizons), "split_ratio": args.split_ratio}
    out = open_run(args, "gen-data", config)
    corpus = generate_synthetic(cfg)
    train_v, test_v = split(corpus.videos, args.split_ratio, args.seed)
    meta = corpus.metadata()
    train_r, test_r = windows_for(train_v, args.horizons), windows_for(test_v, args.horizons)
    write_records(out / "train.pdpp", train_r, meta)
    write_records(out / "test.pdpp", test_r, meta)
    metrics = {"train_videos": len(train_v), "test_videos": len(test_v), "train_records": len(train_r),
               "test_records": len(test_r)}
    print(f"wrote {len(train_r)} train and {len(test_r)} test records to {out}")
    return dict(out=out, config=config, outputs={"train_data": "train.pdpp", "test_data": "test.pdpp"},
                metrics=metrics)


def load_arrays(path, horizon: int | None = None) -> tuple[dict[int, PlanArrays], dict, list]:
    records, meta = read_records(path)
    if not records:
        raise ValueError(f"{path} holds no records")
    if horizon is not None:
        records = [r for r in records if r.horizon == horizon]
        if not records:
            raise ValueError(f"{path} has no records with horizon {horizon}")
    return group_by_horizon(records), meta, records


def cmd_train_classifier(args) -> dict:
    sets, meta, records = load_arrays(args.data, args.horizon)
    config = {"data": str(args.data), "epochs": args.epochs, "lr": args.lr, "hidden": args.hidden,
              "batch_size": args.batch_size, "seed": args.seed}
    out = open_run(args, "train-classifier", config)
    clf = TaskClassifier(meta["obs_dim"], meta["n_tasks"], np.random.default_rng([args.seed, 3]), args.hidden)
    heldout = None
    if args.heldout:
        _, _, held = load_arrays(args.heldout, args.horizon)
        heldout = (np.stack([r.obs_start for r in held]), np.stack([r.obs_goal for r in held]),
                   [r.task for r in held])
    res = train_classifier(clf, np.stack([r.obs_start for r in records]), np.stack([r.obs_goal for r in records]),
                           [r.task for r in records], args.epochs, args.lr, args.batch_size, args.seed, heldout)
    save_classifier(out / "classifier.ckpt", clf)
    metrics = {"train_accuracy": res.train_accuracy, "heldout_accuracy": res.heldout_accuracy,
               "final_loss": res.epoch_losses[-1] if res.epoch_losses else res.initial_loss}
    print(" ".join(f"{k}={v}" for k, v in metrics.items()))
    return dict(out=out, config=config, outputs={"classifier": "classifier.ckpt"}, metrics=metrics)


def cmd_train(args) -> dict:
    cfg = train_config(args)
    sets, meta, _ = load_arrays(args.data)
    if args.horizons is None and args.config is None and args.preset is None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "horizons": sorted(sets)})
    if args.vpa:
        if cfg.task_mode == "none":
            raise ValueError("VPA mode conditions on the task label; task conditioning cannot be 'none'")
        for s in sets.values():
            s.obs_goal = np.zeros_like(s.obs_goal)
    config = {**cfg.to_dict(), "data": str(args.data), "interior": args.interior, "vpa": args.vpa}
    out = open_run(args, "train", config)
    layout = make_layout(cfg, meta["n_actions"], meta["obs_dim"], meta["n_tasks"])
    model = make_model(cfg, layout, meta["task_actions"])
    def log(step, loss):
        if args.log_every and step % args.log_every == 0:
            print(f"step {step} loss {loss:.5f}")
    if args.interior:
        if len(cfg.horizons) != 1:
            raise ValueError("interior (two-stage) models are trained per horizon")
        res = train_interior(model, sets[cfg.horizons[0]], cfg, meta["task_actions"], log)
    else:
        res = joint_train(model, sets, cfg, meta["task_actions"], log)
    save_denoiser(out / "model.ckpt", model, {"N": cfg.N, "train": cfg.to_dict(), "vpa": args.vpa,
                                              "interior": args.interior})
    metrics = {"final_loss": res.losses[-1] if res.losses else None, "parameters": model.num_parameters(),
               "seconds": round(res.seconds, 2)}
    print(" ".join(f"{k}={v}" for k, v in metrics.items()))
    return dict(out=out, config=config, outputs={"model": "model.ckpt"}, metrics=metrics)


def cmd_train_endpoint(args) -> dict:
    cfg = train_config(args)
    sets, meta, _ = load_arrays(args.data, args.horizon)
    T = args.horizon or max(sets)
    config = {**cfg.to_dict(), "data": str(args.data), "horizon": T}
    out = open_run(args, "train-endpoint", config)
    model, res = train_endpoint_model(sets[T], cfg, meta["n_actions"], meta["obs_dim"], meta["n_tasks"],
                                      meta["task_actions"])
    save_denoiser(out / "endpoint.ckpt", model, {"N": cfg.N, "train": cfg.to_dict(), "source_horizon": T})
    metrics = {"final_loss": res.losses[-1] if res.losses else None, "parameters": model.num_parameters()}
    print(" ".join(f"{k}={v}" for k, v in metrics.items()))
    return dict(out=out, config=config, outputs={"endpoint_model": "endpoint.ckpt"}, metrics=metrics)


def _load_for_sampling(args):
    model, mmeta = load_denoiser(args.model)
    endpoint, emeta = (None, None)
    if getattr(args, "endpoint_model", None):
        endpoint, emeta = load_denoiser(args.endpoint_model)
    clf = None
    if getattr(args, "classifier", None) and not (args.gt_task or args.vpa):
        clf, _ = load_classifier(args.classifier)
    return model, mmeta, endpoint, emeta, clf


def _predict_all(model, mmeta, endpoint, emeta, clf, sets, scfg, args, seed):
    results = {}
    for T, data in sorted(sets.items()):
        if T not in model.layout.horizons:
            continue
        tasks = inference_tasks(data, clf, args.gt_task or args.vpa)
        plans = predict_plans(model, data, scfg, seed, tasks, mmeta["N"], args.vpa, endpoint,
                              emeta["N"] if emeta else None)
        results[T] = (tasks, plans)
    if not results:
        raise ValueError(f"model supports horizons {model.layout.horizons}; data has {sorted(sets)}")
    return results


def _query_ids(records) -> dict[int, list[int]]:
    ids: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        ids.setdefault(r.horizon, []).append(i)
    return ids


def cmd_sample(args) -> dict:
    seed = args.seed
    scfg = sampler_config(args, seed)
    if args.cfg_lambda is not None:
        scfg.cfg_lambda = args.cfg_lambda
    scfg.validate()
    sets, _, records = load_arrays(args.data, args.horizon)
    config = {"sampler": asdict(scfg), "model": str(args.model), "data": str(args.data),
              "classifier": args.classifier, "endpoint_model": args.endpoint_model, "gt_task": args.gt_task,
              "vpa": args.vpa, "horizon": args.horizon}
    out = open_run(args, "sample", config)
    model, mmeta, endpoint, emeta, clf = _load_for_sampling(args)
    results = _predict_all(model, mmeta, endpoint, emeta, clf, sets, scfg, args, seed)
    qids = _query_ids(records)
    text = "".join(format_predictions(qids[T], tasks, plans) for T, (tasks, plans) in sorted(results.items()))
    target = Path(args.out) if args.out else out / "predictions.tsv"
    target.write_text(text)
    if args.print:
        sys.stdout.write(text)
    print(f"wrote {sum(len(p) for _, p in results.values())} plans to {target}")
    return dict(out=out, config=config, outputs={"predictions": str(target)},
                metrics={"plans": sum(len(p) for _, p in results.values())})


def score_prediction_file(data_path, preds_path, batch_size: int) -> EvalReport:
    records, _ = read_records(data_path)
    rows = read_predictions(preds_path)
    by_T: dict[int, tuple[list, list]] = {}
    for qid, _, plan in rows:
        if not 0 <= qid < len(records):
            raise ValueError(f"query id {qid} outside dataset of {len(records)} records")
        gt = records[qid].actions
        preds, gts = by_T.setdefault(len(gt), ([], []))
        preds.append(plan)
        gts.append(gt)
    report = EvalReport()
    for T, (preds, gts) in sorted(by_T.items()):
        evaluate_plans(report, T, preds, gts)
        if batch_size != 1:
            report.horizons[T]["mIoU"] = miou(preds, gts, batch_size)
    report.extra["miou_batch_size"] = batch_size
    return report


def cmd_eval(args) -> dict:
    if args.batch_size < 1:
        raise UsageError("--batch-size must be >= 1")
    config = {"data": str(args.data), "preds": str(args.preds), "batch_size": args.batch_size}
    out = open_run(args, "eval", config)
    report = score_prediction_file(args.data, args.preds, args.batch_size)
    text = report.to_text()
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    return dict(out=out, config=config, outputs={"report": "report.txt"}, metrics=report.headline())


def cmd_sweep(args) -> dict:
    seed = args.seed
    base = sampler_config(args, seed)
    sets, meta, _ = load_arrays(args.data, args.horizon)
    config = {"sampler": asdict(base), "model": args.model, "data": str(args.data),
              "cfg_lambda": list(args.cfg_lambda or ()), "baselines": list(args.baselines or ()),
              "task_conds": list(args.task_conds or ()), "seeds": args.seeds,
              "prob_samples": args.prob_samples, "prob_groups": args.prob_groups}
    out = open_run(args, "sweep", config)
    seeds = [seed + i for i in range(args.seeds)]
    reports: dict[str, EvalReport] = {}

    def run(label, model, mmeta, clf, scfg):
        report = EvalReport(seeds=seeds)
        for T, data in sorted(sets.items()):
            if T not in model.layout.horizons:
                continue
            tasks = inference_tasks(data, clf, args.gt_task or args.vpa)
            per_seed = [predict_plans(model, data, SamplerConfig(**{**asdict(scfg), "seed": s}), s, tasks,
                                      mmeta["N"], args.vpa) for s in seeds]
            score(report, T, per_seed, data.actions)
            if args.prob_samples:
                score_distribution(report, model, data, scfg, seed, tasks, mmeta["N"], args.prob_samples,
                                   args.vpa, args.prob_groups)
        report.extra["setting"] = label
        reports[label] = report
        print(f"# {label}")
        sys.stdout.write(report.to_text())

    if args.task_conds:
        if not args.train_data:
            raise UsageError("--task-conds needs --train-data to train one model per conditioning mode")
        tsets, tmeta, _ = load_arrays(args.train_data)
        for mode in args.task_conds:
            cfg = train_config(args)
            cfg = TrainConfig.from_dict({**cfg.to_dict(), "task_mode": mode,
                                         "horizons": sorted(set(tsets) & set(sets))})
            layout = make_layout(cfg, tmeta["n_actions"], tmeta["obs_dim"], tmeta["n_tasks"])
            model = make_model(cfg, layout, tmeta["task_actions"])
            joint_train(model, {T: tsets[T] for T in cfg.horizons}, cfg, tmeta["task_actions"])
            save_denoiser(out / f"model-{mode}.ckpt", model, {"N": cfg.N, "train": cfg.to_dict()})
            run(f"task_cond={mode}", model, {"N": cfg.N}, None, base)
    if args.model:
        model, mmeta = load_denoiser(args.model)
        clf = load_classifier(args.classifier)[0] if args.classifier and not (args.gt_task or args.vpa) else None
        for lam in args.cfg_lambda or ():
            scfg = SamplerConfig(**{**asdict(base), "cfg_lambda": lam})
            run(f"cfg_lambda={lam:g}", model, mmeta, clf, scfg)
        for mode in args.baselines or ():
            scfg = SamplerConfig(**{**asdict(base), "baseline": mode})
            run(f"baseline={mode}", model, mmeta, clf, scfg)
    if not reports:
        raise UsageError("sweep needs --model with --cfg-lambda/--baselines, or --task-conds with --train-data")
    outputs = {}
    for label, report in reports.items():
        name = "report-" + label.replace("=", "-") + ".txt"
        (out / name).write_text(report.to_text())
        outputs[label] = name
    return dict(out=out, config=config, outputs=outputs,
                metrics={label: r.headline() for label, r in reports.items()})


def cmd_pipeline(args) -> dict:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = PipelineConfig.from_dict(d)
    overrides = {"vpa": args.vpa or cfg.vpa, "gt_task": args.gt_task or cfg.gt_task,
                 "two_stage": args.two_stage or cfg.two_stage}
    cfg = PipelineConfig.from_dict({**cfg.to_dict(), **overrides})
    if args.steps is not None:
        cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), "steps": args.steps})
    cfg = cfg.seeded(args.seed)
    out = open_run(args, "pipeline", cfg.to_dict())
    result = run_pipeline(cfg, out, log=print)
    sys.stdout.write(result.report.to_text())
    return dict(out=out, config=cfg.to_dict(), outputs=result.manifest["outputs"],
                metrics=result.report.headline(), manifest_written=True)


# -- parser --------------------------------------------------------------------------------------

def build_parser() -> Parser:
    parser = Parser(prog="projplan", description="Projected diffusion procedure planning")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus and its train/test windows")
    add_run_args(p)
    for name, typ in SYNTH_FLAGS.items():
        p.add_argument(flag(name), type=typ, default=None)
    p.add_argument("--horizons", type=int_list, default=(3,))
    p.add_argument("--split-ratio", type=float, default=0.7)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-classifier", help="train the task classifier")
    add_run_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--heldout")
    p.add_argument("--horizon", type=int)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("train", help="train a diffusion planner (joint when several horizons are given)")
    add_run_args(p)
    add_train_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--interior", action="store_true", help="two-stage interior model (endpoints as conditions)")
    p.add_argument("--vpa", action="store_true", help="zero the goal observation; the task label is the goal")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-endpoint", help="train the (a_1, a_T) model for two-stage planning")
    add_run_args(p)
    add_train_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int)
    p.set_defaults(func=cmd_train_endpoint)

    def inference_flags(p):
        p.add_argument("--model", required=p.prog.endswith("sample"))
        p.add_argument("--data", required=True)
        p.add_argument("--classifier")
        p.add_argument("--gt-task", action="store_true", help="condition on ground-truth task labels")
        p.add_argument("--vpa", action="store_true", help="zero the goal observation and use ground-truth tasks")
        p.add_argument("--horizon", type=int)
        add_sampler_args(p)

    p = sub.add_parser("sample", help="sample plans; writes query_id TAB task_id TAB a_1,...,a_T")
    add_run_args(p)
    inference_flags(p)
    p.add_argument("--endpoint-model")
    p.add_argument("--cfg-lambda", type=float)
    p.add_argument("--out")
    p.add_argument("--print", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a prediction file against a dataset")
    add_run_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--batch-size", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="guidance-scale, baseline and conditioning ablations")
    add_run_args(p)
    inference_flags(p)
    add_train_args(p)
    p.add_argument("--cfg-lambda", type=float_list)
    p.add_argument("--baselines", type=str_list)
    p.add_argument("--task-conds", type=str_list)
    p.add_argument("--train-data")
    p.add_argument("--seeds", type=int, default=3, help="sampling seeds per setting")
    p.add_argument("--prob-samples", type=int, default=0,
                   help="plans sampled per query group for NLL/KL/ModePrec/ModeRec (0 disables)")
    p.add_argument("--prob-groups", type=int, help="score only the first this-many query groups per horizon")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pipeline", help="gen-data, train-classifier, train, sample and eval in one run")
    add_run_args(p)
    p.add_argument("--config", help="JSON PipelineConfig")
    p.add_argument("--steps", type=int)
    p.add_argument("--vpa", action="store_true")
    p.add_argument("--gt-task", action="store_true")
    p.add_argument("--two-stage", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        args.seed = seed_from_env(args.seed)
        t0 = time.perf_counter()
        result = args.func(args)
        if not result.get("manifest_written"):
            write_manifest(result["out"] / "manifest.json", args.command, result["config"], args.seed,
                           result["outputs"], result["metrics"], time.perf_counter() - t0)
        return 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, FloatingPointError, json.JSONDecodeError) as exc:
        print(f"projplan: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
