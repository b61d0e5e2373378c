"""End-to-end runs: data -> task classifier -> diffusion model -> sampling -> evaluation."""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import TaskClassifier, classify_task, save_classifier, train_classifier
from .data import PlanArrays, SyntheticConfig, generate_synthetic, group_by_horizon, split, windows_for, write_records
from .denoiser import Denoiser, save_denoiser
from .evaluation import EvalReport, mean_accuracy, miou, prob_metrics, query_groups, success_rate
from .sampling import SamplerConfig, run_chain, sample_many, two_stage_plan
from .schedule import cosine_schedule
from .training import (TrainConfig, joint_train, make_layout, make_model, train_endpoint_model, train_interior)


def code_version_hash(version: str = __version__) -> str:
    """Content hash of the version string in git's blob format."""
    blob = version.encode()
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:12]


def write_manifest(path, command: str, config: dict, seed: int, outputs: dict, metrics: dict,
                   wall_seconds: float) -> dict:
    manifest = {"command": command, "config": config, "config_hash": config_hash(config), "seed": seed,
                "code_version": __version__, "code_version_hash": code_version_hash(),
                "wall_clock_seconds": round(wall_seconds, 3), "outputs": outputs, "metrics": metrics}
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return manifest


def run_directory(root, config: dict) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(root) / f"{stamp}-{config_hash(config)}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def seed_from_env(seed: int) -> int:
    value = os.environ.get("PDPP_SEED")
    return int(value) if value not in (None, "") else seed


# -- inference helpers ---------------------------------------------------------------------------

def inference_tasks(data: PlanArrays, classifier: TaskClassifier | None, gt_task: bool) -> np.ndarray:
    """Task condition per query: ground truth, classifier prediction, or -1 (none)."""
    if gt_task:
        return data.tasks.copy()
    if classifier is None:
        return np.full(len(data), -1, dtype=np.int64)
    return classify_task(classifier, data.obs_start, data.obs_goal)[1]


def predict_plans(model: Denoiser, data: PlanArrays, scfg: SamplerConfig, seed: int, tasks: np.ndarray,
                  N: int, vpa: bool = False, endpoint_model: Denoiser | None = None,
                  endpoint_N: int | None = None) -> np.ndarray:
    """One plan per query of ``data``; two-stage when ``endpoint_model`` is given."""
    sched = cosine_schedule(N)
    esched = cosine_schedule(endpoint_N or N)
    if model.layout.task_mode == "none":
        tasks = np.full(len(data), -1, dtype=np.int64)
    cond = data.conditions(task=tasks, vpa=vpa)
    rng = np.random.default_rng(seed)
    out = []
    for start in range(0, len(data), scfg.chunk):
        part = cond.take(np.arange(start, min(start + scfg.chunk, len(data))))
        if endpoint_model is None:
            out.append(run_chain(model, part, sched, scfg, rng).plans)
        else:
            out.append(two_stage_plan(endpoint_model, model, part, sched, scfg, rng, endpoint_sched=esched).plans)
    return np.concatenate(out, axis=0)


def score(report: EvalReport, T: int, plans_per_seed: list[np.ndarray], gts: np.ndarray) -> EvalReport:
    """Per-horizon metrics averaged over sampling seeds."""
    srs = [success_rate(p, gts) for p in plans_per_seed]
    maccs = [mean_accuracy(p, gts) for p in plans_per_seed]
    mious = [miou(p, gts, 1) for p in plans_per_seed]
    report.add_horizon(T, float(np.mean(srs)), float(np.mean(maccs)), float(np.mean(mious)), len(gts))
    return report


def score_distribution(report: EvalReport, model: Denoiser, data: PlanArrays, scfg: SamplerConfig, seed: int,
                       tasks: np.ndarray, N: int, count: int, vpa: bool = False,
                       max_groups: int | None = None) -> EvalReport:
    """Sample ``count`` plans per query group and add NLL, KL and mode metrics for this horizon."""
    groups = query_groups(data.keys, [tuple(p) for p in data.actions])
    if max_groups is not None:
        groups = groups[:max_groups]
    idx = np.array([g.query_index for g in groups])
    if model.layout.task_mode == "none":
        tasks = np.full(len(data), -1, dtype=np.int64)
    cond = data.conditions(idx, task=np.asarray(tasks)[idx], vpa=vpa)
    sampled = sample_many(model, cond, count, cosine_schedule(N), scfg, np.random.default_rng(seed))
    report.add_prob(data.horizon, prob_metrics(groups, sampled), count)
    return report


# -- end-to-end ----------------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    split_ratio: float = 0.7
    classifier_epochs: int = 30
    classifier_lr: float = 1e-3
    classifier_hidden: int = 128
    two_stage: bool = False
    vpa: bool = False
    gt_task: bool = False
    sample_seeds: int = 3
    seed: int = 0

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["data"] = asdict(self.data)
        d["train"] = self.train.to_dict()
        d["sampler"] = asdict(self.sampler)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pipeline config fields: {sorted(unknown)}")
        data = SyntheticConfig(**d.pop("data", {}))
        train = TrainConfig.from_dict(d.pop("train", {}))
        sampler = SamplerConfig(**d.pop("sampler", {}))
        return cls(data, train, sampler, **d)

    def seeded(self, seed: int) -> "PipelineConfig":
        """Same config with every stage seeded from ``seed``."""
        d = self.to_dict()
        d["seed"] = seed
        d["data"]["seed"] = seed
        d["train"]["seed"] = seed
        d["sampler"]["seed"] = seed
        return PipelineConfig.from_dict(d)


@dataclass
class PipelineResult:
    report: EvalReport
    out_dir: Path
    manifest: dict
    classifier_accuracy: float | None = None


def run_pipeline(cfg: PipelineConfig, out_dir, log=None) -> PipelineResult:
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    say = log or (lambda msg: None)

    corpus = generate_synthetic(cfg.data)
    train_videos, test_videos = split(corpus.videos, cfg.split_ratio, cfg.seed)
    horizons = cfg.train.horizons
    train_records = windows_for(train_videos, horizons)
    test_records = windows_for(test_videos, horizons)
    meta = corpus.metadata()
    write_records(out / "train.pdpp", train_records, meta)
    write_records(out / "test.pdpp", test_records, meta)
    train_sets, test_sets = group_by_horizon(train_records), group_by_horizon(test_records)
    say(f"data: {len(train_records)} train / {len(test_records)} test windows")

    outputs = {"train_data": "train.pdpp", "test_data": "test.pdpp"}
    clf, clf_acc = None, None
    needs_classifier = cfg.train.task_mode != "none" and not (cfg.gt_task or cfg.vpa)
    if needs_classifier:
        tr = [r for r in train_records if r.horizon == horizons[0]]
        te = test_sets[horizons[0]]
        clf = TaskClassifier(corpus.obs_dim, corpus.n_tasks, np.random.default_rng([cfg.seed, 3]),
                             cfg.classifier_hidden)
        res = train_classifier(clf, np.stack([r.obs_start for r in tr]), np.stack([r.obs_goal for r in tr]),
                               [r.task for r in tr], cfg.classifier_epochs, cfg.classifier_lr, seed=cfg.seed,
                               heldout=(te.obs_start, te.obs_goal, te.tasks))
        clf_acc = res.heldout_accuracy
        save_classifier(out / "classifier.ckpt", clf)
        outputs["classifier"] = "classifier.ckpt"
        say(f"classifier: train acc {res.train_accuracy:.3f}, held-out acc {clf_acc:.3f}")

    if cfg.vpa:
        for s in train_sets.values():
            s.obs_goal = np.zeros_like(s.obs_goal)
    layout = make_layout(cfg.train, corpus.n_actions, corpus.obs_dim, corpus.n_tasks)
    model = make_model(cfg.train, layout, corpus.task_actions)
    endpoint_model = None
    if cfg.two_stage:
        if len(horizons) != 1:
            raise ValueError("two-stage planning is trained per horizon; give a single horizon")
        train_interior(model, train_sets[horizons[0]], cfg.train, corpus.task_actions)
        endpoint_model, _ = train_endpoint_model(train_sets[horizons[0]], cfg.train, corpus.n_actions,
                                                 corpus.obs_dim, corpus.n_tasks, corpus.task_actions)
        save_denoiser(out / "endpoint.ckpt", endpoint_model, {"N": cfg.train.N})
        outputs["endpoint_model"] = "endpoint.ckpt"
    else:
        joint_train(model, {T: train_sets[T] for T in horizons}, cfg.train, corpus.task_actions)
    save_denoiser(out / "model.ckpt", model, {"N": cfg.train.N, "train": cfg.train.to_dict()})
    outputs["model"] = "model.ckpt"
    say("diffusion model trained")

    report = EvalReport(seeds=[cfg.sampler.seed + i for i in range(cfg.sample_seeds)])
    lines = []
    for T in horizons:
        data = test_sets[T]
        tasks = inference_tasks(data, clf, cfg.gt_task or cfg.vpa)
        per_seed = [predict_plans(model, data, cfg.sampler, s, tasks, cfg.train.N, cfg.vpa,
                                  endpoint_model)
                    for s in report.seeds]
        score(report, T, per_seed, data.actions)
        lines.append((T, tasks, per_seed[0]))
    if clf_acc is not None:
        report.extra["classifier_heldout_accuracy"] = round(100 * clf_acc, 4)
    with open(out / "predictions.tsv", "w") as fh:
        offset = 0
        for T, tasks, plans in lines:
            for i, (t, p) in enumerate(zip(tasks, plans)):
                fh.write(f"{offset + i}\t{int(t)}\t{','.join(str(int(a)) for a in p)}\n")
            offset += len(plans)
    (out / "report.txt").write_text(report.to_text())
    outputs.update({"predictions": "predictions.tsv", "report": "report.txt"})
    manifest = write_manifest(out / "manifest.json", "pipeline", cfg.to_dict(), cfg.seed, outputs,
                              report.headline(), time.perf_counter() - t0)
    return PipelineResult(report, out, manifest, clf_acc)
