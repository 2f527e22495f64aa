"""Command-line entry point.

Subcommands cover manifest validation, synthetic corpus generation, trial
list generation, training, scoring, evaluation, fairness breakdowns, and a
config-driven end-to-end experiment runner. Every command is deterministic
given its config and seed; the runner writes per-stage completion markers so
an interrupted run resumes without recomputing finished work.

Exit codes: 0 success, 1 validation or job failure, 2 usage/configuration or
I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import catalog as cat
from . import evaluation as ev
from . import protocol as proto
from . import scoring as sc
from .embedder import (
    AdjacencyGraph,
    EmbedderConfig,
    EmbedderParams,
    GraphEncoderConfig,
    load_adjacency,
    load_checkpoint,
    save_checkpoint,
)
from .feature_store import (
    FeatureKind,
    FeatureSequence,
    FeatureStore,
    FeatureStoreWriter,
    import_frames_csv,
    open_store,
)
from .synthbench import synth_corpus
from .training import TrainHyper, TrainingDiverged, train

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

WORKERS_ENV = "AVATARPRINT_WORKERS"


class ConfigError(ValueError):
    pass


def _sanitize(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", name)


# -- declarative config ------------------------------------------------------


@dataclass
class ModelSpec:
    name: str
    store: Path
    embedder: dict
    hyper: TrainHyper
    adjacency: Path | None


@dataclass
class RunConfig:
    seed: int
    run_id: str
    output_root: Path
    identities: Path
    videos: Path
    split: Path | None
    eval_fraction: float
    convention: str
    models: list[ModelSpec]
    fusion_enabled: bool
    fusion_zscore: bool
    experiments: list[proto.ExperimentSpec]

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        base = path.parent

        def resolve(p: str | None) -> Path | None:
            return None if p is None else (base / p).resolve()

        for key in ("seed", "identities", "videos", "models"):
            if key not in raw:
                raise ConfigError(f"config is missing required key {key!r}")
        models = []
        for m in raw["models"]:
            if "name" not in m or "store" not in m:
                raise ConfigError("each model needs a name and a store path")
            models.append(
                ModelSpec(
                    name=m["name"],
                    store=resolve(m["store"]),
                    embedder=dict(m.get("embedder", {})),
                    hyper=TrainHyper(**m.get("hyper", {})),
                    adjacency=resolve(m.get("adjacency")),
                )
            )
        names = [m.name for m in models]
        if len(set(names)) != len(names):
            raise ConfigError("model names must be unique")
        fusion = raw.get("fusion", {})
        return cls(
            seed=int(raw["seed"]),
            run_id=str(raw.get("run_id", "run")),
            output_root=resolve(raw.get("output_root", "runs")),
            identities=resolve(raw["identities"]),
            videos=resolve(raw["videos"]),
            split=resolve(raw.get("split")),
            eval_fraction=float(raw.get("eval_fraction", 0.3)),
            convention=raw.get("convention", proto.EXCLUDE_IDENTICAL),
            models=models,
            fusion_enabled=bool(fusion.get("enabled", True)),
            fusion_zscore=bool(fusion.get("zscore", False)),
            experiments=[
                proto.ExperimentSpec.from_dict(e) for e in raw.get("experiments", [])
            ],
        )

    def effective(self) -> dict:
        return {
            "seed": self.seed,
            "run_id": self.run_id,
            "output_root": str(self.output_root),
            "identities": str(self.identities),
            "videos": str(self.videos),
            "split": None if self.split is None else str(self.split),
            "eval_fraction": self.eval_fraction,
            "convention": self.convention,
            "fusion": {"enabled": self.fusion_enabled, "zscore": self.fusion_zscore},
            "models": [
                {
                    "name": m.name,
                    "store": str(m.store),
                    "embedder": m.embedder,
                    "adjacency": None if m.adjacency is None else str(m.adjacency),
                    "hyper": {
                        "lr": m.hyper.lr,
                        "batch": m.hyper.batch,
                        "epochs": m.hyper.epochs,
                        "margin": m.hyper.margin,
                        "mining": m.hyper.mining,
                        "windows_per_identity": m.hyper.windows_per_identity,
                    },
                }
                for m in self.models
            ],
            "experiments": [e.to_dict() for e in self.experiments],
        }


def _embedder_config(
    spec: ModelSpec, store: FeatureStore, seed: int
) -> tuple[EmbedderConfig, AdjacencyGraph | None]:
    opts = dict(spec.embedder)
    graph_opts = opts.pop("graph", None)
    graph = None
    graph_cfg = None
    if graph_opts:
        if spec.adjacency is None:
            raise ConfigError(f"model {spec.name}: graph encoder needs an adjacency file")
        graph = load_adjacency(spec.adjacency, num_nodes=store.dimension // 2)
        graph_cfg = GraphEncoderConfig(
            layers=int(graph_opts.get("layers", 1)),
            hidden_dim=int(graph_opts.get("hidden_dim", 32)),
            adjacency=str(spec.adjacency),
        )
    config = EmbedderConfig(
        input_dim=store.dimension,
        heads=int(opts.get("heads", 4)),
        attention_dim=int(opts.get("attention_dim", 64)),
        projection_dim=int(opts.get("projection_dim", 16)),
        window_len=int(opts.get("window_len", 32)),
        graph=graph_cfg,
        seed=seed,
    )
    return config, graph


# -- helpers -------------------------------------------------------------------


def _done_path(path: Path) -> Path:
    return path.with_name(path.name + ".done")


def _is_done(path: Path) -> bool:
    return path.exists() and _done_path(path).exists()


def _mark_done(path: Path) -> None:
    _done_path(path).write_text("done\n", encoding="utf-8")


def _workers(args: argparse.Namespace) -> int:
    if getattr(args, "workers", None):
        return max(1, args.workers)
    env = os.environ.get(WORKERS_ENV)
    return max(1, int(env)) if env else 1


def _parse_generators(text: str) -> list[cat.Generator]:
    return [cat.Generator(g.strip()) for g in text.split(",") if g.strip()]


def _parse_frames(text: str) -> int | tuple[int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        return parts[0]
    if len(parts) == 2:
        return (parts[0], parts[1])
    raise ConfigError(f"bad frame spec {text!r}; use N or LO,HI")


# -- subcommands -----------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    catalog = cat.load_manifest(args.identities, args.videos)
    expected = cat.canonical_count_table(args.profile)
    report = cat.validate_counts(catalog, expected)
    for line in report.lines():
        print(line)
    if report.passed:
        print("all counts match")
        return EXIT_OK
    print(f"{len(report.failures())} count cells differ")
    return EXIT_FAIL


def cmd_synth(args: argparse.Namespace) -> int:
    corpus = synth_corpus(
        out_dir=args.out,
        n_identities=args.identities_n,
        videos_per_id=args.videos_per_id,
        frames=_parse_frames(args.frames),
        dim=args.dim,
        seed=args.seed,
        dataset=cat.Dataset(args.dataset),
        generators=_parse_generators(args.generators),
        noise_sigma=args.noise,
        targets_per_driver=args.targets_per_driver,
        clips_per_driver=args.clips_per_driver,
        eval_fraction=args.eval_fraction,
    )
    n_self = sum(1 for _ in corpus.catalog.videos(reenactment="self"))
    n_cross = sum(1 for _ in corpus.catalog.videos(reenactment="cross"))
    print(
        f"wrote {len(corpus.catalog)} videos ({n_self} self, {n_cross} cross), "
        f"{len(corpus.catalog.identities)} identities to {corpus.root}"
    )
    print(
        f"split: {len(corpus.split.development)} development / "
        f"{len(corpus.split.evaluation)} evaluation identities"
    )
    return EXIT_OK


def cmd_trials(args: argparse.Namespace) -> int:
    catalog = cat.load_manifest(args.identities, args.videos)
    if args.split:
        split = proto.load_split(args.split)
        split.validate(catalog)
    else:
        split = proto.make_split(catalog, eval_fraction=args.eval_fraction, seed=args.seed)
    trials = proto.generate_trials(catalog, split, args.convention)
    proto.save_trials(trials, args.out)
    if args.split_out:
        proto.save_split(split, args.split_out)
    for (dataset, generator, label), count in sorted(proto.trial_counts(trials).items()):
        kind = "genuine " if label == 1 else "impostor"
        print(f"{dataset:8s} {generator:4s} {kind} {count:>9,d}")
    print(f"wrote {len(trials):,d} trials to {args.out}")
    return EXIT_OK


def _train_one(
    config: RunConfig,
    spec: ModelSpec,
    catalog: cat.Catalog,
    split: proto.Split,
    train_dataset: str,
    train_generator: str,
    out_path: Path,
) -> None:
    store = open_store(spec.store)
    emb_config, graph = _embedder_config(spec, store, config.seed)
    generators = (
        None
        if train_generator == proto.ALL_GENERATORS
        else [cat.Generator(train_generator)]
    )
    view = catalog.filter(datasets=[cat.Dataset(train_dataset)], generators=generators)
    params, log = train(
        store, view, split.development, emb_config, spec.hyper, graph=graph
    )
    save_checkpoint(params, out_path)
    log_path = out_path.with_suffix(".log.json")
    with open(log_path, "w", encoding="utf-8") as fh:
        json.dump(log.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(args: argparse.Namespace) -> int:
    config = RunConfig.from_file(args.config)
    catalog = cat.load_manifest(config.identities, config.videos)
    split = _resolve_split(config, catalog, None)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chosen = [m for m in config.models if args.model in (None, m.name)]
    if not chosen:
        raise ConfigError(f"no model named {args.model!r} in config")
    for spec in chosen:
        target = out_dir / (
            f"{_sanitize(spec.name)}_{_sanitize(args.train_dataset)}_"
            f"{_sanitize(args.train_generator)}.avck"
        )
        _train_one(config, spec, catalog, split, args.train_dataset,
                   args.train_generator, target)
        print(f"trained {spec.name} on {args.train_dataset}/{args.train_generator} "
              f"-> {target}")
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    config = RunConfig.from_file(args.config)
    trials = proto.load_trials(args.trials)
    if args.eval_dataset:
        trials = [t for t in trials if t.dataset == args.eval_dataset]
    if args.eval_generator:
        trials = [t for t in trials if t.generator == args.eval_generator]
    models: dict[str, tuple[EmbedderParams, FeatureStore]] = {}
    for pair in args.checkpoint:
        name, _, ckpt = pair.partition("=")
        if not ckpt:
            raise ConfigError(f"--checkpoint wants NAME=PATH, got {pair!r}")
        spec = next((m for m in config.models if m.name == name), None)
        if spec is None:
            raise ConfigError(f"no model named {name!r} in config")
        models[name] = (load_checkpoint(ckpt), open_store(spec.store))
    table = sc.score_trials(
        models, trials, include_fusion=config.fusion_enabled,
        zscore_fusion=config.fusion_zscore,
    )
    sc.write_score_table(table, args.out)
    if table.missing_videos:
        print(f"missing features for {len(table.missing_videos)} videos", file=sys.stderr)
    if table.unscorable_trials:
        print(f"{len(table.unscorable_trials)} trials unscorable (too short)",
              file=sys.stderr)
    print(f"wrote {len(table.rows):,d} score rows to {args.out}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    table = sc.read_score_table(args.scores)
    condition = args.condition or Path(args.scores).stem
    reports = ev.evaluate_rows(table.rows, condition)
    if not reports:
        print("no scored trials with both classes present", file=sys.stderr)
        return EXIT_FAIL
    print(ev.render_report_text(reports), end="")
    if args.out_dir:
        out_dir = Path(args.out_dir)
        ev.write_report_csv(reports, out_dir / "report.csv")
        for report in reports:
            rows = [r for r in table.rows if r.model == report.model and r.score is not None]
            genuine = np.array([r.score for r in rows if r.label == 1])
            impostor = np.array([r.score for r in rows if r.label == 0])
            ev.write_roc_csv(
                genuine, impostor,
                out_dir / f"roc_{_sanitize(condition)}_{_sanitize(report.model)}.csv",
            )
    return EXIT_OK


def cmd_fairness(args: argparse.Namespace) -> int:
    catalog = cat.load_manifest(args.identities, args.videos)
    table = sc.read_score_table(args.scores)
    report = ev.fairness_report(table.rows, catalog)
    print(ev.render_fairness_text(report), end="")
    if args.out:
        condition = args.condition or Path(args.scores).stem
        ev.write_fairness_csv(report, condition, args.out)
    return EXIT_OK


def cmd_import_features(args: argparse.Namespace) -> int:
    writer = FeatureStoreWriter(args.store, FeatureKind(args.kind), args.dim)
    for csv_path in args.files:
        frames = import_frames_csv(csv_path)
        video_id = Path(csv_path).stem
        writer.put(FeatureSequence(video_id, FeatureKind(args.kind), frames, args.fps))
    store = writer.seal()
    print(f"imported {len(store)} sequences into {args.store}")
    return EXIT_OK


# -- the end-to-end runner ----------------------------------------------------


def _resolve_split(
    config: RunConfig, catalog: cat.Catalog, save_to: Path | None
) -> proto.Split:
    if config.split is not None:
        split = proto.load_split(config.split)
        split.validate(catalog)
    else:
        split = proto.make_split(
            catalog, eval_fraction=config.eval_fraction, seed=config.seed
        )
    if save_to is not None:
        proto.save_split(split, save_to)
    return split


def _job_models(job: proto.Job, config: RunConfig) -> list[str]:
    return list(job.models) if job.models else [m.name for m in config.models]


def _reference_condition(job: proto.Job) -> str:
    """Condition whose absolute AUC anchors this job's delta.

    A concrete training condition is compared against itself evaluated
    in-condition; union-trained jobs are compared against the in-condition
    model of their evaluation condition.
    """
    if job.train_generator == proto.ALL_GENERATORS:
        ds, gen = job.eval_dataset, job.eval_generator
    else:
        ds, gen = job.train_dataset, job.train_generator
    return f"{ds}/{gen}->{ds}/{gen}"


def cmd_run(args: argparse.Namespace) -> int:
    config = RunConfig.from_file(args.config)
    if args.run_id:
        config.run_id = args.run_id
    if args.seed is not None:
        config.seed = args.seed
    if not config.experiments:
        raise ConfigError("config has no experiments to run")

    run_dir = config.output_root / _sanitize(config.run_id)
    for sub in ("config", "split", "trials", "models", "scores", "reports"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)

    with open(run_dir / "config" / "effective.json", "w", encoding="utf-8") as fh:
        json.dump(config.effective(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    catalog = cat.load_manifest(config.identities, config.videos)
    split = _resolve_split(config, catalog, run_dir / "split" / "split.json")

    trials_path = run_dir / "trials" / "trials.csv"
    if args.fresh or not _is_done(trials_path):
        trials = proto.generate_trials(catalog, split, config.convention)
        proto.save_trials(trials, trials_path)
        _mark_done(trials_path)
    else:
        trials = proto.load_trials(trials_path)
    print(f"{len(trials):,d} trials")

    jobs = proto.experiment_matrix(config.experiments, catalog)
    specs_by_name = {m.name: m for m in config.models}
    failures: list[str] = []
    workers = _workers(args)

    # phase 1: one checkpoint per (model, training condition)
    train_tasks: dict[tuple[str, str, str], Path] = {}
    for job in jobs:
        for name in _job_models(job, config):
            if name not in specs_by_name:
                raise ConfigError(f"job {job.job_id} references unknown model {name!r}")
            key = (name, job.train_dataset, job.train_generator)
            train_tasks.setdefault(
                key,
                run_dir / "models" / (
                    f"{_sanitize(name)}_{_sanitize(job.train_dataset)}_"
                    f"{_sanitize(job.train_generator)}.avck"
                ),
            )

    def run_training(key: tuple[str, str, str]) -> str | None:
        name, ds, gen = key
        out_path = train_tasks[key]
        if not args.fresh and _is_done(out_path):
            return None
        try:
            _train_one(config, specs_by_name[name], catalog, split, ds, gen, out_path)
            _mark_done(out_path)
            return None
        except TrainingDiverged as exc:
            save_checkpoint(exc.params, out_path.with_suffix(".diverged.avck"))
            return f"train {name} on {ds}/{gen}: {exc}"
        except Exception as exc:  # job isolation: one failure must not sink the run
            return f"train {name} on {ds}/{gen}: {exc}"

    ordered_keys = sorted(train_tasks)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_training, ordered_keys))
    else:
        results = [run_training(k) for k in ordered_keys]
    failures.extend(r for r in results if r)
    print(f"{len(train_tasks)} training conditions done")

    failed_train = {
        k for k, r in zip(ordered_keys, results) if r
    }

    # phase 2: score each job with its training condition's checkpoints
    def run_scoring(job: proto.Job) -> str | None:
        score_path = run_dir / "scores" / f"{_sanitize(job.job_id)}.csv"
        if not args.fresh and _is_done(score_path):
            return None
        try:
            models: dict[str, tuple[EmbedderParams, FeatureStore]] = {}
            for name in _job_models(job, config):
                key = (name, job.train_dataset, job.train_generator)
                if key in failed_train:
                    return f"score {job.job_id}: training failed for {name}"
                spec = specs_by_name[name]
                models[name] = (load_checkpoint(train_tasks[key]), open_store(spec.store))
            job_trials = [
                t
                for t in trials
                if t.dataset == job.eval_dataset and t.generator == job.eval_generator
            ]
            if not job_trials:
                return f"score {job.job_id}: no trials for {job.eval_dataset}/{job.eval_generator}"
            table = sc.score_trials(
                models, job_trials, include_fusion=config.fusion_enabled,
                zscore_fusion=config.fusion_zscore,
            )
            sc.write_score_table(table, score_path)
            _mark_done(score_path)
            return None
        except Exception as exc:
            return f"score {job.job_id}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_scoring, jobs))
    else:
        results = [run_scoring(j) for j in jobs]
    failures.extend(r for r in results if r)
    failed_jobs = {j.job_id for j, r in zip(jobs, results) if r}
    print(f"{len(jobs) - len(failed_jobs)}/{len(jobs)} jobs scored")

    # phase 3: reports, deltas, fairness
    all_reports: list[ev.EvalReport] = []
    for job in jobs:
        if job.job_id in failed_jobs:
            continue
        score_path = run_dir / "scores" / f"{_sanitize(job.job_id)}.csv"
        table = sc.read_score_table(score_path)
        reports = ev.evaluate_rows(table.rows, job.condition)
        all_reports.extend(reports)
        fair = ev.fairness_report(table.rows, catalog)
        ev.write_fairness_csv(
            fair, job.condition,
            run_dir / "reports" / f"fairness_{_sanitize(job.job_id)}.csv",
        )
        for report in reports:
            rows = [r for r in table.rows if r.model == report.model and r.score is not None]
            genuine = np.array([r.score for r in rows if r.label == 1])
            impostor = np.array([r.score for r in rows if r.label == 0])
            ev.write_roc_csv(
                genuine, impostor,
                run_dir / "reports" / (
                    f"roc_{_sanitize(job.job_id)}_{_sanitize(report.model)}.csv"
                ),
            )

    if all_reports:
        ev.write_report_csv(all_reports, run_dir / "reports" / "report.csv")
        (run_dir / "reports" / "report.txt").write_text(
            ev.render_report_text(all_reports), encoding="utf-8"
        )
        by_reference: dict[str, list[proto.Job]] = {}
        conditions = {r.condition for r in all_reports}
        for job in jobs:
            if job.job_id in failed_jobs:
                continue
            ref = _reference_condition(job)
            if ref in conditions:
                by_reference.setdefault(ref, []).append(job)
        for ref, ref_jobs in sorted(by_reference.items()):
            selected = [r for r in all_reports
                        if r.condition in {j.condition for j in ref_jobs} | {ref}]
            try:
                table = ev.delta_table(selected, ref)
            except ev.EvaluationError:
                continue
            name = _sanitize(ref)
            (run_dir / "reports" / f"delta_{name}.txt").write_text(
                ev.render_delta_text(table), encoding="utf-8"
            )

    if failures:
        summary = run_dir / "reports" / "failures.txt"
        summary.write_text("\n".join(failures) + "\n", encoding="utf-8")
        for failure in failures:
            print(f"FAILED: {failure}", file=sys.stderr)
        return EXIT_FAIL
    print(f"reports in {run_dir / 'reports'}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avatarprint",
        description="Verification engine and benchmark harness for avatar fingerprinting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a manifest against the published counts")
    p.add_argument("--identities", required=True)
    p.add_argument("--videos", required=True)
    p.add_argument("--profile", choices=["full", "development", "evaluation"],
                   default="full")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("synth", help="generate a synthetic benchmark corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--identities-n", type=int, default=20)
    p.add_argument("--videos-per-id", type=int, default=10)
    p.add_argument("--frames", default="64,100", help="frame count N or range LO,HI")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", default=cat.Dataset.CREMA_D.value,
                   choices=[d.value for d in cat.Dataset])
    p.add_argument("--generators", default=cat.Generator.GAGA.value,
                   help="comma-separated generator names")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--targets-per-driver", type=int, default=4)
    p.add_argument("--clips-per-driver", type=int, default=2)
    p.add_argument("--eval-fraction", type=float, default=0.3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("trials", help="write the exhaustive trial list")
    p.add_argument("--identities", required=True)
    p.add_argument("--videos", required=True)
    p.add_argument("--split", help="existing split.json; derived when omitted")
    p.add_argument("--split-out", help="where to write the split used")
    p.add_argument("--eval-fraction", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--convention", default=proto.EXCLUDE_IDENTICAL,
                   choices=[proto.EXCLUDE_IDENTICAL, proto.INCLUDE_IDENTICAL])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trials)

    p = sub.add_parser("train", help="train configured models")
    p.add_argument("--config", required=True)
    p.add_argument("--model", help="train only this model")
    p.add_argument("--train-dataset", default=cat.Dataset.CREMA_D.value)
    p.add_argument("--train-generator", default=proto.ALL_GENERATORS)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score a trial list with trained checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--checkpoint", action="append", required=True,
                   metavar="NAME=PATH")
    p.add_argument("--eval-dataset")
    p.add_argument("--eval-generator")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="AUC report from a score table")
    p.add_argument("--scores", required=True)
    p.add_argument("--condition")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fairness", help="subgroup AUC breakdown from a score table")
    p.add_argument("--scores", required=True)
    p.add_argument("--identities", required=True)
    p.add_argument("--videos", required=True)
    p.add_argument("--condition")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fairness)

    p = sub.add_parser("run", help="execute the full experiment matrix from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--run-id")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int,
                   help=f"parallel jobs (default ${WORKERS_ENV} or 1)")
    p.add_argument("--fresh", action="store_true",
                   help="ignore completion markers and recompute everything")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("import-features", help="build a store from per-video CSV files")
    p.add_argument("--store", required=True)
    p.add_argument("--kind", default=FeatureKind.EMBEDDING.value,
                   choices=[k.value for k in FeatureKind])
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_import_features)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
