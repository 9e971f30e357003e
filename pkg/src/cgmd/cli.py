"""Command-line pipeline: gen, graph, smooth, impute, train, cv, ablate.

Stage commands (graph, smooth, impute, train) work on one fold and pass
state to the next stage through lossless ``.npz`` files in
``<out>/fold_<i>/``.  They also write the inspectable export formats
(graph text, float32 sidecars, prior manifests).  Running the four stages
in order reproduces the ``cv`` artifacts for that fold byte for byte.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import trainer
from .config import ConfigError, apply_pairs, format_config, parse_value, read_pairs
from .graph import KnnGraph, build_knn_graph, symmetrize, write_graph
from .prior import PriorSet, write_priors
from .student import write_checkpoint
from .synth import SynthConfig, generate, oracle_auc, write_cohorts
from .tabular import RawCohortFile, load_cohort, write_ids, write_matrix
from .trainer import CVResult, TrainConfig

log = logging.getLogger("cgmd")

COMMANDS = ("gen", "graph", "smooth", "impute", "train", "cv", "ablate")
STAGES = ("graph", "smooth", "impute", "train")

TABLE_COLUMNS = (("AUC", "auc"), ("AUPRC", "auprc"), ("Sens", "sensitivity"), ("Spec", "specificity"), ("F1", "f1"))


class StageError(RuntimeError):
    pass


# -- ablation table ------------------------------------------------------------


def emit_ablation_table(results: Sequence[tuple[str, dict[str, tuple[float, float]]]]) -> str:
    """Aligned ``Method | AUC | AUPRC | Sens | Spec | F1`` table of mean±std cells.

    ``results`` pairs a row name with an aggregate (metric -> (mean, std));
    rows keep the given order.
    """
    if not results:
        raise ValueError("need at least one result")
    header = ["Method"] + [label for label, _ in TABLE_COLUMNS]
    rows = [
        [name] + [f"{agg[key][0]:.3f}±{agg[key][1]:.3f}" for _, key in TABLE_COLUMNS]
        for name, agg in results
    ]
    widths = [max(len(r[j]) for r in [header] + rows) for j in range(len(header))]

    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip() + "\n"

    return line(header) + "".join(line(r) for r in rows)


def parse_ablation_table(text: str) -> list[tuple[str, dict[str, tuple[float, float]]]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    out = []
    for ln in lines[1:]:
        cells = ln.split()
        n = len(TABLE_COLUMNS)
        name, values = " ".join(cells[:-n]), cells[-n:]
        agg = {}
        for (_, key), cell in zip(TABLE_COLUMNS, values):
            mean, std = cell.split("±")
            agg[key] = (float(mean), float(std))
        out.append((name, agg))
    return out


# -- argument handling ------------------------------------------------------------


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_overrides(parser: argparse.ArgumentParser, cls) -> None:
    group = parser.add_argument_group(f"{cls.__name__} overrides")
    for name, kind in cls.field_types().items():
        if name == "seed":
            continue
        group.add_argument(_flag(name), dest=f"override_{name}", metavar=kind.__name__.upper(), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgmd", description="Clinical-graph distillation pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    gen = sub.add_parser("gen", help="write a synthetic MRI + fundus cohort pair")
    gen.add_argument("--out", required=True, type=Path)
    gen.add_argument("--config", type=Path)
    gen.add_argument("--seed", type=int)
    _add_overrides(gen, SynthConfig)

    helps = {
        "graph": "build the MRI biomarker graph and the fold-train fundus graph",
        "smooth": "smooth teacher embeddings over the MRI graph",
        "impute": "impute teacher priors for fold-train fundus patients",
        "train": "train the student on one fold and evaluate it",
        "cv": "run stratified cross-validation",
        "ablate": "run the module and prior-construction ablations",
    }
    for name in COMMANDS[1:]:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--data", required=True, type=Path, help="directory with mri.csv, fundus.csv and schemas")
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        if name in STAGES:
            p.add_argument("--fold", type=int, default=0)
        else:
            p.add_argument("--jobs", type=int, default=1)
        _add_overrides(p, TrainConfig)
    return parser


def _resolve_config(args: argparse.Namespace, cls):
    cfg = cls()
    if args.config is not None:
        cfg = apply_pairs(cfg, read_pairs(args.config))
    types = cls.field_types()
    updates = {}
    for name, kind in types.items():
        raw = getattr(args, f"override_{name}", None)
        if raw is not None:
            updates[name] = parse_value(raw, kind)
    if args.seed is not None:
        updates["seed"] = args.seed
    try:
        return replace(cfg, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# -- helpers -------------------------------------------------------------------------


def _load_data(data: Path) -> tuple[RawCohortFile, RawCohortFile]:
    mri = load_cohort(data / "mri.csv", data / "mri_schema.csv")
    fundus = load_cohort(data / "fundus.csv", data / "fundus_schema.csv")
    return mri, fundus


def _split(fundus: RawCohortFile, cfg: TrainConfig, fold: int) -> trainer.FoldSplit:
    splits = trainer.stratified_kfold(fundus.labels, cfg.n_folds, cfg.seed, ids=fundus.ids)
    if not 0 <= fold < len(splits):
        raise ConfigError(f"--fold must lie in [0, {len(splits)})")
    return splits[fold]


def _graph_arrays(prefix: str, g: KnnGraph) -> dict[str, np.ndarray]:
    return {
        f"{prefix}_indices": g.indices,
        f"{prefix}_distances": g.distances,
        f"{prefix}_raw_weights": g.raw_weights,
        f"{prefix}_weights": g.weights,
        f"{prefix}_meta": np.array([g.k, g.n_targets, int(g.bipartite), int(g.directed)]),
        f"{prefix}_sigma": np.array(g.sigma),
    }


def _graph_from(npz, prefix: str) -> KnnGraph:
    k, n_targets, bipartite, directed = (int(v) for v in npz[f"{prefix}_meta"])
    return KnnGraph(
        indices=npz[f"{prefix}_indices"],
        distances=npz[f"{prefix}_distances"],
        raw_weights=npz[f"{prefix}_raw_weights"],
        weights=npz[f"{prefix}_weights"],
        k=k,
        sigma=float(npz[f"{prefix}_sigma"]),
        n_targets=n_targets,
        bipartite=bool(bipartite),
        directed=bool(directed),
    )


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {path.name}; run `cgmd {stage}` for this fold first")
    return path


def _write_fold_outputs(fold_dir: Path, fit: trainer.FitResult) -> None:
    fold_dir.mkdir(parents=True, exist_ok=True)
    (fold_dir / "report.txt").write_text(trainer.format_fold_report(fit.eval), encoding="utf-8")
    write_checkpoint(fold_dir / "student", fit.params)


def _write_cv(out: Path, result: CVResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for outcome in result.folds:
        _write_fold_outputs(out / f"fold_{outcome.split.fold_id}", outcome.fit)
    (out / "aggregate.txt").write_text(trainer.format_aggregate(result.aggregate), encoding="utf-8")


def _slug(name: str) -> str:
    return "".join(ch.lower() if ch.isalnum() else "_" for ch in name).strip("_").replace("__", "_")


# -- commands ------------------------------------------------------------------------


def cmd_gen(args) -> None:
    cfg = _resolve_config(args, SynthConfig)
    cohorts = generate(cfg)
    write_cohorts(args.out, cohorts)
    (args.out / "synth_config.txt").write_text(format_config(cfg), encoding="utf-8")
    log.info("gen: wrote %d MRI and %d fundus patients to %s", len(cohorts.mri), len(cohorts.fundus), args.out)
    log.info("gen: oracle fundus AUC %.4f", oracle_auc(cohorts))


def cmd_graph(args, cfg: TrainConfig) -> None:
    mri_raw, fundus_raw = _load_data(args.data)
    split = _split(fundus_raw, cfg, args.fold)
    data = trainer.preprocess_fold(mri_raw, fundus_raw, split, cfg)
    fold_dir = args.out / f"fold_{args.fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    mri_graph = trainer.teacher_graph(data.mri, cfg)
    k = min(cfg.k_fundus, len(data.train) - 1)
    fundus_graph = build_knn_graph(data.train.biomarkers, k, cfg.sigma)
    write_graph(fold_dir / "mri_graph.csv", mri_graph)
    write_graph(fold_dir / "fundus_graph.csv", fundus_graph)
    write_ids(fold_dir / "fundus_train.ids", data.train.ids)
    np.savez(fold_dir / "graphs.npz", **_graph_arrays("mri", mri_graph), **_graph_arrays("fundus", fundus_graph))
    log.info("graph: fold %d, %d MRI nodes, %d fundus train nodes", args.fold, mri_graph.n_nodes, fundus_graph.n_nodes)


def cmd_smooth(args, cfg: TrainConfig) -> None:
    mri_raw, fundus_raw = _load_data(args.data)
    split = _split(fundus_raw, cfg, args.fold)
    data = trainer.preprocess_fold(mri_raw, fundus_raw, split, cfg)
    fold_dir = args.out / f"fold_{args.fold}"
    with np.load(_require(fold_dir / "graphs.npz", "graph")) as npz:
        mri_graph = _graph_from(npz, "mri")
    smoothed = trainer.teacher_priors(data.mri, mri_graph, cfg)
    np.savez(fold_dir / "smoothed.npz", smoothed=smoothed)
    write_matrix(fold_dir / "smoothed.bin", smoothed)
    write_ids(fold_dir / "smoothed.ids", data.mri.ids)
    log.info("smooth: fold %d, alpha %g, smoothing %s", args.fold, cfg.alpha, "on" if cfg.smooth else "off")


def cmd_impute(args, cfg: TrainConfig) -> None:
    mri_raw, fundus_raw = _load_data(args.data)
    split = _split(fundus_raw, cfg, args.fold)
    data = trainer.preprocess_fold(mri_raw, fundus_raw, split, cfg)
    fold_dir = args.out / f"fold_{args.fold}"
    with np.load(_require(fold_dir / "smoothed.npz", "smooth")) as npz:
        smoothed = npz["smoothed"]
    priors = trainer.student_priors(data.mri, smoothed, data.train, cfg)
    lengths = np.array([len(n) for n in priors.neighbor_ids], dtype=int)
    flat = np.array([j for n in priors.neighbor_ids for j in n], dtype=int)
    np.savez(fold_dir / "priors.npz", priors=priors.priors, gated=priors.gated, lengths=lengths, neighbors=flat)
    write_priors(fold_dir / "priors", priors, data.train.ids, data.mri.ids)
    if cfg.prior_mode == "gated_knn":
        log.info("impute: fold %d, gated fallback rate %.3f", args.fold, priors.fallback_rate)
    else:
        log.info("impute: fold %d, prior mode %s", args.fold, cfg.prior_mode)


def cmd_train(args, cfg: TrainConfig) -> None:
    mri_raw, fundus_raw = _load_data(args.data)
    split = _split(fundus_raw, cfg, args.fold)
    data = trainer.preprocess_fold(mri_raw, fundus_raw, split, cfg)
    fold_dir = args.out / f"fold_{args.fold}"
    weights = cfg.weights
    priors = graph = None
    if weights.prior > 0 or weights.rel > 0:
        with np.load(_require(fold_dir / "priors.npz", "impute")) as npz:
            offsets = np.concatenate([[0], np.cumsum(npz["lengths"])])
            flat = npz["neighbors"]
            priors = PriorSet(
                priors=npz["priors"],
                gated=npz["gated"],
                neighbor_ids=[flat[a:b].tolist() for a, b in zip(offsets[:-1], offsets[1:])],
            )
    if weights.rel > 0:
        with np.load(_require(fold_dir / "graphs.npz", "graph")) as npz:
            graph = symmetrize(_graph_from(npz, "fundus"), use_normalized=cfg.rel_use_normalized)
    fit = trainer.fit_fold(data.train, priors, graph, cfg)
    fit.eval = trainer.evaluate_fit(fit, data.val)
    _write_fold_outputs(fold_dir, fit)
    log.info("train: fold %d, val AUC %.4f, threshold %.4f", args.fold, fit.eval.auc, fit.threshold)


def cmd_cv(args, cfg: TrainConfig) -> None:
    mri_raw, fundus_raw = _load_data(args.data)
    result = trainer.run_cv(mri_raw, fundus_raw, cfg, jobs=args.jobs)
    _write_cv(args.out, result)
    for outcome in result.folds:
        if outcome.fallback_rate is not None:
            log.info("cv: fold %d gated fallback rate %.3f", outcome.split.fold_id, outcome.fallback_rate)
    auc_mean, auc_std = result.aggregate["auc"]
    log.info("cv: AUC %.4f ± %.4f over %d folds", auc_mean, auc_std, len(result.folds))


def cmd_ablate(args, cfg: TrainConfig) -> None:
    mri_raw, fundus_raw = _load_data(args.data)
    results = trainer.run_ablation(mri_raw, fundus_raw, cfg, jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, res in results:
        (args.out / f"{_slug(name)}_aggregate.txt").write_text(
            trainer.format_aggregate(res.aggregate), encoding="utf-8"
        )
    table = emit_ablation_table([(name, res.aggregate) for name, res in results])
    (args.out / "ablation.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)


HANDLERS = {
    "graph": cmd_graph,
    "smooth": cmd_smooth,
    "impute": cmd_impute,
    "train": cmd_train,
    "cv": cmd_cv,
    "ablate": cmd_ablate,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        if args.command == "gen":
            cmd_gen(args)
        else:
            cfg = _resolve_config(args, TrainConfig)
            if getattr(args, "jobs", 1) < 1:
                raise ConfigError("--jobs must be >= 1")
            HANDLERS[args.command](args, cfg)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"cgmd: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for any stage failure
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"cgmd: {args.command} failed: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
