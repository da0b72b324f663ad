"""Command-line entry point: ``glarisk <command> [options]``.

Every option can also come from a TOML file given with ``--config``; keys
are option names (dashes or underscores), either at top level or in a table
named after the command.  Explicit command-line options win.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import scipy.sparse as sp

from . import __version__, atcvec, dataio, ensemble, hyperopt, pueval, synthgen
from .errors import ConfigError, DataError, GlaRiskError
from .featurize import FEATURE_SETS, FeatureBuilder, FeatureSpace
from .linsvm import LinearModel, SolverConfig
from .pipeline import LEARNERS, ExperimentPlan, FoldResult, oracle_evaluate, run_benchmark

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("glarisk")

WORKERS_ENV = "GLARISK_WORKERS"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _fmt(x) -> str:
    return f"{float(x):.6g}"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(p.iterdir()) if p.is_dir() else [p]
        for f in files:
            if f.is_file():
                out[str(f)] = _sha256(f)
    return out


def write_manifest(out_dir, args, started, inputs=(), seeds=None, extra=None) -> Path:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    manifest = {
        "command": args.command,
        "config": json.loads(json.dumps(config, default=str)),
        "seeds": seeds or {},
        "inputs": _hash_inputs(inputs),
        "tool_version": __version__,
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(path) -> Path:
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {d}: {exc}") from exc
    return d


def _load_dataset(path):
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"dataset directory {p} does not exist")
    return dataio.read_dataset(p)


def _beta(text) -> float:
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"beta must lie in [0, 1), got {text}")
    return v


def cmd_synth(args) -> int:
    hierarchy = atcvec.AtcHierarchy.from_csv(args.hierarchy) if args.hierarchy else None
    cfg = synthgen.GeneratorConfig(
        n_patients=args.n_patients, true_positive_fraction=args.true_positive_fraction,
        labeled_fraction=args.labeled_fraction, false_positive_rate=args.false_positive_rate,
        hierarchy=hierarchy, n_provisions=args.n_provisions, n_physicians=args.n_physicians,
        n_provision_clusters=args.n_provision_clusters, seed=args.seed, catalog_seed=args.catalog_seed,
        distractor_fraction=args.distractor_fraction, signal_slope=args.signal_slope,
    )
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    dataset, truth = synthgen.generate(cfg)
    out = _out_dir(args.out)
    synthgen.export(dataset, truth, out)
    write_manifest(out, args, started, [args.hierarchy] if args.hierarchy else (),
                   {"seed": args.seed, "catalog_seed": args.catalog_seed},
                   {"summary": {"n_patients": dataset.n_patients,
                                "known_positives": int(dataset.known_positive_mask().sum()),
                                "true_beta": truth.true_beta}})
    print(f"wrote {dataset.n_patients} patients to {out} "
          f"({int(dataset.known_positive_mask().sum())} known positive, true beta {_fmt(truth.true_beta)})")
    return EXIT_OK


def cmd_vectorize(args) -> int:
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    dataset = _load_dataset(args.data)
    builder = FeatureBuilder(dataset, threshold=args.similarity_threshold)
    X, space = builder.build(args.features)
    out = _out_dir(args.out)
    sp.save_npz(out / "features.npz", sp.csr_matrix(X), compressed=True)
    space.to_csv(out / "feature_manifest.csv")
    with open(out / "rows.csv", "w") as fh:
        fh.write("row,patient_id,known_positive\n")
        for i, (pid, kp) in enumerate(zip(builder.ids, dataset.known_positive_mask())):
            fh.write(f"{i},{pid},{int(kp)}\n")
    atc_scheme, prov_scheme = FEATURE_SETS[args.features]
    if atc_scheme:
        atcvec.write_feature_manifest(builder.hierarchy, atc_scheme, out / "atc_manifest.csv")
    if prov_scheme in ("struct", "both"):
        from .provec import write_similarity_coo
        write_similarity_coo(builder.similarity(), out / "similarity_coo.csv")
    write_manifest(out, args, started, [args.data])
    print(f"wrote {X.shape[0]} x {X.shape[1]} feature matrix to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    dataset = _load_dataset(args.data)
    builder = FeatureBuilder(dataset, threshold=args.similarity_threshold)
    X, space = builder.build(args.features)
    X = sp.csr_matrix(X)
    kp = dataset.known_positive_mask()
    solver = SolverConfig(args.tolerance, args.max_iterations, args.seed)
    X_pos, X_unl = X[kp], X[~kp]
    if args.learner == "cwsvm":
        model = ensemble.train_cwsvm(X_pos, X_unl, args.C_P, args.C_U, solver)
    elif args.learner == "bagging":
        model = ensemble.train_bagging(
            X_pos, X_unl, ensemble.BaggingConfig(args.n_models, args.n_U, args.C_U, args.seed), solver,
            args.workers)
    else:
        model = ensemble.train_resvm(
            X_pos, X_unl, ensemble.ResvmConfig(args.n_models, args.n_P, args.n_U, args.C_P, args.C_U, args.seed),
            solver, args.workers)
    out = _out_dir(args.out)
    (out / "model.json").write_text(model.to_json(space.manifest_hash()) + "\n")
    space.to_csv(out / "feature_manifest.csv")
    write_manifest(out, args, started, [args.data], {"seed": args.seed})
    print(f"wrote {args.learner} model over {space.dimension} features to {out / 'model.json'}")
    return EXIT_OK


def _resolve_choices(values, allowed, what) -> tuple:
    if values is None or values == ["all"] or values == "all":
        return tuple(allowed)
    if isinstance(values, str):
        values = [values]
    for v in values:
        if v not in allowed:
            raise ConfigError(f"unknown {what} {v!r}; choose from {list(allowed)}")
    return tuple(values)


def cmd_benchmark(args) -> int:
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    dataset = _load_dataset(args.data)
    plan = ExperimentPlan(
        feature_sets=_resolve_choices(args.features, FEATURE_SETS, "feature set"),
        learners=_resolve_choices(args.learners, LEARNERS, "learner"),
        beta_lo=args.beta_lo, beta_up=args.beta_up, outer_k=args.outer_k, inner_k=args.inner_k,
        inner_iterations=args.inner_iterations, swarm_size=args.swarm_size, generations=args.generations,
        n_models=args.n_models, seed=args.seed, paper_order=args.paper_order, workers=args.workers,
        tolerance=args.tolerance, max_iterations=args.max_iterations,
        similarity_threshold=args.similarity_threshold,
    )
    report = run_benchmark(plan, dataset)
    out = _out_dir(args.out)
    (out / "benchmark.tsv").write_text(report.to_tsv())
    folds_dir = _out_dir(out / "folds")
    utest_rows = []
    for row in report.rows:
        for f in row.folds:
            stem = f"{row.feature_set}__{row.learner}__fold{f.fold}"
            (folds_dir / f"{stem}.json").write_text(f.to_json() + "\n")
            if f.trace:
                names = list(f.trace[0].params)
                hyperopt.write_trace_csv(f.trace, names, folds_dir / f"{stem}__trace.csv")
            if f.utest is not None:
                utest_rows.append((f"{row.feature_set}/{row.learner}/{f.fold}", f.utest))
    pueval.write_utest_csv(utest_rows, out / "utest.csv")
    if args.oracle:
        truth = synthgen.load_ground_truth(args.data)
        if truth is None:
            log.warning("no ground truth in %s; oracle evaluation skipped", args.data)
        else:
            with open(out / "oracle.csv", "w") as fh:
                fh.write("feature_set,learner,fold,true_auc,auc_lower,auc_upper,bracketed\n")
                for row in report.rows:
                    for o in oracle_evaluate(row.folds, truth):
                        fh.write(f"{o['feature_set']},{o['learner']},{o['fold']},{_fmt(o['true_auc'])},"
                                 f"{_fmt(o['auc_lower'])},{_fmt(o['auc_upper'])},{int(o['bracketed'])}\n")
    write_manifest(out, args, started, [args.data], {"master_seed": args.seed})
    sys.stdout.write(report.to_tsv())
    if not report.complete:
        log.error("some benchmark folds failed; see the fold artifacts")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_curves(args) -> int:
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    if args.beta_lo > args.beta_up:
        raise ConfigError(f"--beta-lo {args.beta_lo} exceeds --beta-up {args.beta_up}")
    path = Path(args.artifact)
    if not path.is_file():
        raise ConfigError(f"fold artifact {path} does not exist")
    fold = FoldResult.from_json(path.read_text())
    if fold.test_scores is None:
        raise DataError(f"{path} holds no test ranking (fold error: {fold.error})")
    ranking = fold.ranking()
    out = _out_dir(args.out)
    for tag, beta in (("lower", args.beta_lo), ("upper", args.beta_up)):
        curve, _ = pueval.estimate_roc(ranking, beta)
        pueval.write_curve_csv(curve, ("fpr", "tpr"), out / f"roc_{tag}.csv")
        pueval.write_curve_csv(pueval.estimate_pr(ranking, beta), ("recall", "precision"), out / f"pr_{tag}.csv")
    bounds = pueval.roc_bounds(ranking, args.beta_lo, args.beta_up)
    write_manifest(out, args, started, [path], extra={
        "fold": fold.fold, "feature_set": fold.feature_set, "learner": fold.learner,
        "beta_lo": args.beta_lo, "beta_up": args.beta_up,
        "auc_lower": bounds.auc_lower, "auc_upper": bounds.auc_upper})
    print(f"AUC bounds {_fmt(bounds.auc_lower)} - {_fmt(bounds.auc_upper)}; curves in {out}")
    return EXIT_OK


def _load_model(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"model file {p} does not exist")
    d = json.loads(p.read_text())
    return ensemble.EnsembleModel.from_dict(d) if "base_models" in d else LinearModel.from_dict(d), d


def cmd_importance(args) -> int:
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    model, raw = _load_model(args.model)
    if not Path(args.manifest).is_file():
        raise ConfigError(f"manifest {args.manifest} does not exist")
    space = FeatureSpace.from_csv(args.manifest)
    if raw.get("manifest_hash") and raw["manifest_hash"] != space.manifest_hash():
        raise ConfigError("model and feature manifest do not match")
    items = ensemble.feature_importance(model, space, args.top_k, args.by_atc_group)
    out = Path(args.out)
    _out_dir(out.parent)
    ensemble.write_importance_csv(items, out)
    write_manifest(out.parent, args, started, [args.model, args.manifest])
    for rank, (name, coef) in enumerate(items[:10], start=1):
        print(f"{rank}\t{name}\t{_fmt(coef)}")
    return EXIT_OK


def _rank_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"ranks must be comma-separated numbers: {exc}") from exc


def cmd_utest(args) -> int:
    rows = []
    if args.artifacts:
        for path in args.artifacts:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"fold artifact {p} does not exist")
            f = FoldResult.from_json(p.read_text())
            if f.utest is None:
                raise DataError(f"{p} holds no U-test result")
            rows.append((f.fold, f.utest))
    elif args.train_ranks is not None and args.test_ranks is not None:
        rows.append((0, pueval.rank_overfit_test(_rank_list(args.train_ranks), _rank_list(args.test_ranks))))
    else:
        raise ConfigError("give fold artifacts or both --train-ranks and --test-ranks")
    if args.out:
        _out_dir(Path(args.out).parent)
        pueval.write_utest_csv(rows, args.out)
    print("fold,U,z,p")
    for fold, r in rows:
        print(f"{fold},{_fmt(r.U)},{_fmt(r.z)},{_fmt(r.p)}")
    return EXIT_OK


def _add_common(p, seed=True):
    p.add_argument("--config", help="TOML file supplying option values")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    if seed:
        p.add_argument("--seed", type=int, default=0)


def _add_solver(p):
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-iterations", type=int, default=10_000)
    p.add_argument("--workers", type=int, default=_default_workers(),
                   help=f"parallel workers (default from ${WORKERS_ENV}, else 1)")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="glarisk", description="PU-learning risk models for expenditure data")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-patients", type=int, default=10_000)
    p.add_argument("--true-positive-fraction", type=float, default=0.08)
    p.add_argument("--labeled-fraction", type=float, default=0.5)
    p.add_argument("--false-positive-rate", type=float, default=0.0)
    p.add_argument("--n-provisions", type=int, default=200)
    p.add_argument("--n-physicians", type=int, default=100)
    p.add_argument("--n-provision-clusters", type=int, default=8)
    p.add_argument("--distractor-fraction", type=float, default=0.05)
    p.add_argument("--signal-slope", type=float, default=1.0)
    p.add_argument("--catalog-seed", type=int, default=0)
    p.add_argument("--hierarchy", help="CSV of level-5 ATC codes (default: synthetic)")
    p.set_defaults(func=cmd_synth)
    subs["synth"] = p

    p = sub.add_parser("vectorize", help="build and scale one feature set")
    _add_common(p, seed=False)
    p.add_argument("--data", required=True)
    p.add_argument("--features", required=True, choices=list(FEATURE_SETS))
    p.add_argument("--similarity-threshold", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vectorize)
    subs["vectorize"] = p

    p = sub.add_parser("train", help="train one learner on the whole dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--features", required=True, choices=list(FEATURE_SETS))
    p.add_argument("--learner", required=True, choices=LEARNERS)
    p.add_argument("--C-P", dest="C_P", type=float, default=1.0)
    p.add_argument("--C-U", dest="C_U", type=float, default=1.0)
    p.add_argument("--n-P", dest="n_P", type=int, default=100)
    p.add_argument("--n-U", dest="n_U", type=int, default=500)
    p.add_argument("--n-models", type=int, default=50)
    p.add_argument("--similarity-threshold", type=float, default=0.05)
    p.add_argument("--out", required=True)
    _add_solver(p)
    p.set_defaults(func=cmd_train)
    subs["train"] = p

    p = sub.add_parser("benchmark", help="nested cross-validated benchmark matrix")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features", nargs="+", default=["all"])
    p.add_argument("--learners", "--learner", nargs="+", default=["all"])
    p.add_argument("--beta-lo", type=_beta, default=pueval.BETA_LO)
    p.add_argument("--beta-up", type=_beta, default=pueval.BETA_UP)
    p.add_argument("--outer-k", type=int, default=3)
    p.add_argument("--inner-k", type=int, default=10)
    p.add_argument("--inner-iterations", type=int, default=2)
    p.add_argument("--swarm-size", type=int, default=10)
    p.add_argument("--generations", type=int, default=10)
    p.add_argument("--n-models", type=int, default=50)
    p.add_argument("--similarity-threshold", type=float, default=0.05)
    p.add_argument("--paper-order", "--global-scaling", dest="paper_order", action="store_true",
                   help="fit scaling and provision similarity on the full dataset")
    p.add_argument("--oracle", action="store_true", help="compare bounds with ground_truth.csv if present")
    _add_solver(p)
    p.set_defaults(func=cmd_benchmark)
    subs["benchmark"] = p

    p = sub.add_parser("curves", help="ROC and PR curves of a fold artifact")
    _add_common(p, seed=False)
    p.add_argument("--artifact", required=True)
    p.add_argument("--beta-lo", type=_beta, default=pueval.BETA_LO)
    p.add_argument("--beta-up", type=_beta, default=pueval.BETA_UP)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curves)
    subs["curves"] = p

    p = sub.add_parser("importance", help="rank features by the mean hyperplane")
    _add_common(p, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--by-atc-group", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_importance)
    subs["importance"] = p

    p = sub.add_parser("utest", help="rank-distribution overfitting test")
    _add_common(p, seed=False)
    p.add_argument("--artifacts", nargs="*", default=[])
    p.add_argument("--train-ranks")
    p.add_argument("--test-ranks")
    p.add_argument("--out")
    p.set_defaults(func=cmd_utest)
    subs["utest"] = p
    return parser, subs


def load_config(path, command: str, valid: set[str]) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    section = raw.get(command, {})
    merged = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    if isinstance(section, dict):
        merged.update(section)
    out = {}
    for key, value in merged.items():
        dest = key.replace("-", "_")
        if dest not in valid:
            raise ConfigError(f"config key {key!r} is not an option of {command}")
        out[dest] = value
    return out


def _config_path(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def main(argv=None) -> int:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        command = next((a for a in argv if a in subs), None)
        cfg_path = _config_path(argv)
        if command and cfg_path:
            sub = subs[command]
            valid = {a.dest for a in sub._actions} - {"help", "config", "func"}
            values = load_config(cfg_path, command, valid)
            for action in sub._actions:
                if action.dest in values:
                    action.required = False
            sub.set_defaults(**values)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        logging.basicConfig(level=getattr(logging, args.log_level),
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GlaRiskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
