"""Command-line entry point: ``mammo-age <command> [options]``.

Options can also come from an INI-style ``--config`` file. A key is looked up
in the section named after the command, then in ``[paths]``, ``[forest]``,
``[eval]``, ``[imputation]`` and ``[extractor]``; flags on the command line
win. Exit codes: 0 ok, 1 usage, 2 input/format error, 3 fitting/runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FitError, InputError

log = logging.getLogger("mammo_age")

CONFIG_SECTIONS = ("paths", "forest", "eval", "imputation", "extractor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text) -> list[int]:
    return [int(t) for t in str(text).split(",") if t.strip()]


def _str_list(text) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "none") else int(text)


# dest -> (converter, default); values still None after parsing are filled
# from the config file, then from here.
_DEFAULTS = {
    "jobs": (int, 1),
    "min_age": (int, 18),
    "max_age": (int, 99),
    "min_dim": (int, 1),
    "max_dim": (int, 10000),
    "delay": (float, 0.5),
    "retries": (int, 3),
    "max_pages": (_opt_int, None),
    "extractor": (str, "baseline"),
    "model": (str, None),
    "output_name": (str, None),
    "standardize": (_bool, True),
    "grid": (int, 4),
    "bins": (int, 16),
    "batch_size": (int, 32),
    "trees": (int, 100),
    "mtry": (_opt_int, None),
    "min_leaf": (int, 5),
    "max_depth": (_opt_int, None),
    "bootstrap": (_bool, True),
    "seed": (int, 0),
    "balance": (_bool, True),
    "repeats": (int, 10),
    "train_frac": (float, 0.7),
    "group_by_case": (_bool, False),
    "strategy": (str, "mean"),
    "ks": (_int_list, None),
    "seeds": (int, 50),
    "family": (str, "logistic"),
    "outcome": (str, None),
    "age_col": (str, "age"),
    "id_col": (str, "id"),
    "covariates": (_str_list, None),
    "n": (int, 322),
    "n_cases": (int, 51),
    "missing": (int, 0),
}


def _add(p, *flags, **kw):
    kw.setdefault("default", None)
    p.add_argument(*flags, **kw)


def _forest_opts(p):
    _add(p, "--trees", type=int, help="number of trees (default 100)")
    _add(p, "--mtry", type=int, help="features per split (default ceil(d/3))")
    _add(p, "--min-leaf", type=int, help="minimum samples per leaf (default 5)")
    _add(p, "--max-depth", type=int)
    _add(p, "--no-bootstrap", dest="bootstrap", action="store_const", const=False)
    _add(p, "--seed", type=int, help="random seed (default 0)")
    _add(p, "--no-balance", dest="balance", action="store_const", const=False,
         help="skip the equal-per-status sampling of known-age records")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mammo-age", description="Mammography age estimation pipeline.")
    parser.add_argument("--version", action="store_true", help="print versions and exit")
    parser.add_argument("--config", help="INI config file")
    _add(parser, "--jobs", type=int, help="worker processes; never changes results")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("crawl", help="download thumbnails and metadata")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--base-url")
    src.add_argument("--mirror", help="directory of recorded pages")
    p.add_argument("--out", required=True)
    _add(p, "--delay", type=float, help="seconds between requests (default 0.5)")
    _add(p, "--retries", type=int)
    _add(p, "--max-pages", type=int)
    p.add_argument("--report", help="write the crawl report as JSON")

    p = sub.add_parser("ingest", help="scan an image archive into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    _add(p, "--min-age", type=int)
    _add(p, "--max-age", type=int)
    _add(p, "--min-dim", type=int)
    _add(p, "--max-dim", type=int)
    p.add_argument("--ages", help="CSV with fileName and Age columns")

    p = sub.add_parser("summarize", help="per-status counts and age statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--histogram", help="write age,count CSV")
    p.add_argument("--json", help="write the summary as JSON")

    p = sub.add_parser("extract", help="compute a feature matrix for a manifest")
    p.add_argument("--manifest", required=True)
    _add(p, "--extractor", choices=["backbone", "baseline"])
    _add(p, "--model", help="ONNX backbone file")
    _add(p, "--output-name", help="backbone output node (default: first output)")
    _add(p, "--no-standardize", dest="standardize", action="store_const", const=False)
    _add(p, "--grid", type=int)
    _add(p, "--bins", type=int)
    _add(p, "--batch-size", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="fit a forest on manifest ages")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _forest_opts(p)

    p = sub.add_parser("eval", help="repeated seeded train/test evaluation")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    _add(p, "--repeats", type=int)
    _add(p, "--train-frac", type=float)
    _add(p, "--group-by-case", action="store_const", const=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scatter", help="write actual,predicted CSV for the last split")
    _forest_opts(p)

    p = sub.add_parser("predict", help="predict ages for every row of a feature file")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("impute", help="mean-substitution / model imputation experiment")
    _add(p, "--strategy", choices=["mean", "model"])
    p.add_argument("--table", required=True)
    _add(p, "--model", help="forest model (model strategy)")
    p.add_argument("--features", help="feature file keyed by --id-col (model strategy)")
    _add(p, "--ks", type=_int_list, help="comma-separated replacement counts")
    _add(p, "--seeds", type=int, help="number of seeds per k (default 50)")
    _add(p, "--seed", type=int, help="first seed (default 0)")
    _add(p, "--family", choices=["logistic", "linear"])
    _add(p, "--outcome")
    _add(p, "--age-col")
    _add(p, "--id-col")
    _add(p, "--covariates", type=_str_list,
         help="comma-separated design covariates (must include the age column)")
    p.add_argument("--out", required=True)
    p.add_argument("--imputed-out", help="model strategy: write the table with filled ages")

    p = sub.add_parser("analyze", help="fit one GLM with Wald tests")
    p.add_argument("--table", required=True)
    _add(p, "--family", choices=["logistic", "linear"])
    _add(p, "--outcome")
    _add(p, "--covariates", type=_str_list)
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-cohort", help="write a synthetic MIAS-like covariate table")
    _add(p, "--seed", type=int)
    _add(p, "--n", type=int)
    _add(p, "--n-cases", type=int)
    _add(p, "--missing", type=int, help="blank this many ages (imputation targets)")
    p.add_argument("--out", required=True)
    return parser


def _resolve(args, config: configparser.ConfigParser) -> None:
    for dest, (conv, default) in _DEFAULTS.items():
        if not hasattr(args, dest) or getattr(args, dest) is not None:
            continue
        value = default
        for section in (args.command, *CONFIG_SECTIONS):
            if config.has_option(section, dest):
                value = conv(config.get(section, dest))
                break
        setattr(args, dest, value)


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")


def _forest_params(args):
    from .forest import ForestParams

    return ForestParams(n_trees=args.trees, mtry=args.mtry, min_leaf=args.min_leaf,
                        max_depth=args.max_depth, bootstrap=args.bootstrap, seed=args.seed)


def _training_rows(args):
    """Known-age manifest records (balanced if requested) with matching features."""
    from .dataset import balanced_sample, load_manifest
    from .features import load_features

    _require(args.features, args.manifest)
    records = [r for r in load_manifest(args.manifest) if r.age is not None]
    if args.balance:
        records = balanced_sample(records, args.seed)
    fm = load_features(args.features).select([r.key for r in records])
    ages = np.array([r.age for r in records], dtype=float)
    return records, fm, ages


def cmd_crawl(args):
    from .crawl import CrawlOptions, crawl

    if not args.base_url and not args.mirror:
        raise UsageError("crawl: one of --base-url or --mirror is required")
    _require(args.mirror)
    opts = CrawlOptions(local_mirror=Path(args.mirror) if args.mirror else None, delay=args.delay,
                        retries=args.retries, max_pages=args.max_pages)
    report = crawl(args.base_url, args.out, opts)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    for url, reason in report.failures:
        log.warning("failed %s: %s", url, reason)
    return 0


def cmd_ingest(args):
    from .dataset import ingest, load_age_table

    _require(args.root, args.ages)
    table = load_age_table(args.ages) if args.ages else None
    kept, removed = ingest(args.root, args.out, min_age=args.min_age, max_age=args.max_age,
                           dim_range=(args.min_dim, args.max_dim), age_table=table)
    print(f"{len(kept)} records written to {args.out}; {len(removed)} age outliers removed")
    return 0


def cmd_summarize(args):
    from dataclasses import asdict

    from .dataset import load_manifest, summarize, write_histogram

    _require(args.manifest)
    s = summarize(load_manifest(args.manifest))
    print(s.format_table())
    if args.histogram:
        write_histogram(s, args.histogram)
    if args.json:
        data = {"rows": [asdict(r) for r in s.rows],
                "histogram": {str(k): v for k, v in s.histogram.items()}}
        Path(args.json).write_text(json.dumps(data, indent=2) + "\n")
    return 0


def cmd_extract(args):
    from .dataset import load_manifest, resolve_path
    from .features import ExtractorSpec, extract_paths, save_features

    _require(args.manifest, args.model)
    spec = ExtractorSpec(kind=args.extractor, model_path=args.model, standardize=args.standardize,
                         output_name=args.output_name, grid=args.grid, bins=args.bins,
                         batch_size=args.batch_size)
    records = load_manifest(args.manifest)
    items = [(str(resolve_path(r, args.manifest)), r.key) for r in records]
    fm = extract_paths(spec, items, jobs=args.jobs)
    save_features(fm, args.out)
    log.info("wrote %d x %d features (%s) to %s", fm.n, fm.d, fm.extractor_tag, args.out)
    return 0


def cmd_train(args):
    from .forest import fit_forest, save_model

    records, fm, ages = _training_rows(args)
    model = fit_forest(fm.X, ages, _forest_params(args), fm.extractor_tag, jobs=args.jobs)
    model.metadata = {"n_train": len(ages), "balanced": bool(args.balance)}
    save_model(model, args.out)
    log.info("trained %d trees on %d samples; OOB MAE %s", len(model.trees), len(ages),
             "n/a" if model.oob_mae is None else f"{model.oob_mae:.3f}")
    return 0


def cmd_eval(args):
    from .evaluation import repeated_eval

    records, fm, ages = _training_rows(args)
    groups = [r.case_id for r in records] if args.group_by_case else None
    report = repeated_eval(fm.X, ages, _forest_params(args), args.repeats, args.seed,
                           args.train_frac, groups, jobs=args.jobs)
    report.write_json(args.out)
    if args.scatter:
        report.write_scatter(args.scatter)
    a = report.aggregate
    print(f"mean MAE {a['mean_mae']:.3f}  mean baseline MAE {a['mean_baseline_mae']:.3f}  "
          f"mean r {a['mean_r']}")
    return 0


def cmd_predict(args):
    import csv
    import io

    from .features import load_features
    from .forest import load_model

    _require(args.model, args.features)
    model = load_model(args.model)
    fm = load_features(args.features)
    if model.extractor_tag and model.extractor_tag != fm.extractor_tag:
        from .errors import TagError

        raise TagError(f"model expects {model.extractor_tag!r} features, file has {fm.extractor_tag!r}")
    pred = model.predict(fm.X) if fm.n else np.zeros(0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "predicted_age"])
    for k, v in zip(fm.ids, pred):
        w.writerow([k, repr(float(v))])
    Path(args.out).write_text(buf.getvalue())
    return 0


def _read_table(path):
    import pandas as pd

    _require(path)
    try:
        return pd.read_csv(path)
    except (ValueError, pd.errors.ParserError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def cmd_impute(args):
    from .imputation import (LINEAR_KS, LOGISTIC_COVARIATES, LOGISTIC_KS, degradation_experiment,
                             model_impute, write_rows)

    table = _read_table(args.table)
    family = args.family
    outcome = args.outcome or ("status" if family == "logistic" else "FGT")
    if args.covariates is not None:
        covariates = args.covariates
    elif family == "logistic":
        covariates = [args.age_col if c == "age" else c for c in LOGISTIC_COVARIATES]
    else:
        covariates = [args.age_col]
    ks = args.ks if args.ks is not None else list(LOGISTIC_KS if family == "logistic" else LINEAR_KS)

    predicted = None
    if args.strategy == "model":
        from .features import load_features
        from .forest import load_model

        if not args.model or not args.features:
            raise UsageError("impute: --model and --features are required for --strategy model")
        _require(args.model, args.features)
        ids = [str(v) for v in table[args.id_col]]
        predicted = model_impute(load_model(args.model), load_features(args.features),
                                 table[args.age_col].to_numpy(dtype=float), ids)
        if args.imputed_out:
            filled = table.copy()
            filled[args.age_col] = predicted
            filled.to_csv(args.imputed_out, index=False, lineterminator="\n")
    seeds = list(range(args.seed, args.seed + args.seeds))
    rows = degradation_experiment(table, family, outcome, ks, seeds, args.strategy,
                                  age_col=args.age_col, covariates=covariates,
                                  predicted_ages=predicted, jobs=args.jobs)
    write_rows(rows, args.out)
    for r in rows:
        print(f"{r.covariate:<10} AIC {r.aic:9.2f}  est {r.estimate: .4f} "
              f"({r.ci_lo: .4f}, {r.ci_hi: .4f})  p {r.p_value:.3g}")
    return 0


def cmd_analyze(args):
    from .glm import design_from_table, fit, fit_summary

    table = _read_table(args.table)
    if not args.outcome or not args.covariates:
        raise UsageError("analyze: --outcome and --covariates are required")
    design = design_from_table(table, args.family, args.outcome, args.covariates)
    summary = fit_summary(fit(design, args.family))
    Path(args.out).write_text(json.dumps(summary, indent=2) + "\n")
    for row in summary["coefficients"]:
        extra = f"  OR {row['odds_ratio']:.4g}" if "odds_ratio" in row else ""
        print(f"{row['name']:<12} {row['estimate']: .4g} ({row['ci_lo']: .4g}, {row['ci_hi']: .4g})"
              f"  p {row['p_value']:.3g}{extra}")
    print(f"AIC {summary['aic']:.2f}")
    return 0


def cmd_make_cohort(args):
    from .imputation import synthetic_cohort

    table = synthetic_cohort(args.seed, n=args.n, n_cases=args.n_cases)
    if args.missing:
        idx = np.random.default_rng(args.seed).choice(len(table), size=args.missing, replace=False)
        table["age"] = table["age"].astype(float)
        table.loc[table.index[np.sort(idx)], "age"] = np.nan
    table.to_csv(args.out, index=False, lineterminator="\n")
    return 0


COMMANDS = {
    "crawl": cmd_crawl,
    "ingest": cmd_ingest,
    "summarize": cmd_summarize,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "impute": cmd_impute,
    "analyze": cmd_analyze,
    "make-cohort": cmd_make_cohort,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    if args.version:
        from .features import FORMAT_VERSION
        from .forest import MODEL_FORMAT_VERSION

        print(f"mammo-age {__version__} (feature format {FORMAT_VERSION}, model format {MODEL_FORMAT_VERSION})")
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("mammo-age: error: a command is required", file=sys.stderr)
        return 1

    logging.basicConfig(stream=sys.stderr, level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = configparser.ConfigParser()
        if args.config:
            _require(args.config)
            config.read(args.config)
        _resolve(args, config)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mammo-age: error: {exc}", file=sys.stderr)
        return 1
    except (InputError, OSError, ValueError, KeyError, configparser.Error) as exc:
        print(f"mammo-age {args.command}: input error: {exc}", file=sys.stderr)
        return 2
    except FitError as exc:
        print(f"mammo-age {args.command}: fit error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"mammo-age {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())
