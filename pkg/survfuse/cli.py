"""Command line entry: survfuse <command> [options]"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
import pandas as pd
from argx import ArgumentParser
from panpath import PanPath

from .config import MODEL_KINDS, RISK_SCHEMES, RunConfig, from_mapping, load_config
from .data_io import (
    Cohort,
    Standardizer,
    filter_cohort_genes,
    load_cohort_dir,
    standardize_molecular,
    write_bags_binary,
    write_cohort,
)
from .defaults import (
    NAME,
    SECTION_EVAL,
    SECTION_TRAIN,
    logger,
)
from .errors import DataError, SurvfuseError
from .interpret import (
    AttentionMap,
    attention_map,
    gene_attribution_tests,
    modality_contribution,
    molecular_attribution,
    read_cell_counts,
    til_report,
)
from .models import (
    AmilModel,
    MmfModel,
    SnnModel,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .outputs import OutputDir
from .plots import attention_svg, km_svg
from .stats import RiskTable, bootstrap_ci, c_index, stratification_report
from .survival import make_bins
from .synthetic import EffectWeights, gen_cell_counts, gen_synthetic
from .training import cross_validate, risk_table, train
from .version import __version__

if TYPE_CHECKING:  # pragma: no cover
    from argparse import Namespace

DESCRIPTION = "Multimodal (slide + molecular) deep survival analysis"
CHECKPOINT_CONFIG_HELP = (
    "A config for the data and eval sections; by default the one the "
    "checkpoint was trained with."
)


def _path(value: str) -> Path:
    path = PanPath(value)
    if isinstance(path, Path):
        path = path.expanduser()
    return path


def _add_common(parser: ArgumentParser) -> None:
    parser.add_argument(
        "--loglevel",
        default="auto",
        choices=["auto", "debug", "info", "warning", "error", "critical"],
        help=(
            "The logging level. If `auto`, it will be set to `debug` "
            "if `--debug` is set, otherwise `info`."
        ),
    )
    parser.add_argument(
        "--debug",
        action="store_true",
        help="Log per-epoch losses and every file written.",
    )


def _add_config(parser: ArgumentParser, help_: str) -> None:
    parser.add_argument("-c", "--config", type=_path, help=help_)


def _add_run_options(parser: ArgumentParser, model: bool = True) -> None:
    if model:
        parser.add_argument(
            "-m",
            "--model",
            required=True,
            choices=MODEL_KINDS,
            help="The network to fit.",
        )
    _add_config(
        parser, "A TOML or JSON config with sections model, train, data and eval."
    )
    parser.add_argument(
        "-d",
        "--data",
        type=_path,
        required=True,
        help="Directory with embeddings.csv, molecular.csv, labels.csv, meta.csv.",
    )
    parser.add_argument("-o", "--out", type=_path, required=True)
    parser.add_argument("--seed", type=int, help="Overrides train.seed.")
    parser.add_argument("--epochs", type=int, help="Overrides train.epochs.")
    parser.add_argument("--lr", type=float, help="Overrides train.lr.")
    parser.add_argument(
        "--beta-loss",
        dest="beta_loss",
        type=float,
        help="Overrides train.beta_loss, the weight of the uncensored-only loss.",
    )


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog=NAME, description=DESCRIPTION)
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser(
        "gen-synthetic",
        help="Write a seeded synthetic cohort.",
        description="Write a seeded synthetic cohort with cell counts and truth.",
    )
    _add_common(gen)
    gen.add_argument("-o", "--out", type=_path, required=True)
    gen.add_argument("--n", type=int, default=600, help="Number of patients.")
    gen.add_argument("--bag-size", dest="bag_size", type=int, default=20)
    gen.add_argument("--d", type=int, default=16, help="Embedding dimension.")
    gen.add_argument("--p", type=int, default=32, help="Molecular dimension.")
    gen.add_argument("--w-wsi", dest="w_wsi", type=float, default=0.0)
    gen.add_argument("--w-mol", dest="w_mol", type=float, default=0.0)
    gen.add_argument("--w-inter", dest="w_inter", type=float, default=1.5)
    gen.add_argument("--censor-frac", dest="censor_frac", type=float, default=0.4)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument(
        "--binary",
        action="store_true",
        help="Also write the bags as the compact binary container bags.bin.",
    )

    for name, help_ in (
        ("train", "Fit a model on the whole cohort and save a checkpoint."),
        ("cv", "Cross-validate a model and evaluate pooled predictions."),
    ):
        sub = commands.add_parser(name, help=help_, description=help_)
        _add_common(sub)
        _add_run_options(sub)
        if name == "cv":
            sub.add_argument("--folds", type=int, help="Overrides eval.n_folds.")
            sub.add_argument(
                "--replicates", type=int, help="Overrides eval.bootstrap_replicates."
            )
            sub.add_argument(
                "--scheme", choices=RISK_SCHEMES, help="Overrides eval.risk_scheme."
            )

    predict = commands.add_parser(
        "predict",
        help="Risk scores from a checkpoint.",
        description="Risk scores from a checkpoint.",
    )
    _add_common(predict)
    _add_config(predict, CHECKPOINT_CONFIG_HELP)
    predict.add_argument("--checkpoint", type=_path, required=True)
    predict.add_argument("-d", "--data", type=_path, required=True)
    predict.add_argument("-o", "--out", type=_path, required=True)

    explain = commands.add_parser(
        "explain",
        help="Attributions, attention maps and modality shares.",
        description="Attributions, attention maps and modality shares.",
    )
    _add_common(explain)
    _add_config(explain, CHECKPOINT_CONFIG_HELP)
    explain.add_argument("--checkpoint", type=_path, required=True)
    explain.add_argument("-d", "--data", type=_path, required=True)
    explain.add_argument("-o", "--out", type=_path, required=True)
    which = explain.add_mutually_exclusive_group(required=True)
    which.add_argument("--patient", help="Explain one patient.")
    which.add_argument("--all", action="store_true", help="Explain every patient.")
    explain.add_argument(
        "--steps", type=int, help="Quadrature nodes, overrides eval.ig_steps."
    )

    stats = commands.add_parser(
        "stats",
        help="Evaluate a prediction CSV.",
        description="c-index, bootstrap CI, KM curves and logrank test.",
    )
    _add_common(stats)
    stats.add_argument("--predictions", type=_path, required=True)
    stats.add_argument("-o", "--out", type=_path, required=True)
    stats.add_argument("--scheme", choices=RISK_SCHEMES, default="median")
    stats.add_argument("--replicates", type=int, default=1000)
    stats.add_argument("--level", type=float, default=0.95)
    stats.add_argument("--seed", type=int, default=0)

    til = commands.add_parser(
        "til",
        help="TIL fractions in top-attention patches by risk group.",
        description="TIL fractions in top-attention patches by risk group.",
    )
    _add_common(til)
    _add_config(til, "A config whose eval.top_frac is used.")
    til.add_argument("--attention", type=_path, required=True)
    til.add_argument("--cellcounts", type=_path, required=True)
    til.add_argument("--risk-table", dest="risk_table", type=_path, required=True)
    til.add_argument("-o", "--out", type=_path, required=True)
    til.add_argument(
        "--top-frac",
        dest="top_frac",
        type=float,
        help="Share of top-attention patches, overrides eval.top_frac.",
    )
    return parser


# Shared steps
def _resolve_config(args: Namespace) -> RunConfig:
    overrides = {
        SECTION_TRAIN: {
            key: getattr(args, key)
            for key in ("seed", "epochs", "lr", "beta_loss")
            if getattr(args, key, None) is not None
        },
        SECTION_EVAL: {
            target: getattr(args, key)
            for key, target in (
                ("folds", "n_folds"),
                ("replicates", "bootstrap_replicates"),
                ("scheme", "risk_scheme"),
            )
            if getattr(args, key, None) is not None
        },
    }
    return load_config(args.config, {k: v for k, v in overrides.items() if v})


def _load(datadir: Path, config: RunConfig) -> Cohort:
    cohort = load_cohort_dir(datadir, config.data)
    if config.data.filter_genes:
        cohort = filter_cohort_genes(
            cohort, config.data.freq_threshold, config.data.rna_top_k
        )
    return cohort


def _checkpoint_config(args: Namespace, extras: dict) -> RunConfig:
    """`-c` first, then the config the checkpoint was trained with"""
    if args.config is not None:
        return load_config(args.config)
    return from_mapping(extras.get("config")).validate()


def _load_for_checkpoint(args: Namespace):
    model, extras = load_checkpoint(args.checkpoint)
    config = _checkpoint_config(args, extras)
    cohort = load_cohort_dir(args.data, config.data).select_features(
        extras["feature_names"]
    )
    if extras.get("standardizer"):
        scaler = Standardizer.from_dict(extras["standardizer"])
        cohort = cohort.with_molecular(scaler.apply(cohort.molecular_matrix()))
    return model, cohort, config


def _write_stratification(out: OutputDir, table: RiskTable, scheme: str):
    report = stratification_report(table, scheme)
    frames = []
    for group, curve in report.curves.items():
        frame = curve.to_frame()
        frame.insert(0, "group", group)
        frames.append(frame)
    out.write_csv("km.csv", pd.concat(frames, ignore_index=True))
    out.write_text("km.svg", km_svg(report.curves, f"Kaplan-Meier ({scheme} split)"))
    return report


# Commands
def cmd_gen_synthetic(args: Namespace) -> None:
    cohort = gen_synthetic(
        args.n,
        args.bag_size,
        args.d,
        args.p,
        EffectWeights(args.w_wsi, args.w_mol, args.w_inter),
        args.censor_frac,
        args.seed,
    )
    out = OutputDir(args.out)
    write_cohort(cohort, out.path)
    out.write_csv("cellcounts.csv", gen_cell_counts(cohort, args.seed))
    out.write_csv("truth.csv", cohort.truth)
    if args.binary:
        write_bags_binary(
            out / "bags.bin", {p.patient_id: p.bag.values for p in cohort.patients}
        )
    out.write_run_info(
        {
            key: getattr(args, key)
            for key in (
                "n", "bag_size", "d", "p", "w_wsi", "w_mol", "w_inter",
                "censor_frac", "seed",
            )
        },
        "gen-synthetic",
    )


def cmd_train(args: Namespace) -> None:
    config = _resolve_config(args)
    cohort = _load(args.data, config)
    standardizer = None
    if config.data.standardize and cohort.p:
        matrix, standardizer = standardize_molecular(
            cohort.molecular_matrix(), cohort.feature_kinds, range(len(cohort))
        )
        cohort = cohort.with_molecular(matrix)
    bins = make_bins(cohort.labels())
    model = build_model(args.model, cohort.d, cohort.p, config.model, config.train.seed)
    fitted = train(model, cohort.patients, bins, config.train)

    out = OutputDir(args.out)
    save_checkpoint(
        out / "checkpoint.json",
        fitted.model,
        {
            "feature_names": cohort.feature_names,
            "feature_kinds": cohort.feature_kinds,
            "standardizer": standardizer.to_dict() if standardizer else None,
            "bins": list(bins.cuts),
            "config": config.to_dict(),
        },
    )
    out.write_csv(
        "loss_trace.csv",
        pd.DataFrame(
            {
                "epoch": np.arange(1, len(fitted.loss_trace) + 1),
                "loss": fitted.loss_trace,
            }
        ),
    )
    out.write_run_info(config.to_dict(), "train")


def cmd_cv(args: Namespace) -> None:
    config = _resolve_config(args)
    cohort = _load(args.data, config)
    result = cross_validate(cohort, config, args.model)
    pooled = result.predictions

    out = OutputDir(args.out)
    out.write_csv("predictions.csv", pooled.to_frame())
    out.write_csv(
        "loss_traces.csv",
        pd.DataFrame(
            [
                (fold.fold, epoch + 1, loss)
                for fold in result.folds
                for epoch, loss in enumerate(fold.loss_trace)
            ],
            columns=["fold", "epoch", "loss"],
        ),
    )
    ci_low, ci_high = bootstrap_ci(
        pooled,
        c_index,
        config.eval.bootstrap_replicates,
        config.train.seed,
        config.eval.ci_level,
    )
    report = _write_stratification(out, pooled, config.eval.risk_scheme)
    metrics = {
        "model": args.model,
        "folds": [
            {
                "fold": fold.fold,
                "n_train": fold.n_train,
                "n_val": fold.n_val,
                "c_index": fold.c_index,
                "bins": list(fold.bins.cuts),
            }
            for fold in result.folds
        ],
        "c_index_mean": result.c_index_mean,
        "c_index_pooled": result.c_index_pooled,
        "ci_low": ci_low,
        "ci_high": ci_high,
        "logrank_p": report.logrank_p,
        "logrank_chi2": report.logrank_chi2,
        "groups": report.to_dict(),
    }
    out.write_json("metrics.json", metrics)
    out.write_run_info(config.to_dict(), "cv")
    logger.info(
        "[bold][yellow]CV[/yellow][/bold] %s: mean c-index %.4f, pooled %.4f "
        "(%.0f%% CI %.4f-%.4f), logrank p %s",
        args.model.upper(),
        result.c_index_mean,
        result.c_index_pooled,
        100 * config.eval.ci_level,
        ci_low,
        ci_high,
        report.logrank_p,
    )


def cmd_predict(args: Namespace) -> None:
    model, cohort, _ = _load_for_checkpoint(args)
    table = risk_table(model, cohort.patients)
    out = OutputDir(args.out)
    out.write_csv("predictions.csv", table.to_frame())
    out.write_run_info(
        {"checkpoint": str(args.checkpoint), "data": str(args.data)}, "predict"
    )


def cmd_explain(args: Namespace) -> None:
    model, cohort, config = _load_for_checkpoint(args)
    steps = args.steps if args.steps is not None else config.eval.ig_steps
    patients = cohort.patients if args.all else (cohort.patient(args.patient),)
    out = OutputDir(args.out)

    summary, reports, attention_frames = {}, [], []
    for patient in patients:
        pid = patient.patient_id
        entry = {"risk": risk_table(model, [patient]).risk[0].item()}
        if not isinstance(model, AmilModel):
            report = molecular_attribution(
                model, patient, cohort.feature_names, steps
            )
            reports.append(report)
            out.write_json(
                f"attributions/{OutputDir.patient_file(pid, '.json')}",
                report.to_dict(),
            )
            entry["completeness_gap"] = report.completeness_gap
            entry["relative_gap"] = report.relative_gap
            logger.info(
                "[bold][yellow]IG[/yellow][/bold] %s: completeness gap %.3g "
                "(relative %.3g)",
                pid,
                report.completeness_gap,
                report.relative_gap,
            )
        if not isinstance(model, SnnModel):
            amap = attention_map(model, patient)
            frame = amap.to_frame()
            out.write_csv(f"attention/{OutputDir.patient_file(pid, '.csv')}", frame)
            out.write_text(
                f"attention/{OutputDir.patient_file(pid, '.svg')}",
                attention_svg(amap, f"Attention {pid}"),
            )
            frame.insert(0, "patient_id", pid)
            attention_frames.append(frame)
        if isinstance(model, MmfModel):
            wsi, mol = modality_contribution(
                model, patient.bag, patient.molecular, steps
            )
            entry["wsi_share"], entry["mol_share"] = wsi, mol
        summary[pid] = entry

    if attention_frames:
        out.write_csv("attention.csv", pd.concat(attention_frames, ignore_index=True))
    if len(reports) > 1:
        tests = gene_attribution_tests(reports)
        out.write_csv("gene_tests.csv", tests)
    out.write_json("explain.json", {"model": model.kind, "patients": summary})
    out.write_run_info(
        {
            "checkpoint": str(args.checkpoint),
            "data": str(args.data),
            "steps": steps,
        },
        "explain",
    )


def cmd_stats(args: Namespace) -> None:
    table = RiskTable.read_csv(args.predictions)
    lo, hi = bootstrap_ci(table, c_index, args.replicates, args.seed, args.level)
    out = OutputDir(args.out)
    report = _write_stratification(out, table, args.scheme)
    out.write_json(
        "stats.json",
        {
            "c_index": c_index(table),
            "ci_low": lo,
            "ci_high": hi,
            "logrank_p": report.logrank_p,
            "logrank_chi2": report.logrank_chi2,
            "groups": report.to_dict(),
        },
    )
    out.write_run_info(
        {
            "predictions": str(args.predictions),
            "scheme": args.scheme,
            "replicates": args.replicates,
            "level": args.level,
            "seed": args.seed,
        },
        "stats",
    )


def _read_frame(path: Path, required: Sequence[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype={"patient_id": str})
    except FileNotFoundError:
        raise DataError("File not found", path=str(path)) from None
    missing = set(required) - set(frame.columns)
    if missing:
        raise DataError(f"Missing columns {sorted(missing)}", path=str(path), line=1)
    return frame


def cmd_til(args: Namespace) -> None:
    attention = _read_frame(
        args.attention, ["patient_id", "patch_id", "x", "y", "raw", "percentile"]
    )
    maps = {
        str(pid): AttentionMap.from_frame(group)
        for pid, group in attention.groupby("patient_id", sort=True)
    }
    counts = read_cell_counts(
        _read_frame(
            args.cellcounts, ["patient_id", "patch_id", "total", "lymphocytes", "tumor"]
        )
    )
    table = RiskTable.read_csv(args.risk_table)
    top_frac = args.top_frac
    if top_frac is None:
        top_frac = load_config(args.config).eval.top_frac
    frame, summary = til_report(maps, counts, table, top_frac)

    out = OutputDir(args.out)
    out.write_csv("til.csv", frame)
    out.write_json("til.json", summary)
    out.write_run_info(
        {
            "attention": str(args.attention),
            "cellcounts": str(args.cellcounts),
            "risk_table": str(args.risk_table),
            "top_frac": top_frac,
        },
        "til",
    )


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "cv": cmd_cv,
    "predict": cmd_predict,
    "explain": cmd_explain,
    "stats": cmd_stats,
    "til": cmd_til,
}


def _banner(command: str) -> None:
    print(" * ")
    print(" *    ___ _  _ _ ___   _____ _   _ ___ ___")
    print(" *   / __| || | '_\\ \\ / / __| | | / __| __|")
    print(" *   \\__ \\ || | |  \\ V /| _|| |_| \\__ \\ _|")
    print(" *   |___/\\_,_|_|   \\_/ |_|  \\___/|___/___|")
    print(" * ")
    print(" *                   version: %s" % __version__)
    print(" *                   command: %s" % command)
    print(" * ")


def main(argv: Sequence[str] | None = None) -> int:
    """Run a command; 0 on success, 1 on data/runtime errors, 2 on usage"""
    args = build_parser().parse_args(argv)
    if args.loglevel == "auto":
        logger.setLevel("DEBUG" if args.debug else "INFO")
    else:
        logger.setLevel(args.loglevel.upper())

    _banner(args.command)
    try:
        COMMANDS[args.command](args)
    except SurvfuseError as exc:
        logger.error("[bold][red]%s[/red][/bold] %s", type(exc).__name__, exc)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
