"""Command-line entry point: ``predsens <command> ...``.

Commands write their outputs only after all work succeeds, so a failed run
leaves nothing behind. Exit status: 0 ok, 1 usage or config error, 2 data
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .corpus import TextRecord, ToyCorpusSpec, export_saliency, gen_toy_corpus, load_records, save_records
from .models import ConfigError, DataError, TrainConfig, downsample_class, dumps_model, load_model, train_classifier, train_psm
from .sensitivity import (
    VARIANTS, MissingDependency, SensitivitySignal, VariantSpec, evaluate_variant, load_lexicon,
    load_substitutions, save_lexicon, save_substitutions,
)
from .stats import AnnotationSet, UndefinedStatistic, bootstrap_significance, load_annotations, mutual_information, point_biserial, save_annotations
from .synthetic import gen_hiring, gen_threshold, lipschitz_sweep, run_parity_cases, sweep_to_tsv, unconstrained_slope

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_FORMAT = "predsens-audit"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers -------------------------------------------------------------------


def _sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _config_hash(config: dict) -> str:
    return hashlib.sha256(_canonical(config).encode()).hexdigest()


def _json_text(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.6f}"


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")


def _write_outputs(out_dir: Path, files: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out_dir / name).write_text(text, encoding="utf-8")


def _parse_variants(text: str) -> list[str]:
    names = [v.strip().upper() for v in text.split(",") if v.strip()]
    bad = [v for v in names if v not in VARIANTS]
    if bad or not names:
        raise UsageError(f"unknown variant(s) {', '.join(bad) or '(none)'}; choose from {', '.join(VARIANTS)}")
    return list(dict.fromkeys(names))


# -- gen-corpus ----------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    spec = ToyCorpusSpec(n=args.n, seed=args.seed)
    corpus = gen_toy_corpus(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_records(corpus.records, out / "corpus.jsonl")
    save_lexicon(corpus.lexicon, out / "lexicon.txt")
    save_substitutions(corpus.substitution_pairs, out / "substitutions.tsv")
    ann = AnnotationSet([r.id for r in corpus.records], corpus.biased.reshape(-1, 1))
    save_annotations(ann, out / "annotations.tsv")
    print(f"wrote {len(corpus.records)} records ({int(corpus.biased.sum())} flagged biased) to {out}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------


def cmd_train(args) -> int:
    _require_files(args.data)
    records = load_records(args.data)
    if not records:
        raise DataError(f"{args.data}: no records")
    examples = [r.to_example() for r in records]
    if args.downsample is not None:
        cls, frac = args.downsample
        examples = downsample_class(examples, int(cls), frac, args.seed)
    cfg = TrainConfig(
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
        embedding_dim=args.embedding_dim, hidden=tuple(args.hidden), pooling=args.pooling,
    )
    model = (train_psm if args.target == "protected" else train_classifier)(examples, cfg)
    text = dumps_model(model)
    summary = {
        "target": args.target,
        "data": {"path": str(args.data), "sha256": _sha256_file(args.data), "n_used": len(examples)},
        "seed": args.seed,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()},
        "downsample": None if args.downsample is None else {"protected": int(args.downsample[0]), "fraction": args.downsample[1]},
        "fingerprint": hashlib.sha256(text.encode()).hexdigest(),
        "metrics": model.metrics,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    out.with_name(out.stem + ".summary.json").write_text(_json_text(summary), encoding="utf-8")
    acc = model.metrics.get("validation_accuracy")
    print(f"trained {args.target} model on {len(examples)} examples"
          + (f", validation accuracy {acc:.3f}" if acc is not None else ""))
    return EXIT_OK


def _downsample_arg(text: str) -> tuple[int, float]:
    try:
        cls, frac = text.split(":")
        cls, frac = int(cls), float(frac)
    except ValueError:
        raise argparse.ArgumentTypeError("expected CLASS:FRACTION, e.g. 1:0.5") from None
    if cls not in (0, 1) or not 0 <= frac < 1:
        raise argparse.ArgumentTypeError("CLASS must be 0 or 1 and FRACTION in [0, 1)")
    return cls, frac


# -- audit ---------------------------------------------------------------------


def _annotation_labels(records: Sequence[TextRecord], path: str | None) -> tuple[np.ndarray, dict] | None:
    """Majority labels aligned with ``records`` plus agreement info, or None."""
    if path is not None:
        ann = load_annotations(path)
        index = {i: k for k, i in enumerate(ann.ids)}
        missing = [r.id for r in records if r.id not in index]
        if missing:
            raise DataError(f"{path}: no annotations for record(s) {', '.join(missing[:5])}")
        ann = AnnotationSet([r.id for r in records], ann.labels[[index[r.id] for r in records]])
    elif records and all(r.annotations for r in records):
        widths = {len(r.annotations) for r in records}
        if len(widths) != 1:
            raise DataError("records carry differing numbers of annotations")
        ann = AnnotationSet([r.id for r in records], np.array([r.annotations for r in records], dtype=int))
    else:
        return None
    labels, ties = ann.majority()
    info = {"raters": ann.raters, "ties_resolved_biased": int(ties.sum())}
    if ann.raters >= 2:
        info["fleiss_kappa"] = ann.kappa()
    return labels, info


def _variant_summary(values: list, labels: np.ndarray | None, cf: list | None, bins: int,
                     resamples: int, seed: int) -> dict:
    mask = np.array([v is not None for v in values])
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    out = {"n": int(mask.sum()), "mean": float(vals.mean()) if vals.size else None}
    if labels is None:
        return out
    y = labels[mask]
    for key, fn in (("point_biserial", lambda: point_biserial(y, vals)),
                    ("mutual_information_nats", lambda: mutual_information(y, vals, bins))):
        try:
            out[key] = fn()
        except (UndefinedStatistic, ValueError) as exc:
            out[key] = None
            out.setdefault("notes", []).append(f"{key}: {exc}")
    if cf is not None:
        both = mask & np.array([c is not None for c in cf])
        a = np.array([v for v, keep in zip(values, both) if keep], dtype=np.float64)
        b = np.array([c for c, keep in zip(cf, both) if keep], dtype=np.float64)
        try:
            out["p_value_vs_cf"] = bootstrap_significance(labels[both], a, b, resamples, seed).p_value
        except (UndefinedStatistic, ValueError) as exc:
            out["p_value_vs_cf"] = None
            out.setdefault("notes", []).append(f"p_value_vs_cf: {exc}")
    return out


def build_audit(records: Sequence[TextRecord], task, variants: Sequence[str], *, psm=None, lexicon=None,
                substitutions=None, annotations: tuple[np.ndarray, dict] | None = None,
                policy: str = "exclude", bins: int = 8, resamples: int = 1000, seed: int = 0,
                saliency: bool = False) -> tuple[dict, str | None]:
    """Score every record under every variant; returns (report body, saliency TSV)."""
    specs = {v: VariantSpec(v, lexicon=lexicon, psm=psm, substitutions=substitutions) for v in variants}
    rows, columns = [], {v: [] for v in variants}
    sal_lines = ["id\tvariant\trow\ttokens..."] if saliency else None
    for rec in records:
        row = {"id": rec.id, "scores": {}, "flags": {}}
        for v, spec in specs.items():
            try:
                res = evaluate_variant(spec, task, rec.tokens)
                value, flags = res.value, res.flags
                if sal_lines is not None and res.token_saliency is not None:
                    table = export_saliency(res, rec.tokens)
                    for name, arr in (("tokens", None), ("wTJ", table.wj), ("v", table.v)):
                        cells = rec.tokens if arr is None else [f"{x:.6f}" for x in arr]
                        sal_lines.append("\t".join([rec.id, v, name, *cells]))
            except SensitivitySignal as exc:
                value = None if policy == "exclude" else 0.0
                flags = [type(exc).__name__]
            row["scores"][v] = value
            if flags:
                row["flags"][v] = flags
            columns[v].append(value)
        rows.append(row)
    labels = annotations[0] if annotations is not None else None
    cf = columns.get("CF")
    summary = {
        v: _variant_summary(columns[v], labels, cf if v != "CF" else None, bins, resamples, seed)
        for v in variants
    }
    body = {"rows": rows, "summary": summary}
    if annotations is not None:
        body["annotations"] = dict(annotations[1], n_biased=int(labels.sum()))
    return body, (None if sal_lines is None else "\n".join(sal_lines) + "\n")


def render_audit_text(report: dict) -> str:
    meta = report["meta"]
    lines = [
        f"predsens audit report (format {report['format']} v{report['version']})",
        f"config_hash  {meta['config_hash']}",
        f"seed         {meta['seed']}",
        f"task_model   {meta['fingerprints']['task']}",
    ]
    if meta["fingerprints"].get("psm"):
        lines.append(f"psm          {meta['fingerprints']['psm']}")
    lines.append(f"policy       {meta['config']['on_missing_gender']}")
    if "annotations" in report:
        a = report["annotations"]
        kappa = a.get("fleiss_kappa")
        lines.append(f"annotations  raters={a['raters']} biased={a['n_biased']} ties={a['ties_resolved_biased']}"
                     + (f" kappa={kappa:.6f}" if kappa is not None else ""))
    lines += ["", "summary", "variant\tn\tmean\tr_pb\tmi_nats\tp_vs_cf"]
    for v, s in report["summary"].items():
        lines.append("\t".join([v, str(s["n"]), _fmt(s["mean"]), _fmt(s.get("point_biserial")),
                                _fmt(s.get("mutual_information_nats")), _fmt(s.get("p_value_vs_cf"))]))
    variants = list(report["summary"])
    lines += ["", "rows", "id\t" + "\t".join(variants) + "\tflags"]
    for row in report["rows"]:
        flags = ";".join(f"{v}:{','.join(f)}" for v, f in sorted(row["flags"].items()))
        lines.append("\t".join([row["id"], *(_fmt(row["scores"][v]) for v in variants), flags or "-"]))
    return "\n".join(lines) + "\n"


def _audit_config(args) -> dict:
    inputs = {}
    for name in ("data", "model", "psm", "lexicon", "substitutions", "annotations"):
        path = getattr(args, name)
        inputs[name] = None if path is None else {"path": str(path), "sha256": _sha256_file(path)}
    return {
        "command": "audit",
        "inputs": inputs,
        "variants": _parse_variants(args.variants),
        "seed": args.seed,
        "mi_bins": args.mi_bins,
        "resamples": args.resamples,
        "on_missing_gender": args.on_missing_gender,
        "saliency": bool(args.saliency),
    }


def produce_audit(args) -> dict[str, str]:
    """Run an audit and return its output files (name -> text) without writing them."""
    _require_files(args.data, args.model, args.psm, args.lexicon, args.substitutions, args.annotations)
    config = _audit_config(args)
    variants = config["variants"]
    if args.mi_bins < 2:
        raise UsageError("--mi-bins must be at least 2")
    if args.resamples < 100:
        raise UsageError("--resamples must be at least 100")
    needs = {"P2": args.psm, "P3": args.psm, "P4": args.lexicon, "P5": args.lexicon}
    for v in variants:
        if v in needs and needs[v] is None:
            raise MissingDependency(f"{v} needs --{'psm' if v in ('P2', 'P3') else 'lexicon'}")
        if v == "CF" and args.substitutions is None:
            raise MissingDependency("CF needs --substitutions")
    records = load_records(args.data)
    if not records:
        raise DataError(f"{args.data}: no records")
    task = load_model(args.model)
    psm = load_model(args.psm) if args.psm else None
    lexicon = load_lexicon(args.lexicon) if args.lexicon else None
    subs = load_substitutions(args.substitutions) if args.substitutions else None
    annotations = _annotation_labels(records, args.annotations)
    body, saliency = build_audit(
        records, task, variants, psm=psm, lexicon=lexicon, substitutions=subs, annotations=annotations,
        policy=args.on_missing_gender, bins=args.mi_bins, resamples=args.resamples, seed=args.seed,
        saliency=args.saliency,
    )
    report = {
        "format": REPORT_FORMAT,
        "version": 1,
        "meta": {
            "config": config,
            "config_hash": _config_hash(config),
            "seed": args.seed,
            "fingerprints": {"task": task.fingerprint(), "psm": psm.fingerprint() if psm else None},
            "tool_version": __version__,
        },
        **body,
    }
    files = {"report.json": _json_text(report), "report.txt": render_audit_text(report)}
    if saliency is not None:
        files["saliency.tsv"] = saliency
    return files


def cmd_audit(args) -> int:
    files = produce_audit(args)
    _write_outputs(Path(args.out_dir), files)
    print(files["report.txt"].split("\n\nrows")[0])
    return EXIT_OK


# -- synth ---------------------------------------------------------------------


def produce_parity(args) -> dict[str, str]:
    res = run_parity_cases(gen_hiring(args.n, args.seed), max_pairs=args.max_pairs, seed=args.seed)
    doc = {
        "experiment": "parity",
        "n": args.n,
        "seed": args.seed,
        "max_pairs": args.max_pairs,
        "dx2_dx3": res.dx2_dx3,
        "dx1_dx3": res.dx1_dx3,
        "dx1_dx2": res.dx1_dx2,
        "case1": {"P": res.p_case1, "v": list(res.v_case1)},
        "case2": {"P": res.p_case2, "v": list(res.v_case2)},
    }
    text = "\n".join([
        f"n={args.n} seed={args.seed}",
        f"dx2/dx3  {res.dx2_dx3:.6f}",
        f"dx1/dx3  {res.dx1_dx3:.6f}",
        f"dx1/dx2  {res.dx1_dx2:.6f}",
        f"case1 P  {res.p_case1:.6f}",
        f"case2 P  {res.p_case2:.6f}",
    ]) + "\n"
    return {"parity.json": _json_text(doc), "parity.txt": text}


def produce_lipschitz(args) -> dict[str, str]:
    if args.points < 1 or not args.l_max > 0:
        raise UsageError("need --points >= 1 and --l-max > 0")
    data = gen_threshold(args.n, args.seed)
    ls = [args.l_max * (i + 1) / args.points for i in range(args.points)]
    points = lipschitz_sweep(ls, data, probe_x=args.probe)
    doc = {
        "experiment": "lipschitz",
        "n": args.n,
        "seed": args.seed,
        "probe_x": args.probe,
        "unconstrained_theta": unconstrained_slope(data),
        "points": [{"L": p.L, "theta": p.theta, "P": p.P} for p in points],
    }
    return {"lipschitz.json": _json_text(doc), "sweep.tsv": sweep_to_tsv(points)}


def cmd_synth(args) -> int:
    files = produce_parity(args) if args.experiment == "parity" else produce_lipschitz(args)
    _write_outputs(Path(args.out_dir), files)
    for name, text in files.items():
        if name.endswith((".txt", ".tsv")):
            sys.stdout.write(text)
    return EXIT_OK


# -- verify --------------------------------------------------------------------


def cmd_verify(args) -> int:
    """Re-run an audit from the config embedded in its report and compare bytes."""
    _require_files(args.report)
    report_path = Path(args.report)
    try:
        report = json.loads(report_path.read_text(encoding="utf-8"))
        config = report["meta"]["config"]
    except (json.JSONDecodeError, KeyError, TypeError):
        raise DataError(f"{report_path}: not an audit report") from None
    if report.get("format") != REPORT_FORMAT:
        raise DataError(f"{report_path}: unexpected format {report.get('format')!r}")
    if _config_hash(config) != report["meta"].get("config_hash"):
        print("FAIL config hash does not match embedded config")
        return EXIT_DATA
    ns = argparse.Namespace(
        **{k: (None if v is None else v["path"]) for k, v in config["inputs"].items()},
        variants=",".join(config["variants"]), seed=config["seed"], mi_bins=config["mi_bins"],
        resamples=config["resamples"], on_missing_gender=config["on_missing_gender"],
        saliency=config["saliency"],
    )
    for name, entry in config["inputs"].items():
        if entry is not None and (not Path(entry["path"]).is_file() or _sha256_file(entry["path"]) != entry["sha256"]):
            print(f"FAIL input {name} ({entry['path']}) is missing or changed")
            return EXIT_DATA
    files = produce_audit(ns)
    if files["report.json"] != report_path.read_text(encoding="utf-8"):
        print("FAIL re-run report differs")
        return EXIT_DATA
    print(f"OK {report_path} reproduces (config {report['meta']['config_hash'][:12]})")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="predsens", description="Accumulated prediction sensitivity audits.")
    p.add_argument("--version", action="version", version=f"predsens {__version__}")
    p.add_argument("--config", help="JSON file of flag values for the chosen command")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="write the planted-bias toy corpus and its lexicon files")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train a task model or protected-status model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="model file; a .summary.json is written beside it")
    t.add_argument("--target", choices=("task", "protected"), default="task")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=0.5)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--embedding-dim", type=int, default=8)
    t.add_argument("--hidden", type=int, nargs="*", default=[16])
    t.add_argument("--pooling", choices=("attention", "mean"), default="attention")
    t.add_argument("--downsample", type=_downsample_arg, metavar="CLASS:FRACTION",
                   help="drop FRACTION of examples with protected label CLASS before training")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("audit", help="score records under metric variants and correlate with annotations")
    a.add_argument("--data", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--psm")
    a.add_argument("--lexicon")
    a.add_argument("--substitutions", help="tab-separated swap pairs for CF")
    a.add_argument("--annotations", help="tab-separated id and 0/1 rater columns")
    a.add_argument("--variants", default="P1,P2,P3,P4,P5,CF")
    a.add_argument("--mi-bins", type=int, default=8)
    a.add_argument("--resamples", type=int, default=1000)
    a.add_argument("--on-missing-gender", choices=("exclude", "zero"), default="exclude")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--saliency", action="store_true", help="also write per-token heat-map rows")
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_audit)

    s = sub.add_parser("synth", help="tabular sanity experiments")
    s.add_argument("experiment", choices=("parity", "lipschitz"))
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=10000)
    s.add_argument("--max-pairs", type=int, default=None, help="parity: partners sampled per point")
    s.add_argument("--points", type=int, default=20, help="lipschitz: number of L values")
    s.add_argument("--l-max", type=float, default=0.2)
    s.add_argument("--probe", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("verify", help="re-run an audit report and check it reproduces byte for byte")
    v.add_argument("report")
    v.set_defaults(func=cmd_verify)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    known = set(vars(args))
    defaults = {}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("command", "func", "config"):
            raise UsageError(f"{args.config}: unknown option {key!r} for '{args.command}'")
        defaults[dest] = value
    # explicit flags win over the file: re-parse with file values as defaults
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparsers.choices[args.command].set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except (UsageError, ConfigError, MissingDependency) as exc:
        print(f"predsens: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ad.NumericalError as exc:
        print(f"predsens: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, ad.DimensionError) as exc:
        print(f"predsens: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
