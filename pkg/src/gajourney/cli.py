"""Command-line entry point: ``gajourney <command> [flags]``.

Commands: synth, ingest, stats, label, train, eval, target, report. Every
command writes its artifacts plus ``manifest.json`` (resolved config, seed,
artifact checksums) into ``--out``. A ``--config`` JSON file may supply any
flag by its long name (dashes or underscores); explicit flags win.

Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import Attribution, build_labels
from .errors import GAJourneyError
from .features import (
    CLASS_NAMES,
    NormMethod,
    RptStats,
    category_histograms,
    compute_rpt_stats,
    encode_journeys,
    fit_normalizer,
    journey_feature_rows,
    pearson_correlation_matrix,
)
from .ingest import load_directory, join_journeys, parse_ga_report_json, write_table
from .model import load_params, save_params
from .synthgen import SynthConfig, generate, write_corpus, write_ga_reports
from .targeting import (
    ScoringMethod,
    default_cost_grid,
    format_pretty,
    format_table,
    profit_curve,
    read_curves_csv,
    render_plots,
    run_experiment,
)
from .training import (
    TrainConfig,
    band_label,
    constant_predictions,
    evaluate,
    prevalence_baseline,
    split_by_user,
    train,
)

log = logging.getLogger("gajourney")

COMMANDS = ("synth", "ingest", "stats", "label", "train", "eval", "target", "report")

DEFAULTS = {
    "seed": 0,
    "users": 1000,
    "attribution": "linear",
    "norm": "minmax",
    "epochs": 50,
    "lr": 1e-3,
    "batch": 16,
    "trials": 200,
    "val_fraction": 0.2,
    "method": "all",
    "clip_norm": None,
    "threads": None,
    "hidden": 30,
    "fc_hidden": 60,
}


class UsageError(GAJourneyError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--data", help="input directory")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="JSON file whose keys mirror the flags")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="gajourney", description="Session-stage prediction pipeline for GA e-commerce exports.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--users", type=int)
    p.add_argument("--ga-json", action="store_true", help="also write GA-style JSON reports under ga/")

    p = sub.add_parser("ingest", parents=[common], help="parse and join exported tables")
    p.add_argument("--ga-json", action="store_true", help="read users/sessions/hits .json reports instead of CSV")

    sub.add_parser("stats", parents=[common], help="category histograms and feature correlations")

    p = sub.add_parser("label", parents=[common], help="dump attribution labels per session")
    p.add_argument("--attribution", choices=["linear", "timedecay"])

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--attribution", choices=["linear", "timedecay"])
    p.add_argument("--norm", choices=["minmax", "standard"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--fc-hidden", type=int)

    p = sub.add_parser("eval", parents=[common], help="evaluate one model or a directory of models")
    p.add_argument("--model", required=False, help="model directory, or a directory of model directories")

    p = sub.add_parser("target", parents=[common], help="Monte-Carlo targeting experiment")
    p.add_argument("--model", help="model directory, or a directory of model directories")
    p.add_argument("--method", choices=["all", "random", "statistical", "linear", "timedecay"])
    p.add_argument("--trials", type=int)
    p.add_argument("--val-fraction", type=float)

    sub.add_parser("report", parents=[common], help="re-render plots and tables from a target run")
    return parser


# --- helpers --------------------------------------------------------------------------


def _resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in file_cfg.items()})
    for key, value in vars(args).items():
        if key in ("config", "command", "verbose"):
            continue
        if value is not None and value is not False:
            cfg[key] = value
        elif key not in cfg:
            cfg[key] = value
    return cfg


def _require(cfg: dict, *keys) -> None:
    for k in keys:
        if not cfg.get(k):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _out_dir(cfg: dict) -> Path:
    _require(cfg, "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(cfg: dict) -> Path:
    _require(cfg, "data")
    path = Path(cfg["data"])
    if not path.is_dir():
        raise UsageError(f"data directory {path} does not exist")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: dict, artifacts) -> Path:
    files = sorted({Path(a) for a in artifacts})
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.get("seed"),
        "config": {k: v for k, v in sorted(cfg.items()) if k != "out"},
        "artifacts": {str(p.relative_to(out)) if p.is_relative_to(out) else str(p): _sha256(p) for p in files},
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _load_journeys(data: Path):
    journeys, report = load_directory(data)
    if not journeys:
        raise UsageError(f"no usable journeys in {data}")
    return journeys, report


def find_models(path) -> list:
    root = Path(path)
    if (root / "params.bin").exists():
        return [root]
    found = sorted(p.parent for p in root.glob("*/params.bin"))
    if not found:
        raise UsageError(f"no model (params.bin) under {root}")
    return found


def _read_split(model_dir: Path) -> set:
    with open(model_dir / "split.csv", newline="") as fh:
        return {row["client_id"] for row in csv.DictReader(fh) if row["split"] == "val"}


def _model_inputs(model_dir: Path, journeys):
    """Validation journeys of a trained model, encoded with its saved statistics."""
    val_ids = _read_split(model_dir)
    val = [j for j in journeys if j.client_id in val_ids]
    if not val:
        raise UsageError(f"validation split of {model_dir} matches no journeys in the data")
    stats = RptStats.from_dict(json.loads((model_dir / "rpt_stats.json").read_text()))
    from .features import Normalizer

    normalizer = Normalizer.load(model_dir / "normalizer.json")
    train_cfg = json.loads((model_dir / "train_config.json").read_text())
    return val, encode_journeys(val, stats), normalizer, train_cfg


# --- commands ----------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> tuple[Path, list]:
    out = _out_dir(cfg)
    synth_cfg = SynthConfig.from_dict(cfg["synth"]) if isinstance(cfg.get("synth"), dict) else SynthConfig()
    synth_cfg.n_users = int(cfg["users"])
    synth_cfg.seed = int(cfg["seed"])
    tables, truth = generate(synth_cfg)
    paths = list(write_corpus(tables, truth, out).values())
    if cfg.get("ga_json"):
        paths += list(write_ga_reports(tables, out / "ga").values())
    (out / "synth_config.json").write_text(json.dumps(synth_cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    paths.append(out / "synth_config.json")
    print(f"wrote {len(tables.users)} users, {len(tables.sessions)} sessions, {len(tables.hits)} hits to {out}")
    return out, paths


def cmd_ingest(cfg: dict) -> tuple[Path, list]:
    data, out = _data_dir(cfg), _out_dir(cfg)
    paths = []
    if cfg.get("ga_json"):
        tables = {}
        for kind in ("users", "sessions", "hits"):
            with open(data / f"{kind}.json", "rb") as fh:
                rows, ignored = parse_ga_report_json(fh, kind)
            if ignored:
                print(f"{kind}: ignored {ignored} unmapped column(s)")
            tables[kind] = rows
            path = out / f"{kind}.csv"
            with open(path, "w", newline="") as fh:
                write_table(kind, rows, fh)
            paths.append(path)
        journeys, report = join_journeys(tables["users"], tables["sessions"], tables["hits"])
    else:
        journeys, report = load_directory(data)
    rows = []
    for j in journeys:
        from .features import map_shopping_stage

        classes = [map_shopping_stage(s.shopping_stages) for s, _ in j.sessions]
        rows.append([j.client_id, len(j.sessions), sum(len(h) for _, h in j.sessions), "|".join(map(str, classes))])
    paths.append(_write_csv(out / "journeys.csv", ["client_id", "n_sessions", "n_hits", "class_ids"], rows))
    path = out / "drop_report.json"
    path.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    paths.append(path)
    print(f"{len(journeys)} journeys; drops: {report.as_dict()}")
    return out, paths


def cmd_stats(cfg: dict) -> tuple[Path, list]:
    data, out = _data_dir(cfg), _out_dir(cfg)
    journeys, _ = _load_journeys(data)
    hist = category_histograms(journeys)
    paths = []
    for label, table in hist.items():
        header = ["category", "users", "revenue", "transactions", "revenue_per_transaction"]
        paths.append(_write_csv(out / f"{label}_histogram.csv", header,
                                [[_fmt(r[h]) if h != "category" else r[h] for h in header] for r in table]))
    stats = compute_rpt_stats(journeys)
    names, rows = journey_feature_rows(encode_journeys(journeys, stats))
    corr = pearson_correlation_matrix(rows)
    paths.append(_write_csv(out / "correlation.csv", ["feature"] + names,
                            [[n] + [_fmt(v) for v in corr[i]] for i, n in enumerate(names)]))
    path = out / "rpt_stats.json"
    path.write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    paths.append(path)
    print(f"stats for {len(journeys)} journeys written to {out}")
    return out, paths


def cmd_label(cfg: dict) -> tuple[Path, list]:
    data, out = _data_dir(cfg), _out_dir(cfg)
    journeys, _ = _load_journeys(data)
    attribution = Attribution.parse(cfg["attribution"])
    stats = compute_rpt_stats(journeys)
    rows = []
    for j in encode_journeys(journeys, stats):
        labels = build_labels(j.class_ids, attribution)
        for i, (cid, row) in enumerate(zip(j.class_ids, labels), start=1):
            rows.append([j.client_id, i, int(cid)] + [_fmt(v) for v in row])
    path = _write_csv(out / f"labels_{attribution.value}.csv",
                      ["client_id", "session_index", "class_id"] + [f"t{c}" for c in range(6)], rows)
    print(f"{len(rows)} labelled sessions written to {path}")
    return out, [path]


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        attribution=cfg["attribution"],
        normalization=cfg["norm"],
        epochs=int(cfg["epochs"]),
        learning_rate=float(cfg["lr"]),
        batch_size=int(cfg["batch"]),
        seed=int(cfg["seed"]),
        clip_norm=cfg.get("clip_norm"),
        val_fraction=float(cfg["val_fraction"]),
        hidden=int(cfg["hidden"]),
        fc_hidden=int(cfg["fc_hidden"]),
    )


def cmd_train(cfg: dict) -> tuple[Path, list]:
    data, out = _data_dir(cfg), _out_dir(cfg)
    tcfg = _train_config(cfg)
    journeys, _ = _load_journeys(data)
    train_j, val_j = split_by_user(journeys, tcfg.val_fraction, tcfg.seed)
    stats = compute_rpt_stats(train_j)
    enc_train, enc_val = encode_journeys(train_j, stats), encode_journeys(val_j, stats)
    normalizer = fit_normalizer(enc_train, tcfg.normalization)
    n_train, n_val = normalizer.transform(enc_train), normalizer.transform(enc_val)
    result = train(n_train, n_val, tcfg)

    paths = [save_params(result.params, out / "params.bin"), out / "params.bin.manifest.txt"]
    normalizer.save(out / "normalizer.json")
    (out / "rpt_stats.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "train_config.json").write_text(json.dumps(tcfg.to_dict(), indent=2, sort_keys=True) + "\n")
    paths += [out / "normalizer.json", out / "rpt_stats.json", out / "train_config.json"]
    paths.append(_write_csv(out / "history.csv", ["epoch", "train_mse", "val_mse"],
                            [[e, _fmt(a), _fmt(b)] for e, a, b in result.history]))
    split_rows = sorted([[j.client_id, "train"] for j in train_j] + [[j.client_id, "val"] for j in val_j])
    paths.append(_write_csv(out / "split.csv", ["client_id", "split"], split_rows))
    report = evaluate(result.params, n_val, tcfg.attribution)
    (out / "eval.txt").write_text(report.to_text(tcfg.attribution.value, tcfg.normalization.value))
    paths.append(out / "eval.txt")
    print(f"best epoch {result.best_epoch}: val mse {result.history[result.best_epoch - 1][2]:.6f}")
    return out, paths


def cmd_eval(cfg: dict) -> tuple[Path, list]:
    data, out = _data_dir(cfg), _out_dir(cfg)
    _require(cfg, "model")
    journeys, _ = _load_journeys(data)
    header = ["model", "attribution", "normalization", "loss", "accuracy_0.5/2.0", "accuracy_0.8/1.25",
              "baseline_loss"]
    rows, text = [], []
    for model_dir in find_models(cfg["model"]):
        val, enc_val, normalizer, tcfg = _model_inputs(model_dir, journeys)
        params = load_params(model_dir / "params.bin")
        n_val = normalizer.transform(enc_val)
        attribution = tcfg["attribution"]
        report = evaluate(params, n_val, attribution)
        # the constant baseline needs training labels; the val-set prevalence is a fair stand-in here
        base = prevalence_baseline(n_val, attribution)
        baseline = evaluate(None, n_val, attribution, predictions=constant_predictions(n_val, base))
        rows.append([model_dir.name, attribution, tcfg["normalization"], _fmt(report.mse), _fmt(report.acc_wide),
                     _fmt(report.acc_tight), _fmt(baseline.mse)])
        text.append(f"[{model_dir.name}]\n" + report.to_text(attribution, tcfg["normalization"]))
    paths = [_write_csv(out / "table1.csv", header, rows)]
    (out / "table1.txt").write_text("\n".join(text))
    paths.append(out / "table1.txt")
    sys.stdout.write("\n".join(text))
    return out, paths


def cmd_target(cfg: dict) -> tuple[Path, list]:
    data, out = _data_dir(cfg), _out_dir(cfg)
    journeys, _ = _load_journeys(data)
    wanted = cfg["method"]
    model_kinds = {"linear", "timedecay"}
    methods = []
    models = {}
    population = None
    if cfg.get("model"):
        for model_dir in find_models(cfg["model"]):
            val, enc_val, normalizer, tcfg = _model_inputs(model_dir, journeys)
            models.setdefault(tcfg["attribution"], (load_params(model_dir / "params.bin"), normalizer))
            if population is None:
                population = enc_val
    elif wanted in model_kinds:
        raise UsageError(f"--method {wanted} needs --model")
    if population is None:
        _, val = split_by_user(journeys, float(cfg["val_fraction"]), int(cfg["seed"]))
        population = encode_journeys(val, compute_rpt_stats(journeys))

    for kind in ("random", "statistical", "timedecay", "linear"):
        if wanted not in ("all", kind):
            continue
        if kind in model_kinds:
            if kind not in models:
                if wanted == kind:
                    raise UsageError(f"no {kind} model found under {cfg.get('model')}")
                log.warning("no %s model available; skipping that scorer", kind)
                continue
            params, normalizer = models[kind]
            methods.append(ScoringMethod(kind, params=params, normalizer=normalizer))
        else:
            methods.append(ScoringMethod(kind))

    outcomes = run_experiment(population, methods, int(cfg["trials"]), int(cfg["seed"]))
    grid = default_cost_grid()
    curves = [profit_curve(o, grid, name) for name, o in outcomes.items()]
    paths = list(render_plots(curves, out).values())
    (out / "table2.csv").write_text(format_table(outcomes))
    (out / "table2.txt").write_text(format_pretty(outcomes))
    trial_rows = [[name, k, int(o.tp[k]), int(o.fp[k]), _fmt(o.revenue_tp[k]), _fmt(o.bp[k])]
                  for name, o in outcomes.items() for k in range(o.trials)]
    paths.append(_write_csv(out / "trials.csv", ["method", "trial", "tp", "fp", "revenue_tp", "bp"], trial_rows))
    paths += [out / "table2.csv", out / "table2.txt"]
    sys.stdout.write(format_pretty(outcomes))
    return out, paths


def cmd_report(cfg: dict) -> tuple[Path, list]:
    data, out = _data_dir(cfg), _out_dir(cfg)
    curves_path = data / "profit_curves.csv"
    if not curves_path.exists():
        raise UsageError(f"{curves_path} not found; run `target` first")
    curves = read_curves_csv(curves_path)
    paths = list(render_plots(curves, out).values())
    lines = ["# Targeting report", ""]
    table = data / "table2.txt"
    if table.exists():
        lines += ["```", table.read_text().rstrip(), "```", ""]
    for c in curves:
        sign = np.sign(c.mean_profit)
        crossing = np.nonzero(np.diff(sign) < 0)[0]
        where = f"{c.costs[crossing[0]]:.2f}-{c.costs[crossing[0] + 1]:.2f}" if crossing.size else "not reached"
        lines.append(f"- {c.method}: profit at lowest cost {c.mean_profit[0]:.2f}; turns negative at cost {where}")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    paths.append(out / "report.md")
    print(f"report written to {out / 'report.md'}")
    return out, paths


HANDLERS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "label": cmd_label,
    "train": cmd_train,
    "eval": cmd_eval,
    "target": cmd_target,
    "report": cmd_report,
}


def _thread_limit(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a command is required: {' | '.join(COMMANDS)}\n\n{parser.format_usage()}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = _resolve(args)
        with _thread_limit(cfg.get("threads")):
            out, artifacts = HANDLERS[args.command](cfg)
        _write_manifest(out, args.command, cfg, artifacts)
        return 0
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (GAJourneyError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
