import argparse
import json
import logging
import sys
from typing import List, Optional

import pandas as pd

from .baselines import GaussianChangeModel, ScalarSeries
from .detect import (
    RESET_POLICIES,
    RESTART_AFTER_CHANGE,
    DetectConfig,
    GhrgChangeModel,
    OnlineDetector,
    describe_change,
    detections_document,
)
from .evalkit import (
    METHODS,
    DetectionList,
    SweepConfig,
    precision_recall_table,
    read_detections,
    read_events,
    run_sweep,
)
from .fit import INITS, LINKAGE, FitConfig, fit_ghrg
from .ghrg import BetaParams, model_to_document
from .graphs import (
    GAP_POLICIES,
    NetChangeError,
    aggregate_events,
    bin_index,
    read_edge_list,
    read_interactions,
    to_seconds,
    window_at,
)
from .synth import DEFAULT_ENDPOINTS, KINDS, ChangeSpec, write_synthetic

logger = logging.getLogger(__name__)

USAGE_ERROR = 1
RUNTIME_ERROR = 2

WEEK = 7 * 24 * 3600.0


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _write_json(doc, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(frame: pd.DataFrame, path):
    frame.to_csv(path, index=False, lineterminator="\n")


def _add_common(p):
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    p.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    p.add_argument("--workers", type=int, default=1, help="parallel tasks; never changes results")
    p.add_argument("--progress", action="store_true", help="progress bar and per-window timing")


def _add_fit(p):
    p.add_argument("--burn-in", type=int, default=200, help="burn-in sweeps (default 200)")
    p.add_argument("--samples", type=int, default=100, help="recorded trees per chain (default 100)")
    p.add_argument("--interval", type=int, default=5, help="sweeps between samples (default 5)")
    p.add_argument("--chains", type=int, default=1, help="independent chains (default 1)")
    p.add_argument("--init", choices=INITS, default=LINKAGE, help="chain starting tree")
    p.add_argument("--alpha", type=float, default=1.0, help="Beta prior alpha (default 1)")
    p.add_argument("--beta", type=float, default=1.0, help="Beta prior beta (default 1)")
    p.add_argument("--window", type=int, default=4, help="window length w (default 4)")
    p.add_argument("--gap-policy", choices=GAP_POLICIES, default="empty")


def _fit_config(args) -> FitConfig:
    return FitConfig(
        burn_in_sweeps=args.burn_in,
        n_samples=args.samples,
        sample_interval_sweeps=args.interval,
        seed=args.seed,
        n_chains=args.chains,
        workers=args.workers,
        init=args.init,
    )


def _detect_config(args, w: int = None) -> DetectConfig:
    return DetectConfig(
        w=args.window if w is None else w,
        fp_rate=args.fp_rate,
        n_bootstrap=args.bootstrap,
        fit=_fit_config(args),
        prior=BetaParams(args.alpha, args.beta),
        reset_policy=args.reset_policy,
        seed=args.seed,
        workers=args.workers,
        posterior_draw=args.posterior_draw,
        progress=args.progress,
    )


def _add_detect(p):
    _add_fit(p)
    p.add_argument("--fp-rate", type=float, default=0.05, help="target false positive rate")
    p.add_argument("--bootstrap", type=int, default=1000, help="bootstrap replicates per window")
    p.add_argument("--reset-policy", choices=RESET_POLICIES, default=RESTART_AFTER_CHANGE)
    p.add_argument("--posterior-draw", action="store_true",
                   help="draw node probabilities per bootstrap replicate")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="netchange", description="Online change-point detection for evolving networks"
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("synth", help="generate a synthetic sequence with one change")
    _add_common(p)
    p.add_argument("--kind", choices=KINDS, default="split")
    p.add_argument("--mu-before", type=float, default=None)
    p.add_argument("--mu-after", type=float, default=None)
    p.add_argument("--length", type=int, default=12)
    p.add_argument("--t-change", type=int, default=8)
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--density", type=float, default=0.2)
    p.add_argument("--groups", type=int, nargs=2, default=None, metavar=("A", "B"))
    p.add_argument("--p-fix", type=float, default=None)
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = sub.add_parser("ingest", help="bin timestamped interactions into an edge list")
    _add_common(p)
    p.add_argument("-i", "--input", required=True, help="interactions CSV (timestamp,u,v)")
    p.add_argument("--bin-width", type=float, default=WEEK,
                   help="snapshot width in seconds (default one week)")
    p.add_argument("--known-events", default=None,
                   help="CSV (timestamp,label) of known events to bin alongside")
    p.add_argument("--events-out", default=None, help="binned known events CSV (t,label)")
    p.add_argument("-o", "--output", required=True, help="edge list")

    p = sub.add_parser("fit", help="fit a GHRG to one window and write its tree")
    _add_common(p)
    _add_fit(p)
    p.add_argument("-i", "--input", required=True, help="edge list")
    p.add_argument("--tau", type=int, default=None, help="window end (default: last time)")
    p.add_argument("-o", "--output", required=True, help="tree document (JSON)")

    p = sub.add_parser("detect", help="run the online detector over a sequence")
    _add_common(p)
    _add_detect(p)
    p.add_argument("-i", "--input", required=True, help="edge list")
    p.add_argument("--method", choices=METHODS, default="ghrg")
    p.add_argument("--explain", action="store_true", help="per-node change description")
    p.add_argument("--trace", default=None, help="per-window trace CSV")
    p.add_argument("--series", default=None, help="scalar series CSV (baseline methods)")
    p.add_argument("-o", "--output", required=True, help="detection report (JSON)")

    p = sub.add_parser("eval", help="precision and recall of detections")
    _add_common(p)
    p.add_argument("--detections", required=True, help="detection report (JSON)")
    p.add_argument("--events", required=True, help="known events CSV (t,label)")
    p.add_argument("--max-delay", type=int, default=4)
    p.add_argument("-o", "--output", required=True, help="precision/recall CSV")

    p = sub.add_parser("sweep", help="detectability sweep over kinds and change sizes")
    _add_common(p)
    _add_detect(p)
    p.add_argument("--windows", type=int, nargs="+", default=None,
                   help="window lengths to sweep (default: --window)")
    p.add_argument("--kinds", choices=KINDS, nargs="+", default=list(KINDS))
    p.add_argument("--delta-mu", type=float, nargs="+",
                   default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.45])
    p.add_argument("--runs", type=int, default=10, help="runs per cell")
    p.add_argument("--methods", choices=METHODS, nargs="+", default=list(METHODS))
    p.add_argument("--length", type=int, default=12)
    p.add_argument("--t-change", type=int, default=8)
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--density", type=float, default=0.2)
    p.add_argument("-o", "--output", required=True, help="sweep table CSV")
    return parser


def _spec_from_args(args) -> ChangeSpec:
    default_before, default_after = DEFAULT_ENDPOINTS[args.kind]
    before = args.mu_before if args.mu_before is not None else default_before
    after = args.mu_after if args.mu_after is not None else default_after
    groups = tuple(args.groups) if args.groups else (args.n // 2, args.n - args.n // 2)
    return ChangeSpec(
        kind=args.kind,
        mu_before=before,
        mu_after=after,
        t_c=args.t_change,
        length=args.length,
        n=args.n,
        density=args.density,
        group_sizes=groups,
        seed=args.seed,
        p_fix=args.p_fix,
    )


def cmd_synth(args):
    write_synthetic(_spec_from_args(args), args.output)


def cmd_ingest(args):
    if bool(args.known_events) != bool(args.events_out):
        raise ValueError("--known-events and --events-out go together")
    events = read_interactions(args.input)
    seq = aggregate_events(events, args.bin_width)
    seq.write_edge_list(args.output)
    logger.info("%d interactions binned into %d snapshots", len(events), len(seq))

    if args.known_events:
        known = pd.read_csv(args.known_events, dtype={"label": str}, keep_default_na=False)
        if "timestamp" not in known.columns:
            raise ValueError(f"{args.known_events} has no 'timestamp' column")
        origin = min(stamp for stamp, _, _ in events)
        frame = pd.DataFrame({
            "t": bin_index(to_seconds(known["timestamp"]), origin, args.bin_width),
            "label": known["label"] if "label" in known.columns else "",
        })
        inside = frame["t"].between(seq.start, seq.end)
        if not inside.all():
            logger.warning("%d known events fall outside the binned range", (~inside).sum())
        _write_csv(frame[inside], args.events_out)


def cmd_fit(args):
    seq = read_edge_list(args.input, args.gap_policy)
    tau = seq.end if args.tau is None else args.tau
    window = window_at(seq, tau, args.window)
    model = fit_ghrg(window, BetaParams(args.alpha, args.beta), _fit_config(args))
    _write_json(model_to_document(model, seq.labels), args.output)


def cmd_detect(args):
    seq = read_edge_list(args.input, args.gap_policy)
    cfg = _detect_config(args)
    if args.method == "ghrg":
        detector = OnlineDetector(GhrgChangeModel(cfg), cfg)
        detections = detector.run(seq)
    else:
        series = ScalarSeries.from_sequence(seq, args.method)
        if args.series:
            _write_csv(series.to_frame(), args.series)
        detector = OnlineDetector(GaussianChangeModel(cfg, args.method), cfg)
        detections = detector.run(series)

    doc = detections_document(detections, cfg, args.method)
    if args.explain and args.method == "ghrg":
        for record, d in zip(doc["detections"], detections):
            record["nodes"] = describe_change(
                window_at(seq, d.t_d, cfg.w),
                detector.models[d.t_d],
                d.t_hat_c,
                cfg.prior,
                seq.labels,
            )
    elif args.explain:
        logger.warning("--explain only applies to the ghrg method")

    _write_json(doc, args.output)
    if args.trace:
        _write_csv(pd.DataFrame([row.to_dict() for row in detector.trace]), args.trace)
    for d in detections:
        print(d.summary())


def cmd_eval(args):
    detections = read_detections(args.detections)
    method = detections[0].method if detections else "ghrg"
    table = precision_recall_table(
        DetectionList.from_detections(detections),
        read_events(args.events),
        args.max_delay,
        method,
    )
    _write_csv(table, args.output)


def cmd_sweep(args):
    windows = args.windows or [args.window]
    base = ChangeSpec(
        t_c=args.t_change,
        length=args.length,
        n=args.n,
        density=args.density,
        group_sizes=(args.n // 2, args.n - args.n // 2),
    )
    tables = []
    for w in windows:
        cfg = SweepConfig(
            detect=_detect_config(args, w),
            base=base,
            methods=tuple(args.methods),
            seed=args.seed,
            workers=args.workers,
            progress=args.progress,
        )
        table = run_sweep(args.kinds, args.delta_mu, args.runs, cfg)
        if len(windows) > 1:
            table["w"] = w
        tables.append(table)
    _write_csv(pd.concat(tables, ignore_index=True), args.output)


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "fit": cmd_fit,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def run(argv: Optional[List[str]] = None) -> int:
    """parse `argv`, run the command and return the exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.workers < 1:
            parser.error("--workers must be positive")
    except SystemExit as e:
        return int(e.code or 0)

    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.progress and level > logging.INFO:
        logging.getLogger(OnlineDetector.__module__).setLevel(logging.INFO)

    try:
        COMMANDS[args.command](args)
    except (NetChangeError, ValueError, OSError) as e:
        logger.error("%s", e)
        return RUNTIME_ERROR
    return 0


def main():
    sys.exit(run(sys.argv[1:]))
