"""Command line interface: ``dptopk {sample,probs,sweep,bench,gen-zipf}``.

Exit status is 0 on success, 2 on usage errors and 1 on data errors.
"""

import argparse
import csv
import json
import logging
import sys

import numpy as np

from dptopk.analysis import Predicate, classify_subset, predicate_probability
from dptopk.canonical import UnsupportedOperation, class_loss, exact_class_distribution
from dptopk.harness import (
    MECHANISMS,
    ZIPF_D,
    ZIPF_SCALE,
    ExperimentSpec,
    LoadError,
    Row,
    bench,
    run_sweep,
    select_once,
    stream,
    zipf_values,
)
from dptopk.noise import NoiseKind


class UsageError(Exception):
    pass


def _common(parser, multi_mechanism=False):
    src = parser.add_argument_group("input")
    src.add_argument("--input", help="score file; default is a generated Zipf vector")
    src.add_argument("--format", default="lines", help="'lines' or 'csv:<column>' (default: lines)")
    src.add_argument("--zipf-d", type=int, default=ZIPF_D)
    src.add_argument("--zipf-s", type=float, default=0.0)
    src.add_argument("--zipf-scale", type=float, default=ZIPF_SCALE)
    src.add_argument("--delta-minus", type=float, default=1.0, help="largest per-user score decrease")
    src.add_argument("--delta-plus", type=float, default=1.0, help="largest per-user score increase")

    mech = parser.add_argument_group("mechanism")
    if multi_mechanism:
        mech.add_argument("--mechanism", action="append", choices=MECHANISMS, help="repeatable")
    else:
        mech.add_argument("--mechanism", choices=MECHANISMS, default="canonical")
    mech.add_argument("--k", type=int, required=True)
    mech.add_argument("--epsilon", type=float, action="append", help="repeatable (default: 1.0)")
    mech.add_argument("--gamma", type=float, default=0.5)
    mech.add_argument("--noise", choices=[n.value for n in NoiseKind], help="default depends on mechanism")
    mech.add_argument("--seed", type=int, default=0)
    mech.add_argument("--json", action="store_true", help="emit JSON Lines instead of CSV")


def build_parser():
    parser = argparse.ArgumentParser(prog="dptopk", description="Differentially private top-k selection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="draw one k-subset and print it as JSON")
    _common(p)

    p = sub.add_parser("probs", help="exact predicate (or class) probabilities for CANONICAL")
    _common(p)
    p.add_argument("--predicate", action="append", choices=["TOP", "GREAT", "GOOD"])
    p.add_argument("--classes", action="store_true", help="print per-class probabilities instead")
    p.add_argument("--min-prob", type=float, default=0.0, help="with --classes, hide smaller classes")

    p = sub.add_parser("sweep", help="predicate probabilities across mechanisms and epsilons")
    _common(p, multi_mechanism=True)
    p.add_argument("--predicate", action="append", choices=["TOP", "GREAT", "GOOD"])
    p.add_argument("--trials", type=int, default=10_000)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--exact", dest="exact", action="store_true", default=True)
    mode.add_argument("--mc", dest="exact", action="store_false")
    p.add_argument("--no-timing", action="store_true", help="write 0 for wall_time_ns (byte-stable output)")

    p = sub.add_parser("bench", help="median runtime of single mechanism runs")
    _common(p, multi_mechanism=True)
    p.add_argument("--runs", type=int, default=10)

    p = sub.add_parser("gen-zipf", help="write a Zipf score vector, one value per line")
    p.add_argument("--d", type=int, default=ZIPF_D)
    p.add_argument("--s", type=float, default=0.0)
    p.add_argument("--scale", type=float, default=ZIPF_SCALE)
    p.add_argument("--output", help="file to write (default: stdout)")
    return parser


def _spec(args, **extra):
    mechanisms = args.mechanism if isinstance(args.mechanism, list) or args.mechanism is None else [args.mechanism]
    try:
        return ExperimentSpec(
            mechanisms=mechanisms or ["canonical"],
            k=args.k,
            epsilons=args.epsilon or [1.0],
            input_path=args.input,
            input_format=args.format,
            zipf_d=args.zipf_d,
            zipf_s=args.zipf_s,
            zipf_scale=args.zipf_scale,
            gamma=args.gamma,
            noise=args.noise,
            seed=args.seed,
            delta_minus=args.delta_minus,
            delta_plus=args.delta_plus,
            **extra,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load(spec):
    try:
        return spec.load()
    except LoadError:
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _write_rows(rows, fields, as_json, out):
    if as_json:
        for r in rows:
            out.write(json.dumps(r, sort_keys=False) + "\n")
        return
    writer = csv.DictWriter(out, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def cmd_sample(args, out):
    spec = _spec(args)
    scores = _load(spec)
    mech = spec.mechanisms[0]
    gamma = spec.gamma_for(mech)
    rng = stream(spec.seed)
    subset, value = select_once(mech, scores, spec.k, spec.epsilons[0], gamma, spec.noise_for(mech), rng)
    cls = classify_subset(subset, scores)
    record = {
        "mechanism": mech,
        "epsilon": spec.epsilons[0],
        "indices": [i + 1 for i in sorted(subset)],
        "h": cls.h,
        "t": cls.t,
        "loss": class_loss(cls.h, cls.t, gamma, scores),
        "noisy_value": value,
    }
    out.write(json.dumps(record) + "\n")


def cmd_probs(args, out):
    spec = _spec(args)
    scores = _load(spec)
    mech = spec.mechanisms[0]
    if mech not in ("canonical", "canonical-g1"):
        raise UsageError("probs supports only canonical and canonical-g1; use sweep for the others")
    rows = []
    for eps in spec.epsilons:
        try:
            dist = exact_class_distribution(scores, spec.k, eps, spec.gamma_for(mech), spec.noise_for(mech))
        except UnsupportedOperation as exc:
            raise UsageError(str(exc)) from exc
        if args.classes:
            p = np.exp(dist.log_probs)
            for h, tt in zip(*np.nonzero(p > args.min_prob)):
                rows.append({"epsilon": eps, "h": int(h), "t": int(tt) + spec.k, "probability": float(p[h, tt])})
        else:
            for name in args.predicate or ["TOP", "GREAT", "GOOD"]:
                prob = predicate_probability(dist, Predicate(name, spec.k))
                rows.append(Row(mech, eps, name, prob, 0.0, 0).as_dict())
    fields = ["epsilon", "h", "t", "probability"] if args.classes else list(Row.FIELDS)
    _write_rows(rows, fields, args.json, out)


def cmd_sweep(args, out):
    spec = _spec(
        args,
        trials=args.trials,
        predicates=args.predicate or ["TOP", "GREAT", "GOOD"],
        exact=args.exact,
        timing=not args.no_timing,
    )
    scores = _load(spec)
    rows = run_sweep(spec, scores)
    _write_rows([r.as_dict() for r in rows], list(Row.FIELDS), args.json, out)


def cmd_bench(args, out):
    spec = _spec(args, bench_runs=args.runs)
    scores = _load(spec)
    rows = bench(spec, scores)
    _write_rows([r.as_dict() for r in rows], ["mechanism", "d", "k", "median_ns", "runs"], args.json, out)


def cmd_gen_zipf(args, out):
    try:
        values = zipf_values(args.d, args.s, args.scale)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    text = "".join(f"{v!r}\n" for v in values.tolist())
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        out.write(text)


COMMANDS = {
    "sample": cmd_sample,
    "probs": cmd_probs,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "gen-zipf": cmd_gen_zipf,
}


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        parser.error(str(exc))
    except LoadError as exc:
        print(f"dptopk: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
