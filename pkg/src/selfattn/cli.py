"""Command-line entry point: ``selfattn <subcommand> ...``.

Every run writes one manifest (JSON) with the parameters, seed, input/output
hashes and wall-clock time: to ``--manifest`` if given, else next to ``--out``
as ``<out>.manifest.json``, else to stderr.

Exit codes: 0 success, 2 bad input, 3 numeric failure, 4 stage-3 resampling failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from pathlib import Path

from . import constructions as cons
from . import evaluation as ev
from . import formal_langs as fl
from . import restriction as rs
from . import sensitivity as sens
from .modelio import SchemaError, load_model, save_model
from .transformer import ModelError, NumericError, forward, output_probs

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_STAGE3 = 0, 2, 3, 4
LANGUAGES = tuple(fl.LANGUAGE_SYMBOLS)


def sub_seed(seed: int, label: str) -> int:
    """Stable 63-bit seed for one purpose, derived from the run seed."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parse_grid(text: str) -> list[int]:
    """``16:1024:x2`` (geometric), ``16:64:+16`` (arithmetic) or ``16,32,64``."""
    if ":" in text:
        lo, hi, step = text.split(":")
        lo, hi = int(lo), int(hi)
        out = []
        v = lo
        if step.startswith("x"):
            factor = int(step[1:])
            if factor < 2:
                raise ValueError("geometric step must be >= 2")
            while v <= hi:
                out.append(v)
                v *= factor
        else:
            inc = int(step.lstrip("+"))
            if inc < 1:
                raise ValueError("arithmetic step must be >= 1")
            out = list(range(lo, hi + 1, inc))
        return out
    return [int(x) for x in text.split(",") if x]


# --- subcommands ------------------------------------------------------------------------


def cmd_generate(args, man):
    rng = fl.make_rng(sub_seed(args.seed, "generate"))
    lang = args.language
    records = []
    if args.n is not None:
        if lang in ("parity", "dyck2"):
            words = fl.sample_prefixes(lang, args.n, args.p, args.count, rng)
        else:
            words = cons.random_words(lang, args.n, args.count, rng)
    else:
        if lang not in ("parity", "dyck2"):
            raise fl.ConfigError(f"{lang} has no generative process; pass --n for random words")
        sampler = fl.sample_parity if lang == "parity" else fl.sample_dyck
        words = []
        while len(words) < args.count:
            w = sampler(args.p, rng, max_length=args.max_length)
            if w is not None:
                words.append(w)
    for w in words:
        records.append({"word": w, "language": lang, "label": fl.member(lang, w),
                        "length": len(w), "seed": args.seed})
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    _emit(args, man, text)
    return EXIT_OK


def cmd_construct(args, man):
    which = args.which[0]
    N = args.N if args.N is not None else (int(args.which[1]) if len(args.which) > 1 else None)
    if which == "ones_star":
        rep = cons.build_ones_star(args.verify_upto)
    elif which == "anbn":
        rep = cons.build_anbn(args.verify_upto, capacity=args.capacity)
    elif which == "parity":
        if N is None:
            raise fl.ConfigError("parity needs a length bound: --which parity N")
        rep = cons.build_parity_bounded(N)
    else:
        raise fl.ConfigError(f"unknown construction {which!r}")
    save_model(rep.model, args.out)
    man["outputs"][args.out] = sha256_file(args.out)
    summary = {"language": rep.language, "verified_upto": rep.verified_upto,
               "failures": len(rep.failures), "parameter_count": rep.parameter_count,
               "length_bound": rep.length_bound}
    man["result"] = summary
    print(json.dumps(summary))
    return EXIT_OK if not rep.failures else EXIT_NUMERIC


def cmd_forward(args, man):
    model = _load(args, man)
    word = args.word
    if model.config.head == "label" and not word.endswith(model.config.eos):
        word += model.config.eos
    trace = forward(model, word)
    probs = output_probs(model.params, trace.final)
    if model.config.head == "label":
        result = {"word": args.word, "p_accept": float(probs[1]), "accept": bool(probs[1] >= 0.5)}
    else:
        result = {"prefix": args.word, "next": dict(zip(model.config.alphabet, probs.tolist()))}
    if args.dump_trace:
        Path(args.dump_trace).write_text(json.dumps(trace.to_json()))
        man["outputs"][args.dump_trace] = sha256_file(args.dump_trace)
    man["result"] = result
    print(json.dumps(result))
    return EXIT_OK


def cmd_restrict(args, man):
    model = _load(args, man)
    if model.config.weighting != "hard":
        raise rs.UnsupportedModelError("hard attention required")
    params = rs.StageParams.parse(args.stage_params)
    symbols = set(model.config.alpha.word_symbols)
    language = args.language or ("parity" if symbols == {"0", "1"} else "dyck1")
    seed = sub_seed(args.seed, "restrict")
    cx = rs.demonstrate_failure(model, language, args.n, params, rng_seed=seed % (1 << 31),
                                retries=not args.no_retries)
    report = {
        "n": args.n, "language": language, "stage_params": vars(params),
        "reductions": [
            {"stages": r.stages, "census": r.satisfied_census, "c_new": r.c_new, "c_bound": r.c_bound,
             "stage3_resamples": r.stage3_resamples, "trivially_satisfied": r.trivially_satisfied,
             "params": vars(r.params), "free_after": r.rho.free_count}
            for r in cx.reports
        ],
        "dependency": {"depends_on": [d + 1 for d in cx.depends_on]},
        "counterexample": cx.to_json(),
    }
    _emit(args, man, json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_perturb(args, man):
    model = _load(args, man)
    grid = parse_grid(args.n_grid)
    curve = sens.decay_sweep(model, grid, trials=args.trials, rng_seed=sub_seed(args.seed, "perturb") % (1 << 31),
                             threads=args.threads)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "max_delta", "analytic_bound", "rigorous_bound", "slope_running"])
    for n, d, pb, rb, sl in zip(curve.n_values, curve.max_delta, curve.closed_bound,
                                curve.rigorous_bound, curve.running_slopes()):
        w.writerow([n, repr(d), repr(pb), repr(rb), "" if math.isnan(sl) else repr(sl)])
    man["result"] = {"slope": curve.slope, "sound": curve.sound}
    _emit(args, man, buf.getvalue())
    return EXIT_OK


def cmd_evaluate(args, man):
    model = _load(args, man)
    ns = parse_grid(args.n)
    unigram = fl.unigram_dist(args.language, args.p, n_symbols=args.unigram_symbols,
                              seed=sub_seed(args.seed, "unigram") % (1 << 31)).dist
    reports = [ev.model_ce(model, args.language, n, args.samples, args.p,
                           rng_seed=sub_seed(args.seed, f"evaluate:{n}") % (1 << 31),
                           unigram=unigram, threads=args.threads).to_json() for n in ns]
    if args.csv:
        buf = io.StringIO()
        keys = ["n", "model_ce", "optimal_ce", "unigram_ce", "gap", "stderr", "gap_stderr", "capped"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for r in reports:
            w.writerow([r[k] for k in keys])
        Path(args.csv).write_text(buf.getvalue())
        man["outputs"][args.csv] = sha256_file(args.csv)
    out = reports[0] if len(reports) == 1 else {"reports": reports}
    _emit(args, man, json.dumps(out, indent=2) + "\n")
    return EXIT_OK


# --- plumbing ------------------------------------------------------------------------------


def _load(args, man):
    man["inputs"][args.model] = sha256_file(args.model)
    return load_model(args.model)


def _emit(args, man, text: str) -> None:
    if args.out:
        Path(args.out).write_text(text)
        man["outputs"][args.out] = sha256_file(args.out)
    else:
        sys.stdout.write(text)
        man["outputs"]["<stdout>"] = hashlib.sha256(text.encode()).hexdigest()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="selfattn", description="Self-attention expressivity testbed.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, model=True, out_required=False):
        if model:
            p.add_argument("--model", required=True, help="model JSON file")
        p.add_argument("--out", required=out_required)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json or stderr)")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    g = sub.add_parser("generate", help="sample words as JSONL")
    common(g, model=False)
    g.add_argument("--language", choices=LANGUAGES, required=True)
    g.add_argument("--p", type=float, default=0.5)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--n", type=int, help="fixed length (prefixes for parity/dyck2, random words otherwise)")
    g.add_argument("--max-length", type=int, default=10_000)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("construct", help="build and verify a hand-made model")
    common(c, model=False, out_required=True)
    c.add_argument("--which", nargs="+", required=True, metavar="NAME", help="ones_star | anbn | parity N")
    c.add_argument("--N", type=int)
    c.add_argument("--verify-upto", type=int, default=10)
    c.add_argument("--capacity", type=int, default=4096)
    c.set_defaults(func=cmd_construct)

    f = sub.add_parser("forward", help="run one word through a model")
    common(f)
    f.add_argument("--word", required=True)
    f.add_argument("--dump-trace")
    f.set_defaults(func=cmd_forward)

    r = sub.add_parser("restrict", help="depth-reduce a hard-attention model and find a counterexample")
    common(r)
    r.add_argument("--n", type=int, required=True)
    r.add_argument("--stage-params", default="")
    r.add_argument("--language", choices=("parity", "dyck1"))
    r.add_argument("--no-retries", action="store_true")
    r.set_defaults(func=cmd_restrict)

    p = sub.add_parser("perturb", help="single-symbol sensitivity sweep (CSV)")
    common(p)
    p.add_argument("--n-grid", default="16:1024:x2")
    p.add_argument("--trials", type=int, default=4)
    p.set_defaults(func=cmd_perturb)

    e = sub.add_parser("evaluate", help="cross-entropy against the exact oracle")
    common(e)
    e.add_argument("--language", choices=("parity", "dyck2"), required=True)
    e.add_argument("--p", type=float, default=0.5)
    e.add_argument("--n", default="64", help="prefix length or a grid (16:256:x2, 8,16)")
    e.add_argument("--samples", type=int, default=10_000)
    e.add_argument("--unigram-symbols", type=int, default=200_000)
    e.add_argument("--csv", help="also write a CE-vs-n table")
    e.set_defaults(func=cmd_evaluate)
    return ap


def dispatch(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        if not exc.code:
            raise
        # argparse already printed usage; still leave a manifest on stderr
        man = {"subcommand": None, "argv": list(sys.argv[1:] if argv is None else argv),
               "exit_code": EXIT_INPUT, "error": {"type": "UsageError"}}
        sys.stderr.write(json.dumps(man, indent=2, sort_keys=True) + "\n")
        return EXIT_INPUT
    man = {"subcommand": args.command,
           "params": {k: v for k, v in vars(args).items() if k not in ("func", "command")},
           "seed": args.seed, "inputs": {}, "outputs": {}}
    start = time.perf_counter()
    code = EXIT_OK
    try:
        code = args.func(args, man)
    except rs.Stage3Failure as exc:
        code = _fail(man, EXIT_STAGE3, exc, census=exc.census)
    except (NumericError, sens.ConvergenceError, FloatingPointError, OverflowError) as exc:
        code = _fail(man, EXIT_NUMERIC, exc)
    except (fl.LanguageInputError, fl.ConfigError, SchemaError, ModelError, rs.RestrictionError,
            OSError, ValueError, KeyError) as exc:
        code = _fail(man, EXIT_INPUT, exc)
    man["exit_code"] = code
    man["duration_s"] = time.perf_counter() - start
    _write_manifest(args, man)
    return code


def _fail(man, code, exc, **extra):
    print(f"error: {exc}", file=sys.stderr)
    man["error"] = {"type": type(exc).__name__, "message": str(exc), **extra}
    return code


def _write_manifest(args, man) -> None:
    text = json.dumps(man, indent=2, sort_keys=True, default=str) + "\n"
    path = args.manifest or (f"{args.out}.manifest.json" if args.out else None)
    if path:
        Path(path).write_text(text)
    else:
        sys.stderr.write(text)


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
