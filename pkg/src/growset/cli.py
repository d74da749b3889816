"""Command-line entry point: ``growset <command> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shlex
import sys
from typing import List, Optional

from . import __version__
from .cleaner import CommandHook
from .core import PipelineConfig, parse_config_text
from .errors import ConfigError, DimMismatch, GrowsetError
from .formats import read_manifest, read_stream, write_manifest
from .pipeline import GrowthState
from .sampler import cost_fraction, dynamic_plan, static_plan, write_plan
from .synth import SynthSpec, TruthHook, truth_path_for, write_synth

log = logging.getLogger("growset")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

# CLI flag dest -> PipelineConfig field
_CONFIG_FLAGS = {
    "mode": "mode", "k": "k", "mean_mode": "mean_mode", "composition": "composition",
    "delta_mode": "delta_mode", "delta": "delta", "z": "z", "warmup": "warmup", "M": "M",
    "ef_construction": "ef_construction", "ef_search": "ef_search", "seed": "seed",
    "progress_every": "progress_every", "hook": "hook",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _seed_arg(parser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="64-bit seed (falls back to config file, then $GROWSET_SEED, then 0)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="growset", description="Online dataset growth with cleaning and gain-based sampling.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("grow", help="run the growth pipeline over an embedding stream")
    g.add_argument("--input", required=True, help="embedding stream file (GSEB)")
    g.add_argument("--config", help="flat key = value config file; flags override it")
    g.add_argument("--out", required=True, help="manifest JSONL to write")
    g.add_argument("--checkpoint", help="write the final (and periodic) checkpoint here")
    g.add_argument("--resume", help="resume from this checkpoint, skipping records it has seen")
    g.add_argument("--stats", help="stats JSON path (default: <out>.stats.json)")
    g.add_argument("--rejected", help="rejected-record log (default: <out>.rejected.jsonl)")
    g.add_argument("--mode", choices=["multimodal", "classification", "unconditioned"],
                   help="must match the stream header if given")
    g.add_argument("--k", type=int, help="neighbor count (default 4)")
    g.add_argument("--mean-mode", choices=["arithmetic", "harmonic"])
    g.add_argument("--composition",
                   choices=["info_only", "image_text_average", "info_entropy_average", "info_alignment"])
    g.add_argument("--delta-mode", choices=["fixed", "online_stats"])
    g.add_argument("--delta", type=float, help="similarity threshold (fixed mode) or warmup fallback")
    g.add_argument("--z", type=float, help="online threshold = mean - z * std")
    g.add_argument("--warmup", type=int, help="scores observed before the online threshold applies")
    g.add_argument("--M", type=int, help="HNSW max degree (default 16)")
    g.add_argument("--ef-construction", type=int)
    g.add_argument("--ef-search", type=int)
    g.add_argument("--progress-every", type=int, help="records between progress reports/checkpoints")
    g.add_argument("--hook", help="relabel command; JSON line in on stdin, JSON line out on stdout")
    g.add_argument("--threads", type=int, default=1, help="max concurrent relabel-hook calls")
    g.add_argument("--json", action="store_true", help="print stats JSON to stdout")
    _seed_arg(g)

    s = sub.add_parser("sample", help="build a training plan from a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=["static", "dynamic"], required=True)
    s.add_argument("--target", type=int, help="number of records (static)")
    s.add_argument("--epochs", type=int, help="number of epochs (dynamic)")
    s.add_argument("--out", required=True, help="plan JSONL, one epoch per line")
    s.add_argument("--json", action="store_true", help="print summary JSON to stdout")
    _seed_arg(s)

    y = sub.add_parser("synth", help="generate a synthetic embedding stream")
    y.add_argument("--spec", required=True, help="flat key = value synth spec")
    y.add_argument("--out", required=True, help="stream file; ground truth goes to <out>.truth.jsonl")
    _seed_arg(y)

    b = sub.add_parser("bench", help="per-step index latency at growing sizes")
    b.add_argument("--sizes", default="10000,100000", help="comma-separated index sizes")
    b.add_argument("--dim", type=int, default=32)
    b.add_argument("--k", type=int, default=4)
    b.add_argument("--steps", type=int, default=200, help="steps per timed batch")
    b.add_argument("--rounds", type=int, default=5, help="timed batches per size (median reported)")
    _seed_arg(b)

    o = sub.add_parser("oracle-check", help="exact-oracle monotonicity and HNSW recall checks")
    o.add_argument("--points", type=int, default=200)
    o.add_argument("--k", type=int, default=4)
    o.add_argument("--probes", type=int, default=200)
    o.add_argument("--dim", type=int, default=16)
    o.add_argument("--recall-points", type=int, default=10000)
    o.add_argument("--recall-dim", type=int, default=32)
    o.add_argument("--recall-k", type=int, default=10)
    o.add_argument("--json", action="store_true")
    _seed_arg(o)

    t = sub.add_parser("truth-hook", help="relabel hook process serving synth ground truth")
    t.add_argument("--truth", required=True, help="<stream>.truth.jsonl sidecar")
    return p


def _resolve_seed(flag: Optional[int], file_value=None) -> int:
    if flag is not None:
        return flag
    if file_value is not None:
        return int(file_value, 0) if isinstance(file_value, str) else int(file_value)
    env = os.environ.get("GROWSET_SEED")
    if env:
        try:
            return int(env, 0)
        except ValueError:
            raise ConfigError(f"GROWSET_SEED is not an integer: {env!r}") from None
    return 0


def _build_config(args, header) -> PipelineConfig:
    values = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    for dest, key in _CONFIG_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None and key != "seed":
            values[key] = v
    values["seed"] = _resolve_seed(args.seed, values.get("seed"))
    mode = values.get("mode")
    if mode is not None and mode != header.mode:
        raise DimMismatch(f"config mode {mode!r} does not match stream mode {header.mode!r}")
    values["mode"] = header.mode
    values["dim"] = header.dim
    values["paired_dim"] = header.paired_dim or None
    return PipelineConfig.from_mapping(values)


def _write_atomic(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def cmd_grow(args) -> int:
    reader = read_stream(args.input)
    hook = None
    if args.resume:
        with open(args.resume, "rb") as fh:
            state = GrowthState.resume(fh.read())
        if state.dim is not None and state.dim != reader.dim:
            raise DimMismatch(f"stream dim {reader.dim} does not match checkpoint dim {state.dim}")
        if state.config.mode != reader.mode:
            raise DimMismatch(f"stream mode {reader.mode!r} does not match checkpoint")
        config = state.config
        hook_cmd = args.hook or config.hook
    else:
        config = _build_config(args, reader.header)
        state = GrowthState(config)
        hook_cmd = config.hook
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    if hook_cmd:
        hook = CommandHook(shlex.split(hook_cmd), workers=args.threads)
        state.hook = hook

    rejected_path = args.rejected or args.out + ".rejected.jsonl"
    skip = state.counters.seen if args.resume else 0
    records = iter(reader)
    for _ in range(skip):
        if next(records, None) is None:
            break

    def progress(st: GrowthState) -> None:
        c = st.counters
        log.info("seen=%d admitted=%d rejected=%d relabeled=%d threshold=%.4f",
                 c.seen, c.admitted, c.rejected, c.relabeled, st.threshold)
        if args.checkpoint:
            _write_atomic(args.checkpoint, st.checkpoint())

    with open(rejected_path, "a" if args.resume else "w", encoding="utf-8", newline="\n") as rej:
        def on_reject(rec, result) -> None:
            score = result.score if result.score is not None and math.isfinite(result.score) else None
            rej.write(json.dumps({"id": rec.id, "reason": result.reason, "detail": result.detail,
                                  "score": score}, separators=(",", ":")) + "\n")
        try:
            state.grow(records, progress=progress, on_reject=on_reject, threads=args.threads)
        except (OSError, GrowsetError):
            if args.checkpoint:
                _write_atomic(args.checkpoint, state.checkpoint())
                log.error("aborted; checkpoint of %d seen records written to %s",
                          state.counters.seen, args.checkpoint)
            raise
        finally:
            if hook is not None:
                hook.close()

    write_manifest(state.manifest, args.out)
    stats = state.stats()
    with open(args.stats or args.out + ".stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.checkpoint:
        _write_atomic(args.checkpoint, state.checkpoint())
    if args.json:
        print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_sample(args) -> int:
    entries = read_manifest(args.manifest)
    gains = [e.gain for e in entries]
    seed = _resolve_seed(args.seed)
    if args.mode == "static":
        if args.target is None:
            raise UsageError("static sampling requires --target")
        plan = static_plan(gains, args.target, seed)
    else:
        if args.epochs is None:
            raise UsageError("dynamic sampling requires --epochs")
        if args.epochs < 1:
            raise UsageError("--epochs must be >= 1")
        plan = dynamic_plan(gains, args.epochs, seed)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        write_plan(plan, fh)
    summary = {"n": len(gains), "mode": args.mode,
               "epochs": [{"epoch": e.epoch, "phase": e.phase, "count": len(e.ordinals)} for e in plan.epochs]}
    if args.mode == "dynamic" and len(plan.epochs) >= 2 and gains:
        two = plan.epochs[0].ordinals, plan.epochs[1].ordinals
        summary["two_epoch_cost"] = (len(two[0]) + len(two[1])) / (2 * len(gains))
        summary["cost_fraction"] = cost_fraction(plan, len(gains))
    print(json.dumps(summary, sort_keys=True) if args.json else _human_summary(summary))
    return EXIT_OK


def _human_summary(summary: dict) -> str:
    lines = [f"{e['phase']:>15} epoch {e['epoch']}: {e['count']} records" for e in summary["epochs"]]
    if "two_epoch_cost" in summary:
        lines.append(f"two-epoch cost: {summary['two_epoch_cost']:.4f} of full-data training")
    return "\n".join(lines)


def cmd_synth(args) -> int:
    with open(args.spec, encoding="utf-8") as fh:
        text = fh.read()
    spec = SynthSpec.from_text(text)
    if args.seed is not None:
        spec = SynthSpec(**{**spec.__dict__, "seed": args.seed})
    elif "seed" not in parse_config_text(text) and os.environ.get("GROWSET_SEED"):
        spec = SynthSpec(**{**spec.__dict__, "seed": _resolve_seed(None)})
    data = write_synth(spec, args.out)
    print(json.dumps({"records": len(data.records), "noise": len(data.noise_ids),
                      "duplicates": len(data.duplicate_ids), "truth": truth_path_for(args.out)}))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import measure_growth

    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    if not sizes or min(sizes) < 1:
        raise UsageError("--sizes needs at least one positive size")
    if args.dim < 1 or args.k < 1 or args.steps < 1 or args.rounds < 1:
        raise UsageError("--dim, --k, --steps and --rounds must be positive")
    report = measure_growth(sizes, dim=args.dim, seed=_resolve_seed(args.seed), k=args.k,
                            steps=args.steps, rounds=args.rounds)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .oracle import monotonicity_check, recall_check

    if args.k < 1 or args.points < 2 * args.k:
        raise UsageError("--points must be >= 2 * --k and --k >= 1")
    seed = _resolve_seed(args.seed)
    mono = monotonicity_check(args.points, args.k, args.probes, args.dim, seed=seed)
    rec = recall_check(args.recall_points, args.recall_dim, args.recall_k, seed=seed)
    if args.json:
        print(json.dumps({"monotonicity": mono, "recall": rec}, sort_keys=True))
    else:
        v = mono["violations"]
        print(f"monotonicity ({mono['subset']} of {mono['points']} points, k={mono['k']}): "
              f"violations arithmetic={v['arithmetic']} harmonic={v['harmonic']} "
              f"{'PASS' if mono['passed'] else 'FAIL'}")
        print(f"recall@{rec['k']} on {rec['points']} points: {rec['recall']:.4f} "
              f"(>= {rec['threshold']}) {'PASS' if rec['passed'] else 'FAIL'}")
    return EXIT_OK if mono["passed"] and rec["passed"] else EXIT_DATA


def cmd_truth_hook(args) -> int:
    hook = TruthHook(args.truth)
    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        sys.stdout.write(json.dumps(hook.response(req.get("id", ""))) + "\n")
        sys.stdout.flush()
    return EXIT_OK


COMMANDS = {
    "grow": cmd_grow, "sample": cmd_sample, "synth": cmd_synth, "bench": cmd_bench,
    "oracle-check": cmd_oracle, "truth-hook": cmd_truth_hook,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"growset: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"growset: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GrowsetError as exc:
        print(f"growset: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"growset: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - last-resort diagnostic
        log.exception("internal error")
        print(f"growset: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
