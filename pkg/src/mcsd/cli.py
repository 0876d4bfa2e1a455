"""``mcsd`` command line: train, generate, bench, verify, ablate.

Exit codes: 0 success, 1 a verification or run check failed, 2 usage error,
3 data error (missing or corrupt corpus / checkpoint / config file).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, MCSDError, TrainingError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


def _read_config(path: str) -> dict[str, str]:
    from .kvtext import read_kv

    try:
        return read_kv(path)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc


def _corpus(path: str | None) -> Path:
    from .train import reference_corpus_path

    return Path(path) if path else reference_corpus_path()


def parse_prompt(text: str) -> bytes:
    """Plain text is UTF-8 encoded; ``hex:`` introduces raw bytes."""
    if text.startswith("hex:"):
        try:
            return bytes.fromhex(text[4:])
        except ValueError as exc:
            raise ConfigError(f"bad hex prompt: {exc}") from exc
    return text.encode("utf-8")


def cmd_train(args) -> int:
    from .train import split_config, train

    mcfg, tcfg = split_config(_read_config(args.config) if args.config else {})
    _, rows = train(_corpus(args.corpus), mcfg, tcfg, args.out, progress=True)
    print(f"trained {len(rows)} steps; final loss {rows[-1]['loss']:.4f}; wrote {Path(args.out) / 'model.mcsd'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .model import generate

    params, cfg, _ = load_checkpoint(args.checkpoint)
    prompt = np.frombuffer(parse_prompt(args.prompt), dtype=np.uint8).astype(np.int64)
    out = generate(prompt, args.max_new, params, cfg, sampler=args.sampler, seed=args.seed)
    sys.stdout.buffer.write(bytes(t & 0xFF for t in out))
    sys.stdout.buffer.write(b"\n")
    sys.stdout.flush()
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import BenchSpec, bench_run, write_bench_csv

    try:
        spec = BenchSpec.from_file(args.spec) if args.spec else BenchSpec()
    except OSError as exc:
        raise DataError(f"cannot read bench spec {args.spec}: {exc}") from exc
    rows = bench_run(spec, checkpoint=args.checkpoint)
    write_bench_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_verify

    params = cfg = None
    if args.checkpoint:
        from .checkpoint import load_checkpoint

        params, cfg, _ = load_checkpoint(args.checkpoint)
    results = run_verify(args.seed, params, cfg, quick=args.quick)
    print("check,tolerance,observed,status")
    for r in results:
        print(r.as_row())
    failed = [r.name for r in results if not r.passed]
    print(f"# {len(results) - len(failed)}/{len(results)} passed" + (f"; failed: {' '.join(failed)}" if failed else ""))
    return EXIT_FAIL if failed else EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import ablation_run
    from .train import split_config

    values = _read_config(args.config) if args.config else {}
    values.pop("variant", None)
    mcfg, tcfg = split_config(values)
    variants = tuple(v.strip() for v in args.variants.split(",")) if args.variants else None
    results = ablation_run(_corpus(args.corpus), mcfg, tcfg, args.out, **({"variants": variants} if variants else {}))
    for r in results:
        print(f"{r.variant:13s} params={r.params:>9d} final_loss={r.final_loss:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcsd", description="MCSD language model: training, decoding, benchmarks, checks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a byte-level model")
    t.add_argument("--config", help="key = value config file (model and training keys)")
    t.add_argument("--corpus", help="training text (default: bundled Shakespeare)")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="decode from a checkpoint with constant state")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--prompt", required=True, help="text, or hex:<bytes>")
    g.add_argument("--max-new", type=int, default=200)
    g.add_argument("--sampler", default="greedy", help="greedy | temp:<t> | topk:<k>")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="decode memory/latency/throughput against the attention baseline")
    b.add_argument("--spec", help="key = value bench spec file")
    b.add_argument("--checkpoint", help="benchmark this MCSD checkpoint instead of a random init")
    b.add_argument("--out", required=True, help="output CSV")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--checkpoint")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--quick", action="store_true", help="fewer trials and shorter horizons")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("ablate", help="train every block variant with identical settings")
    a.add_argument("--config")
    a.add_argument("--corpus")
    a.add_argument("--out", required=True)
    a.add_argument("--variants", help="comma-separated subset (default: all five)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except MCSDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
