"""Command-line surface: pattern tools, benchmarks, training, eval, sampling.

Every command is deterministic given its flags, seed, and input files when the
deterministic flag is set. Corpora are raw byte files read verbatim; pattern
arguments use "kind:n:l[:c]" strings (e.g. strided:1024:32, fixed:256:16:4,
full:64, local:1024:32).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from sparselm import __version__
from sparselm.bench import BenchError, run_bench
from sparselm.config import (
    ConfigError,
    echo_config,
    load_run_config,
    resolve_run_config,
)
from sparselm.layout import compile_block_layout
from sparselm.model import Model
from sparselm.patterns import parse_pattern_spec, render_pattern, verify_validity
from sparselm.training import (
    CorpusError,
    evaluate_min_context,
    load_run_checkpoint,
    make_periodic_corpus,
    sample,
    train,
)

__all__ = ["main", "load_corpus", "mulaw_encode", "mulaw_decode"]


def load_corpus(path):
    """Raw bytes of a file, verbatim, as a uint8 array (vocab 256)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    if len(data) == 0:
        raise CorpusError(f"corpus too small: {path} is empty")
    return np.frombuffer(data, dtype=np.uint8)


MU = 255.0


def mulaw_encode(pcm16):
    """Standard 8-bit mu-law companding of 16-bit PCM samples."""
    x = np.asarray(pcm16, dtype=np.float64) / 32768.0
    x = np.clip(x, -1.0, 1.0)
    y = np.sign(x) * np.log1p(MU * np.abs(x)) / np.log1p(MU)
    return np.clip(np.floor((y + 1.0) * 128.0), 0, 255).astype(np.uint8)


def mulaw_decode(codes):
    """Inverse companding back to 16-bit PCM (lossy by construction)."""
    y = np.asarray(codes, dtype=np.float64) / 128.0 - 1.0
    x = np.sign(y) * ((1.0 + MU) ** np.abs(y) - 1.0) / MU
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)


def _cmd_verify(args):
    pat = parse_pattern_spec(args.pattern)
    report = verify_validity(pat, args.p_allowed)
    print(report)
    return 0 if report.valid else 1


def _cmd_viz(args):
    pat = parse_pattern_spec(args.pattern)
    if args.layout:
        obj = compile_block_layout(pat, head=args.head, block=args.block)
    else:
        obj = pat
    render_pattern(obj, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_bench(args):
    try:
        rows = run_bench(
            args.pattern,
            d=args.d,
            n_h=args.n_h,
            repeats=args.repeats,
            strategy=args.strategy,
            seed=args.seed,
            include_backward=args.backward,
            log=lambda msg: print(msg, file=sys.stderr),
        )
    except BenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    lines = [json.dumps(row, sort_keys=True) for row in rows]
    print("\n".join(lines))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _resolve(args):
    raw = load_run_config(args.config) if args.config else {}
    return resolve_run_config(
        raw,
        pattern_spec=args.pattern,
        seed=args.seed,
        deterministic=True if args.deterministic else None,
    )


def _cmd_train(args):
    model_cfg, train_cfg = _resolve(args)
    corpus = load_corpus(args.data)
    out_dir = Path(args.out)
    echo_config(out_dir, model_cfg, train_cfg)

    def progress(rec):
        if rec["step"] % args.log_every == 0 or rec["step"] == 1:
            print(
                f"step {rec['step']:6d}  lr {rec['lr']:.3e}  "
                f"bpb {rec['bpb']:7.4f}  grad_norm {rec['grad_norm']:8.4f}  "
                f"{rec['wall_ms']:7.1f} ms"
            )

    train(model_cfg, train_cfg, corpus, out_dir=out_dir, progress=progress)
    print(f"wrote {out_dir / 'checkpoint.bin'} and {out_dir / 'metrics.jsonl'}")
    return 0


def _load_model(path):
    model_cfg, _, params, _ = load_run_checkpoint(path)
    return Model(model_cfg, params)


def _cmd_eval(args):
    model = _load_model(args.checkpoint)
    data = load_corpus(args.data)
    for mc in args.min_context:
        bpb = evaluate_min_context(model, data, min_context=mc)
        print(f"min_context {mc:6d}  bpb {bpb:.6f}")
    return 0


def _cmd_sample(args):
    model = _load_model(args.checkpoint)
    out = sample(model, args.length, temperature=args.temperature, seed=args.seed)
    Path(args.out).write_bytes(out.tobytes())
    print(f"wrote {args.out} ({out.size} bytes)")
    return 0


def _cmd_synth(args):
    corpus = make_periodic_corpus(args.length, args.period, seed=args.seed)
    Path(args.out).write_bytes(corpus.tobytes())
    print(f"wrote {args.out} ({corpus.size} bytes, period {args.period})")
    return 0


def _cmd_mulaw(args):
    raw = Path(args.infile).read_bytes()
    if args.mode == "encode":
        pcm = np.frombuffer(raw, dtype="<i2")
        Path(args.out).write_bytes(mulaw_encode(pcm).tobytes())
    else:
        codes = np.frombuffer(raw, dtype=np.uint8)
        Path(args.out).write_bytes(
            mulaw_decode(codes).astype("<i2").tobytes()
        )
    print(f"wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sparselm",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="check pattern connectivity validity")
    p.add_argument("pattern", help="pattern spec kind:n:l[:c]")
    p.add_argument("--p-allowed", type=int, default=2, dest="p_allowed")
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("viz", help="render a connectivity matrix as PGM")
    p.add_argument("pattern")
    p.add_argument("--out", required=True)
    p.add_argument("--layout", action="store_true", help="render the block layout")
    p.add_argument("--head", type=int, default=None)
    p.add_argument("--block", type=int, default=32)
    p.set_defaults(fn=_cmd_viz)

    p = sub.add_parser("bench", help="time dense vs sparse attention")
    p.add_argument("pattern")
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--n-h", type=int, default=4, dest="n_h")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument(
        "--strategy", default="multihead", choices=("interleaved", "merged", "multihead")
    )
    p.add_argument("--backward", action="store_true", help="time backward too")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write JSON-lines rows here")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("train", help="train on a raw byte corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--pattern", default=None, help="override pattern kind:n:l[:c]")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="bits per byte with a minimum-context sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument(
        "--min-context",
        type=int,
        nargs="*",
        default=[0],
        dest="min_context",
    )
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("sample", help="generate bytes from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("synth", help="write a synthetic periodic byte corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--length", type=int, default=1 << 20)
    p.add_argument("--period", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("mulaw", help="8-bit mu-law companding of 16-bit PCM")
    p.add_argument("mode", choices=("encode", "decode"))
    p.add_argument("infile")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_mulaw)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CorpusError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
