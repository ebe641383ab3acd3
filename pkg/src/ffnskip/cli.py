"""Command-line surface: generation, profiling, threshold sweeps, benchmarks.

Every command is deterministic given an explicit --seed, and every JSON
report embeds the seed, the model fingerprint, and the full flag set.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import run_benchmark
from .metrics import compute_degeneration
from .model import Transformer
from .modelfile import load_model
from .profiling import detect_cold_regions, profile_similarity
from .skipping import (
    DecodeRequest,
    Full,
    InputAdaptive,
    RandomAnywhere,
    RandomNonCold,
    Sampling,
    SkipConfig,
    generate,
    skip_ratio,
)
from .tokenizer import ByteTokenizer


def _add_model_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", required=True, help="model file path")


def _add_decode_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--prompt", help="prompt text")
    parser.add_argument("--prompt-file", help="file with prompt text")
    parser.add_argument("--max-new-tokens", type=int, default=64)
    parser.add_argument("--warmup", type=int, help="warm-up token index")
    parser.add_argument("--cold-s", type=int, help="first skippable layer")
    parser.add_argument("--cold-e", type=int, help="end (exclusive) of skippable layers")
    parser.add_argument("--max-skip-k", type=int, help="cap on skipped layers per token")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--temperature", type=float, default=0.0, help="0 = greedy")


def _add_policy_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--policy",
        choices=["full", "random", "random-noncold", "adaptive"],
        default="full",
    )
    parser.add_argument("--p", type=float, help="skip probability (random policies)")
    parser.add_argument("--threshold", type=float, help="similarity threshold (adaptive)")


def _build_policy(args: argparse.Namespace, parser: argparse.ArgumentParser):
    cold_given = args.cold_s is not None or args.cold_e is not None
    if cold_given and (args.cold_s is None or args.cold_e is None):
        parser.error("--cold-s and --cold-e must be given together")
    if cold_given and args.cold_s > args.cold_e:
        parser.error(f"--cold-s {args.cold_s} must not exceed --cold-e {args.cold_e}")

    if args.policy == "full":
        return Full()
    if args.policy == "random":
        if args.p is None:
            parser.error("--policy random requires --p")
        return RandomAnywhere(p=args.p, seed=args.seed, warm_up_index=args.warmup or 0)
    if args.policy == "random-noncold":
        if args.p is None or not cold_given:
            parser.error("--policy random-noncold requires --p, --cold-s and --cold-e")
        return RandomNonCold(
            p=args.p,
            cold_s=args.cold_s,
            cold_e=args.cold_e,
            seed=args.seed,
            warm_up_index=args.warmup or 0,
        )
    if args.threshold is None or not cold_given:
        parser.error("--policy adaptive requires --threshold, --cold-s and --cold-e")
    return InputAdaptive(
        SkipConfig(
            sim_threshold=args.threshold,
            cold_s=args.cold_s,
            cold_e=args.cold_e,
            warm_up_index=args.warmup,
            max_skip_k=args.max_skip_k,
        )
    )


def _load_transformer(path: str) -> Transformer:
    config, weights = load_model(path)
    return Transformer(config, weights)


def _read_prompt(args: argparse.Namespace, parser: argparse.ArgumentParser) -> str:
    if args.prompt is not None and args.prompt_file is not None:
        parser.error("--prompt and --prompt-file are mutually exclusive")
    if args.prompt is not None:
        return args.prompt
    if args.prompt_file is not None:
        return Path(args.prompt_file).read_text(encoding="utf-8")
    parser.error("one of --prompt or --prompt-file is required")
    raise AssertionError("unreachable")


def _report_meta(model: Transformer, args: argparse.Namespace) -> dict:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    return {
        "seed": args.seed,
        "model_fingerprint": model.fingerprint,
        "flags": flags,
    }


def _build_request(model: Transformer, args, parser) -> DecodeRequest:
    tokenizer = ByteTokenizer(model.config.vocab_size)
    text = _read_prompt(args, parser)
    prompt = [tokenizer.bos_id] + tokenizer.encode(text)
    return DecodeRequest(
        prompt=tuple(prompt),
        max_new_tokens=args.max_new_tokens,
        sampling=Sampling(temperature=args.temperature, seed=args.seed),
        eos_id=tokenizer.eos_id,
    )


def cmd_generate(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    policy = _build_policy(args, parser)
    model = _load_transformer(args.model)
    request = _build_request(model, args, parser)
    result = generate(model, request, policy)
    tokenizer = ByteTokenizer(model.config.vocab_size)
    sys.stdout.write(tokenizer.decode_text(result.tokens) + "\n")
    if args.trace:
        result.trace.write(f"{args.trace}.jsonl")
        summary = result.trace.summary()
        summary["meta"] = _report_meta(model, args)
        Path(f"{args.trace}.summary.json").write_text(
            json.dumps(summary, indent=2) + "\n", encoding="utf-8"
        )
    return 0


def cmd_profile(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    model = _load_transformer(args.model)
    tokenizer = ByteTokenizer(model.config.vocab_size)
    lines = [
        line
        for line in Path(args.calibration).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not lines:
        raise ValueError(f"calibration file {args.calibration} holds no prompts")
    prompts = [[tokenizer.bos_id] + tokenizer.encode(line) for line in lines]
    profile = profile_similarity(
        model, prompts, args.tokens_per_prompt, jobs=args.jobs
    )
    out_json = args.out_json or "profile.json"
    out_csv = args.out_csv or "profile.csv"
    profile.write_json(out_json, extra={"meta": _report_meta(model, args)})
    profile.write_csv(out_csv)
    sys.stdout.write(f"profiled {len(prompts)} prompts -> {out_json}, {out_csv}\n")
    if args.detect:
        report = detect_cold_regions(
            profile,
            sigma_enter=args.sigma_enter,
            slack=args.slack,
            min_margin=args.min_margin,
        )
        doc = report.to_dict()
        doc["meta"] = _report_meta(model, args)
        out = args.detect_out or "cold_regions.json"
        Path(out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        sys.stdout.write(
            f"cold regions: cold_s={report.cold_s} cold_e={report.cold_e}"
            + (" (disabled)\n" if report.disabled else "\n")
        )
    return 0


def cmd_sweep(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if not args.thresholds:
        parser.error("--thresholds requires at least one value")
    if args.cold_s is None or args.cold_e is None:
        parser.error("sweep requires --cold-s and --cold-e")
    if args.cold_s > args.cold_e:
        parser.error(f"--cold-s {args.cold_s} must not exceed --cold-e {args.cold_e}")
    model = _load_transformer(args.model)
    request = _build_request(model, args, parser)

    def run_threshold(threshold: float) -> dict:
        policy = InputAdaptive(
            SkipConfig(
                sim_threshold=threshold,
                cold_s=args.cold_s,
                cold_e=args.cold_e,
                warm_up_index=args.warmup,
                max_skip_k=args.max_skip_k,
            )
        )
        result = generate(model, request, policy)
        decode_time = sum(result.step_seconds)
        degeneration = compute_degeneration(result.tokens)
        return {
            "threshold": threshold,
            "skip_ratio": skip_ratio(result.trace),
            "tokens_per_second": len(result.tokens) / decode_time if decode_time else 0.0,
            "degeneration": degeneration.to_dict(),
        }

    thresholds = sorted(args.thresholds)
    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(run_threshold, thresholds))
    else:
        rows = [run_threshold(t) for t in thresholds]

    header = f"{'threshold':>10}  {'skip_ratio':>10}  {'tokens/s':>10}  {'rep3':>8}"
    sys.stdout.write(header + "\n")
    for row in rows:
        rep3 = row["degeneration"]["ngram_repetition"].get("3")
        rep3_text = f"{rep3:8.4f}" if rep3 is not None else "     n/a"
        sys.stdout.write(
            f"{row['threshold']:>10.4f}  {row['skip_ratio']:>10.4f}  "
            f"{row['tokens_per_second']:>10.2f}  {rep3_text}\n"
        )
    if args.out_json:
        doc = {"rows": rows, "meta": _report_meta(model, args)}
        Path(args.out_json).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_bench(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    policy = _build_policy(args, parser)
    model = _load_transformer(args.model)
    request = _build_request(model, args, parser)
    report = run_benchmark(model, request, policy, runs=args.runs)
    doc = report.to_dict()
    doc["meta"] = _report_meta(model, args)
    sys.stdout.write(
        f"policy={report.policy} skip_ratio={report.skip_ratio:.4f} "
        f"tokens/s={report.tokens_per_second:.2f} "
        f"latency_mean={report.latency_mean_s * 1e3:.2f}ms "
        f"latency_p95={report.latency_p95_s * 1e3:.2f}ms "
        f"ffn_executed={report.ffn_executed} ffn_skipped={report.ffn_skipped}\n"
    )
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ffnskip",
        description="Transformer decoding with adaptive feed-forward skipping",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="decode text under a skip policy")
    _add_model_arg(p_gen)
    _add_decode_args(p_gen)
    _add_policy_args(p_gen)
    p_gen.add_argument("--trace", help="prefix for trace .jsonl and .summary.json files")
    p_gen.set_defaults(func=cmd_generate)

    p_prof = sub.add_parser("profile", help="measure per-layer FFN saturation")
    _add_model_arg(p_prof)
    p_prof.add_argument("--calibration", required=True, help="text file, one prompt per line")
    p_prof.add_argument("--tokens-per-prompt", type=int, default=32)
    p_prof.add_argument("--out-json")
    p_prof.add_argument("--out-csv")
    p_prof.add_argument("--detect", action="store_true", help="also detect cold regions")
    p_prof.add_argument("--detect-out")
    p_prof.add_argument("--sigma-enter", type=float, default=0.90)
    p_prof.add_argument("--slack", type=float, default=0.01)
    p_prof.add_argument("--min-margin", type=int, default=2)
    p_prof.add_argument("--seed", type=int, default=0)
    p_prof.add_argument("--jobs", type=int, default=1)
    p_prof.set_defaults(func=cmd_profile)

    p_sweep = sub.add_parser("sweep", help="skip ratio and speed across thresholds")
    _add_model_arg(p_sweep)
    _add_decode_args(p_sweep)
    p_sweep.add_argument("--thresholds", type=float, nargs="+", required=True)
    p_sweep.add_argument("--out-json")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep)

    p_bench = sub.add_parser("bench", help="throughput/latency under a policy")
    _add_model_arg(p_bench)
    _add_decode_args(p_bench)
    _add_policy_args(p_bench)
    p_bench.add_argument("--runs", type=int, default=3)
    p_bench.add_argument("--out-json")
    p_bench.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # runtime failures map to exit code 1
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
