"""Command line entry point: ``igt <command> [flags]``.

Config precedence is defaults < run manifest < ``--config`` file < flags.
Errors are printed as one line, ``igt: error: <kind>: <message>``; usage
errors exit with 2, runtime failures with 1.
"""

from __future__ import annotations

import os
import sys

# numpy reads these when it loads, so the cap must be set before any import below
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _cap_threads() -> None:
    n = os.environ.get("IGT_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, n)


_cap_threads()

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

from .corpus import BOS, tokenize  # noqa: E402
from .decode import DecodeConfig, generate, trap_prompts  # noqa: E402
from .experiment import ExperimentConfig, Run, RunExistsError, bench, gen_corpus, pretrain, run_all, train  # noqa: E402
from .model import IdeaGatedLM  # noqa: E402
from .train import ARMS, eval_windows, evaluate_ppl  # noqa: E402
from .xray import xray  # noqa: E402

log = logging.getLogger("igt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="seed for every random choice in the run")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="igt", description="Idea-gated transformer experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus and vocabulary")
    _common(p)

    p = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    _common(p)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("train", help="fine-tune one arm on the frozen backbone")
    _common(p)
    p.add_argument("--arm", choices=ARMS, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha", type=float, help="terminal alpha of the ramp (gated arm)")

    p = sub.add_parser("eval", help="validation loss and perplexity of a checkpoint")
    _common(p)
    p.add_argument("--arm", choices=ARMS + ("backbone",), default="gated")
    p.add_argument("--checkpoint", type=Path, help="evaluate this file instead of the run's arm")
    p.add_argument("--alpha", type=float, help="gate strength (default: inference alpha, 0 for baseline)")

    p = sub.add_parser("bench-drift", help="adversarial drift benchmark over both arms")
    _common(p)
    p.add_argument("--alpha", type=float, help="inference alpha of the gated arm")
    p.add_argument("--prompts", type=int, help="number of trap prompts")

    p = sub.add_parser("xray", help="per-token gate adjustments at the end of a prompt")
    _common(p)
    p.add_argument("--prompt", help="prompt text (default: the first trap prompt)")
    p.add_argument("--alpha", type=float, help="alpha* for the gated distribution")
    p.add_argument("-k", type=int, default=10, help="length of the boosted and suppressed lists")

    p = sub.add_parser("generate", help="continue a prompt with one arm")
    _common(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--arm", choices=ARMS, default="gated")
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--mode", choices=("greedy", "sample"))

    p = sub.add_parser("run-all", help="gen-corpus, pretrain, both arms and bench-drift")
    _common(p)
    return parser


def resolve_config(args, run: Run) -> ExperimentConfig:
    cfg = run.config() if run.manifest_path.exists() else ExperimentConfig()
    if args.config is not None:
        try:
            cfg = ExperimentConfig.load(args.config)
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except (json.JSONDecodeError, TypeError, ValueError) as e:
            raise UsageError(f"invalid config {args.config}: {e}") from None
    steps_key = {"pretrain": "pretrain.steps", "train": "train.steps"}.get(args.command)
    over = {"seed": args.seed}
    if steps_key:
        over[steps_key] = getattr(args, "steps", None)
    alpha = getattr(args, "alpha", None)
    if args.command == "train" and alpha is not None:
        over["gate.alpha_max"] = alpha
        over["gate.inference_alpha"] = alpha
    elif args.command in ("bench-drift", "xray", "generate") and alpha is not None:
        over["gate.inference_alpha"] = alpha
    if getattr(args, "prompts", None) is not None:
        over["n_prompts"] = args.prompts
    try:
        return cfg.with_overrides(**over)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_eval(args, run: Run, cfg: ExperimentConfig) -> None:
    if args.checkpoint is not None:
        if not args.checkpoint.exists():
            raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
        model, extra = IdeaGatedLM.load(args.checkpoint)
        arm = extra.get("arm", "backbone")
    elif args.arm == "backbone":
        if not run.backbone_path.exists():
            raise FileNotFoundError(f"backbone checkpoint {run.backbone_path} not found")
        model, arm = IdeaGatedLM.load(run.backbone_path)[0], "backbone"
    else:
        model, arm = run.load_arm(args.arm), args.arm
    alpha = args.alpha if args.alpha is not None else (cfg.gate.inference_alpha if arm == "gated" else 0.0)
    data, _ = run.datasets(cfg)
    windows = eval_windows(data.val_stream(), cfg.train.seq_len, cfg.train.val_windows)
    res = evaluate_ppl(model, windows, alpha, cfg.gate)
    _emit({"arm": arm, "alpha": alpha, "val_loss": res["val_token_loss"], "ppl": res["ppl"]})


def cmd_xray(args, run: Run, cfg: ExperimentConfig) -> None:
    run.claim(run.xray_dir / "report.json")
    run.record("xray", cfg)
    vocab = run.vocab()
    text = args.prompt or " ".join(trap_prompts(run.spec(), 1, cfg.prompt_domain, seed=cfg.seed)[0].words)
    report = xray(run.load_arm("gated"), vocab, [BOS] + tokenize(text, vocab),
                  cfg.gate.inference_alpha, args.k, cfg.gate)
    run.xray_dir.mkdir(parents=True, exist_ok=True)
    (run.xray_dir / "report.json").write_text(report.to_json() + "\n")
    (run.xray_dir / "report.csv").write_text(report.to_csv())
    _emit({"prompt": report.prompt, "alpha": report.alpha,
           "boosted": [(r.token, r.delta_pct) for r in report.boosted],
           "suppressed": [(r.token, r.delta_pct) for r in report.suppressed]})


def cmd_generate(args, run: Run, cfg: ExperimentConfig) -> None:
    vocab = run.vocab()
    model = run.load_arm(args.arm)
    alpha = cfg.gate.inference_alpha if args.arm == "gated" else 0.0
    over = {"seed": cfg.seed, "alpha": alpha}
    if args.max_new_tokens is not None:
        over["max_new_tokens"] = args.max_new_tokens
    if args.mode is not None:
        over["mode"] = args.mode
    dc = DecodeConfig(**{**cfg.decode.__dict__, **over})
    gen = generate(model, [BOS] + tokenize(args.prompt, vocab), dc, cfg.gate)
    print(" ".join(vocab.id_to_token[i] for i in gen.tokens))


def dispatch(args) -> None:
    run = Run(args.out, force=args.force)
    cfg = resolve_config(args, run)
    cmd = args.command
    if cmd == "gen-corpus":
        _emit(gen_corpus(run, cfg))
    elif cmd == "pretrain":
        tl = pretrain(run, cfg)
        _emit({"final_val_loss": tl.evals()[-1]["val_token_loss"], "checkpoint": str(run.backbone_path)})
    elif cmd == "train":
        tl = train(run, cfg, args.arm)
        _emit({"arm": args.arm, "final_val_loss": tl.evals()[-1]["val_token_loss"],
               "checkpoint": str(run.arm_checkpoint(args.arm))})
    elif cmd == "eval":
        cmd_eval(args, run, cfg)
    elif cmd == "bench-drift":
        base, gated = bench(run, cfg)
        _emit({"baseline_drift_rate": base.drift_rate, "gated_drift_rate": gated.drift_rate,
               "n_prompts": base.n, "report": str(run.bench_dir / "drift.json")})
    elif cmd == "xray":
        cmd_xray(args, run, cfg)
    elif cmd == "generate":
        cmd_generate(args, run, cfg)
    elif cmd == "run-all":
        _emit(run_all(run, cfg))


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        dispatch(args)
    except UsageError as e:
        print(f"igt: error: usage: {e}", file=sys.stderr)
        return 2
    except RunExistsError as e:
        print(f"igt: error: exists: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"igt: error: missing: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to one line and exit 1
        msg = str(e).replace("\n", " ")
        print(f"igt: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
