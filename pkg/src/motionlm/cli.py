"""Command-line entry point: motionlm <subcommand> [options]."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger("motionlm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(args, payload: dict, human: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=str))
    else:
        print(human if human is not None else "\n".join(f"{k}: {v}" for k, v in payload.items()))


# --- subcommands -----------------------------------------------------------

def cmd_gen_data(args, cfg) -> dict:
    from .corpus import generate_corpus, load_corpus
    out = Path(args.out or cfg.paths.corpus)
    generate_corpus(cfg.corpus, args.seed if args.seed is not None else cfg.seed, out)
    c = load_corpus(out)
    frames = [m.frames for m in c.motions.values()]
    return {"corpus": str(out), "segments": len(c.records), "scenes": len(c.scenes()),
            "mean_frames": float(np.mean(frames))}


def cmd_train_vqvae(args, cfg) -> dict:
    from .corpus import load_corpus
    from .workflow import corpus_split, train_tokenizer
    corpus = load_corpus(args.corpus or cfg.paths.corpus)
    if args.steps is not None:
        cfg.vq_train.steps = args.steps
    out = Path(args.out or Path(cfg.paths.checkpoints) / "tokenizer.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    _, held = train_tokenizer(corpus, corpus_split(corpus, cfg.seed), cfg.vq, cfg.vq_train, out)
    return {"checkpoint": str(out), **held}


def cmd_train_lm(args, cfg) -> dict:
    from .corpus import load_corpus
    from .tokenizer import load_tokenizer
    from .workflow import corpus_split, train_language_model
    corpus = load_corpus(args.corpus or cfg.paths.corpus)
    tok = load_tokenizer(args.tokenizer or Path(cfg.paths.checkpoints) / "tokenizer.ckpt")
    if args.steps is not None:
        cfg.train.steps = args.steps
    out = Path(args.out or Path(cfg.paths.checkpoints) / "lm")
    _, report = train_language_model(corpus, corpus_split(corpus, cfg.seed), tok, cfg.lm, cfg.train, out, cfg.seed)
    last = report.validation[-1] if report.validation else {}
    return {"checkpoint": report.checkpoint, "best_step": report.best_step, "wall_clock": report.wall_clock,
            "final_val_total": last.get("total")}


def cmd_run_pipeline(args, cfg) -> dict | tuple[dict, str]:
    from .pipeline import summary_table
    from .workflow import load_pipeline
    ckpt = args.checkpoint or Path(cfg.paths.checkpoints) / "lm" / "lm_final.ckpt"
    pipe = load_pipeline(ckpt, cfg.corpus.fps)
    if args.rounds is not None:
        cfg.loop.rounds = args.rounds
    if args.seed is not None:
        cfg.loop.seed = args.seed
    out = Path(args.out or cfg.paths.outputs)
    trace = pipe.run_full(args.scene, cfg.loop, out_dir=out)
    if args.dump_csv and trace.long_motion_tokens:
        motion = pipe.decode(trace.long_motion_tokens).data
        header = ",".join(f"ch{i}" for i in range(motion.shape[1]))
        np.savetxt(args.dump_csv, motion, delimiter=",", header=header, comments="", fmt="%.6f")
    payload = {"trace": str(out / "trace.json"), "tasks": len(trace.tasks),
               "segments": len(trace.segments), "transitions": len(trace.transitions),
               "frames": trace.long_motion_frames, "errors": trace.errors}
    return payload, summary_table(trace)


def _read_lines(path) -> list[str]:
    return [l.rstrip("\n") for l in Path(path).read_text("utf-8").splitlines()]


def _features(path, cfg, tokenizer_path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    if p.suffix in (".csv", ".txt"):
        return np.loadtxt(p, delimiter=",", ndmin=2)
    from .corpus import load_corpus
    from .evalmetrics import FeatureExtractor
    from .tokenizer import load_tokenizer
    tok = load_tokenizer(tokenizer_path or Path(cfg.paths.checkpoints) / "tokenizer.ckpt")
    c = load_corpus(p)
    return FeatureExtractor(tok)([c.motions[k] for k in sorted(c.motions)])


def cmd_eval(args, cfg) -> dict:
    from .evalmetrics import bleu, cider_corpus, diversity, embed_sim, fid, rouge_l
    m = args.metric
    if m in ("fid", "diversity"):
        if not args.inputs:
            raise UsageError("eval: feature inputs required")
        a = _features(args.inputs[0], cfg, args.tokenizer)
        if m == "diversity":
            value, n = diversity(a, args.pairs, args.seed or 0), len(a)
        else:
            if args.self_compare:
                b = a
            elif len(args.inputs) == 2:
                b = _features(args.inputs[1], cfg, args.tokenizer)
            else:
                raise UsageError("eval --metric fid needs two inputs or --self")
            value, n = fid(a, b), len(a)
        return {"metric": m, "value": value, "count": n, "display": f"{value:.6f}"}
    if m in ("bleu1", "bleu4", "rouge_l", "cider", "embed_sim"):
        if not (args.candidates and args.references):
            raise UsageError(f"eval --metric {m} needs --candidates and --references")
        cands, refs = _read_lines(args.candidates), _read_lines(args.references)
        if len(cands) != len(refs):
            raise UsageError("candidates and references differ in line count")
        if m == "cider":
            value, _ = cider_corpus(cands, [[r] for r in refs])
        else:
            fn = {"bleu1": lambda c, r: bleu(c, [r], 1), "bleu4": lambda c, r: bleu(c, [r], 4),
                  "rouge_l": rouge_l, "embed_sim": embed_sim}[m]
            value = float(np.mean([fn(c, r) for c, r in zip(cands, refs)]))
        return {"metric": m, "value": value, "count": len(cands), "display": f"{value:.6f}"}
    if m == "lcs":
        from .evalmetrics.judge import ChatJudge, JudgePair, RuleJudge, lcs_score
        if not args.pairs_file:
            raise UsageError("eval --metric lcs needs --pairs-file")
        pairs = [JudgePair(**json.loads(l)) for l in _read_lines(args.pairs_file) if l.strip()]
        if cfg.judge.backend == "http":
            from .chat import ChatClient
            judge = ChatJudge(ChatClient(cfg.chat))
        else:
            rules = args.rules or cfg.judge.rules or Path(cfg.paths.corpus) / "judge_rules.json"
            judge = RuleJudge(rules)
        res = lcs_score(pairs, judge, cfg.judge.parallelism)
        return {"metric": m, "value": res.score, "count": res.n, "failures": res.failures,
                "display": f"{res.score:.6f}"}
    if m == "cycle":
        from .evalmetrics.cycle import cycle_scores
        from .pipeline import PipelineTrace
        if not args.inputs:
            raise UsageError("eval --metric cycle needs a trace file")
        trace = PipelineTrace.from_json(Path(args.inputs[0]).read_text("utf-8"))
        scores = {lvl: {k: v.value for k, v in reps.items()} for lvl, reps in cycle_scores(trace).items()}
        return {"metric": m, "value": scores, "count": len(trace.backward_steps),
                "display": json.dumps(scores, indent=2, sort_keys=True)}
    raise UsageError(f"unknown metric {m}")


def cmd_annotate(args, cfg) -> dict:
    from .annotate import ChatBackend, MockBackend, annotate_video, package_dataset, read_standins, standins_from_corpus
    if args.standins:
        videos = read_standins(args.standins)
    else:
        from .corpus import load_corpus
        videos = standins_from_corpus(load_corpus(args.corpus or cfg.paths.corpus))
    if args.limit is not None:
        videos = dict(list(videos.items())[: args.limit])
    if args.mode == "mock":
        backend = MockBackend()
    else:
        from .chat import ChatClient
        out = Path(args.out or cfg.paths.outputs)
        out.mkdir(parents=True, exist_ok=True)
        backend = ChatBackend(ChatClient(cfg.chat, log_path=out / "chat_log.jsonl"))
    anns = [annotate_video(v, hs, backend, args.rounds, args.scene_rounds, args.parallelism)
            for v, hs in videos.items()]
    out = package_dataset(anns, args.out or Path(cfg.paths.outputs) / "annotations",
                          {"mode": args.mode, "chat_model": cfg.chat.model if args.mode != "mock" else None,
                           "rounds": args.rounds, "scene_rounds": args.scene_rounds})
    n = sum(1 for _ in (out / "annotations.jsonl").read_text().splitlines())
    return {"out": str(out), "videos": len(anns), "records": n}


def cmd_gradcheck(args, cfg) -> dict:
    from .diagnostics import lm_gradcheck, vq_gradcheck
    vq, audit = vq_gradcheck(tol=args.tol)
    lm = lm_gradcheck(tol=args.tol, max_entries=args.max_entries)
    ok = vq.ok and audit.ok and lm.ok
    if not ok:
        raise RuntimeError(f"gradient check failed: vq {vq.flagged()} lm {lm.flagged()} stop-gradient {audit}")
    return {"ok": ok, "vq_max_rel_err": vq.max_rel_err, "lm_max_rel_err": lm.max_rel_err,
            "stop_gradient_exact_zero": audit.ok}


# --- wiring ----------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="motionlm", description="Motion tokenizer, multitask sequence model and planning loop.")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate the synthetic corpus")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)

    s = sub.add_parser("train-vqvae", help="train the motion tokenizer")
    s.add_argument("--corpus")
    s.add_argument("--out", help="checkpoint path")
    s.add_argument("--steps", type=int)

    s = sub.add_parser("train-lm", help="train the sequence model on all tasks")
    s.add_argument("--corpus")
    s.add_argument("--tokenizer")
    s.add_argument("--out", help="checkpoint directory")
    s.add_argument("--steps", type=int)

    s = sub.add_parser("run-pipeline", help="run the closed planning/generation/description loop")
    s.add_argument("--checkpoint")
    s.add_argument("--scene", required=True)
    s.add_argument("--rounds", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--dump-csv", help="also write the long motion as CSV")

    s = sub.add_parser("eval", help="compute a metric")
    s.add_argument("--metric", required=True,
                   choices=["fid", "diversity", "bleu1", "bleu4", "rouge_l", "cider", "embed_sim", "lcs", "cycle"])
    s.add_argument("inputs", nargs="*", help="feature files (.npy/.csv), corpus dirs, or a trace")
    s.add_argument("--self", dest="self_compare", action="store_true", help="compare a set with itself")
    s.add_argument("--tokenizer")
    s.add_argument("--candidates")
    s.add_argument("--references")
    s.add_argument("--pairs-file")
    s.add_argument("--rules")
    s.add_argument("--pairs", type=int, default=300)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")

    s = sub.add_parser("annotate", help="hierarchical text annotation of segmented videos")
    s.add_argument("--mode", choices=["mock", "chat"], default="mock")
    s.add_argument("--standins", help="directory of <video>/<index>.txt descriptions")
    s.add_argument("--corpus", help="build stand-ins from a corpus instead")
    s.add_argument("--rounds", type=int, default=6)
    s.add_argument("--scene-rounds", type=int, default=20)
    s.add_argument("--parallelism", type=int, default=4)
    s.add_argument("--limit", type=int)
    s.add_argument("--out")

    s = sub.add_parser("gradcheck", help="finite-difference audit of both models on tiny nets")
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--max-entries", type=int, default=64, help="entries checked per sequence-model tensor")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data, "train-vqvae": cmd_train_vqvae, "train-lm": cmd_train_lm,
    "run-pipeline": cmd_run_pipeline, "eval": cmd_eval, "annotate": cmd_annotate, "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None, env: Mapping[str, str] | None = None) -> int:
    parser = build_parser()
    env = os.environ if env is None else env
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from .config import ConfigError, load_config
    try:
        cfg = load_config(args.config, env)
    except ConfigError as e:
        print(f"motionlm: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    log.info("config hash %s", cfg.hash())
    try:
        result = COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"motionlm {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failure: report and exit 2
        log.debug("failure", exc_info=True)
        print(f"motionlm {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    human = None
    if isinstance(result, tuple):
        result, human = result
    result = {"command": args.command, "config_hash": cfg.hash(), **result}
    if "display" in result and not args.json:
        human = result["display"]
    _emit(args, result, human)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
