"""Command line: ``ctxprompt {gen-data,train,decode,eval,report}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import CorpusFormatError, SynthConfig, build_lexicon, context_coverage, gen_corpus, read_corpus, write_corpus
from .model import Architecture, IncompatibleCheckpointError, TransducerModel
from .text import Vocabulary
from .train import (DivergenceError, FreezeMask, TrainConfig, evaluate, load_checkpoint,
                    rwerr, save_checkpoint, train, write_metrics)

logger = logging.getLogger("ctxprompt")

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _add_model_flags(p):
    p.add_argument("--consumption", choices=["none", "feature-concat", "cross-attention", "prompt"],
                   default="none")
    p.add_argument("--generator", choices=["frozen-sent", "frozen-tok", "spm-tok"], default="spm-tok")
    p.add_argument("--cp", action="store_true", help="copy-initialise the learned prompt path")
    p.add_argument("--regime", choices=["all", "mha-and-projections", "projections-only"], default="all")
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--cw", type=int, default=8)
    p.add_argument("--token-window", type=int, default=30)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxprompt", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train/dev/test corpora and the vocabulary")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--train-sessions", type=int, default=1000)
    g.add_argument("--dev-sessions", type=int, default=25)
    g.add_argument("--test-sessions", type=int, default=170)
    g.add_argument("--coverage", type=float, default=0.7)
    g.add_argument("--noise", type=float, default=0.3)
    g.add_argument("--vocab-size", type=int, default=64)
    g.add_argument("--pairs", type=int, default=8)
    g.add_argument("--turns", type=int, default=3)

    t = sub.add_parser("train", help="train a seed model or fine-tune a variant")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--corpus", required=True, help="directory written by gen-data")
    t.add_argument("--out", required=True)
    t.add_argument("--phase", choices=["seed", "finetune"], default="seed")
    t.add_argument("--checkpoint", help="seed checkpoint for --phase finetune")
    _add_model_flags(t)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--warmup", type=int, default=100)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--checkpoint-interval", type=int, default=50)
    t.add_argument("--n-average", type=int, default=10)

    for name, hlp in (("decode", "print greedy hypotheses"), ("eval", "compute WER breakdowns")):
        d = sub.add_parser(name, help=hlp)
        d.add_argument("--checkpoint", required=True, help="training output dir or checkpoint file")
        d.add_argument("--corpus", required=True, help="corpus .jsonl file or gen-data directory")
        d.add_argument("--context", choices=["as-labeled", "force-empty"], default="as-labeled")
        d.add_argument("--out", help="write results here instead of stdout")
        if name == "eval":
            d.add_argument("--format", choices=["table", "records"], default="records")

    r = sub.add_parser("report", help="tabulate rWERR of candidates against a baseline")
    r.add_argument("--baseline", required=True, help="eval output of the baseline")
    r.add_argument("candidates", nargs="+", help="eval outputs of candidate models")
    r.add_argument("--format", choices=["table", "records"], default="table")
    r.add_argument("--out")
    return parser


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            defaults = json.loads(Path(known.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from None
        defaults = {k.replace("-", "_"): v for k, v in defaults.items()}
        for action in parser._subparsers._group_actions:
            for sp in action.choices.values():
                sp.set_defaults(**defaults)


# gen-data ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    base = dict(seed=args.seed, context_coverage=args.coverage, noise=args.noise,
                vocab_size=args.vocab_size, n_homophone_pairs=args.pairs,
                turns_per_session=args.turns)
    try:
        train_cfg = SynthConfig(n_sessions=args.train_sessions, **base)
        eval_cfg = SynthConfig(counterbalance=True, **base)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    lex = build_lexicon(train_cfg)
    n_tr, n_dev = args.train_sessions, args.dev_sessions
    splits = {
        "train": gen_corpus(train_cfg),
        "dev": gen_corpus(eval_cfg, range(n_tr, n_tr + n_dev)),
        "test": gen_corpus(eval_cfg, range(n_tr + n_dev, n_tr + n_dev + args.test_sessions)),
    }
    lex.vocab.save(out / "vocab.txt")
    (out / "lexicon.json").write_text(json.dumps({
        "homophones": lex.homophones, "cues": lex.cues, "fillers": lex.fillers,
    }, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
    total = 0
    for name, corpus in splits.items():
        write_corpus(corpus, out / f"{name}.jsonl")
        total += len(corpus)
        print(f"{name}: {len(corpus)} utterances, "
              f"{sum(bool(u.ambiguous) for u in corpus)} ambiguous, "
              f"context coverage {context_coverage(corpus):.3f}")
    print(f"total: {total} utterances")
    return 0


# train ------------------------------------------------------------------------

def _arch_from_args(args, vocab) -> Architecture:
    try:
        return Architecture(vocab_size=len(vocab), consumption=args.consumption,
                            generator=args.generator, cp=args.cp, d_model=args.d_model,
                            n_blocks=args.blocks, cw=args.cw, token_window=args.token_window)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_corpus_dir(path) -> tuple:
    path = Path(path)
    try:
        vocab = Vocabulary.load(path / "vocab.txt")
        return vocab, read_corpus(path / "train.jsonl")
    except (OSError, CorpusFormatError, ValueError) as exc:
        raise DataError(str(exc)) from None


def cmd_train(args) -> int:
    if args.phase == "seed" and (args.consumption != "none" or args.cp):
        raise UsageError("--phase seed trains without context; use --consumption none")
    if args.phase == "finetune" and not args.checkpoint:
        raise UsageError("--phase finetune needs --checkpoint pointing at a seed model")
    try:
        cfg = TrainConfig(lr_peak=args.lr, warmup_steps=args.warmup, total_steps=args.steps,
                          batch_size=args.batch_size, regime=args.regime,
                          checkpoint_interval=args.checkpoint_interval, n_average=args.n_average,
                          use_context=args.phase == "finetune")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    # validate the architecture before touching any data
    probe = Vocabulary(["<blank>", "<unk>"])
    _arch_from_args(args, probe)
    vocab, corpus = _load_corpus_dir(args.corpus)
    arch = _arch_from_args(args, vocab)
    model = TransducerModel(arch, vocab, seed=args.seed)
    if args.phase == "finetune":
        try:
            fresh = model.load_shared(load_checkpoint(_checkpoint_file(args.checkpoint)))
        except (OSError, ValueError) as exc:
            if isinstance(exc, IncompatibleCheckpointError):
                raise UsageError(str(exc)) from None
            raise DataError(str(exc)) from None
        logger.info("fresh parameters: %s", ", ".join(fresh) or "none")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "arch.json").write_text(json.dumps(arch.to_dict(), indent=1, sort_keys=True) + "\n")
    (out / "run.json").write_text(json.dumps({
        "phase": args.phase, "regime": args.regime, "seed": args.seed,
        "train": {k: v for k, v in vars(cfg).items()},
    }, indent=1, sort_keys=True) + "\n")

    def log(rec):
        if rec["step"] % 50 == 0:
            logger.info("step %d loss %.4f lr %.2e", rec["step"], rec["loss"], rec["lr"])

    result = train(model, corpus, cfg, args.seed, out / "checkpoints", log)
    write_metrics(result["history"], out / "metrics.jsonl")
    save_checkpoint(model.params, out / "averaged.bin")
    mask = FreezeMask(args.regime)
    print(f"trained {cfg.total_steps} steps; final loss {result['history'][-1]['loss']:.4f}; "
          f"trainable {model.n_params(mask)}/{model.n_params()} parameters")
    print(f"averaged checkpoint: {out / 'averaged.bin'}")
    return 0


# decode / eval ----------------------------------------------------------------

def _checkpoint_file(path) -> Path:
    path = Path(path)
    return path / "averaged.bin" if path.is_dir() else path


def _load_model(path) -> tuple:
    ck = _checkpoint_file(path)
    run_dir = ck.parent
    try:
        arch = Architecture(**json.loads((run_dir / "arch.json").read_text()))
        run = json.loads((run_dir / "run.json").read_text()) if (run_dir / "run.json").exists() else {}
        params = load_checkpoint(ck)
    except (OSError, ValueError, TypeError) as exc:
        raise DataError(f"cannot load model from {path}: {exc}") from None
    return arch, params, run


def _load_eval_corpus(path) -> tuple:
    path = Path(path)
    corpus_file = path / "test.jsonl" if path.is_dir() else path
    try:
        vocab = Vocabulary.load(corpus_file.parent / "vocab.txt")
        return vocab, read_corpus(corpus_file)
    except (OSError, CorpusFormatError, ValueError) as exc:
        raise DataError(str(exc)) from None


def _model_for(args):
    arch, params, run = _load_model(args.checkpoint)
    vocab, corpus = _load_eval_corpus(args.corpus)
    model = TransducerModel(arch, vocab)
    try:
        missing = model.load_shared(params)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if missing:
        raise DataError(f"checkpoint lacks parameters: {missing}")
    return model, corpus, run


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_decode(args) -> int:
    model, corpus, _ = _model_for(args)
    lines = []
    for u in corpus:
        ctx = u.context_text if args.context == "as-labeled" else ""
        hyp = model.decode(u.features, ctx)
        lines.append(f"{u.id}\t{' '.join(model.vocab.piece(i) for i in hyp)}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def eval_record(model, corpus, run: dict, context: str) -> dict:
    res = evaluate(model, corpus, context)
    res.pop("hyps")
    regime = run.get("regime", "all")
    base = model.n_params() - model.n_added_params()
    rec = {
        "consumption": model.arch.consumption,
        "generator": model.arch.generator if model.arch.has_context else "none",
        "cp": model.arch.cp,
        "regime": regime,
        "n_params": model.n_params(),
        "n_base_params": base,
        "n_added_params": model.n_added_params(),
        "n_trainable_params": model.n_params(FreezeMask(regime)),
    }
    rec.update(res)
    return rec


def cmd_eval(args) -> int:
    model, corpus, run = _model_for(args)
    rec = eval_record(model, corpus, run, args.context)
    if args.format == "records":
        _emit(json.dumps(rec, sort_keys=True) + "\n", args.out)
    else:
        _emit("".join(f"{k:28s} {v}\n" for k, v in sorted(rec.items())), args.out)
    return 0


# report -----------------------------------------------------------------------

REPORT_FIELDS = ("consumption", "generator", "cp", "regime", "context", "rwerr_ambiguous",
                 "rwerr_all", "rwerr_with_context", "rwerr_without_context",
                 "added_params_pct", "trainable_params_pct")


def report_rows(baseline: dict, candidates: list) -> list:
    rows = []
    for c in candidates:
        row = {k: c.get(k) for k in ("consumption", "generator", "cp", "regime", "context")}
        for sub in ("ambiguous", "all", "with_context", "without_context"):
            b = baseline[f"wer_{sub}"]
            row[f"rwerr_{sub}"] = rwerr(b, c[f"wer_{sub}"]) if b > 0 else 0.0
        row["added_params_pct"] = 100.0 * c["n_added_params"] / c["n_base_params"]
        row["trainable_params_pct"] = 100.0 * c["n_trainable_params"] / c["n_params"]
        rows.append(row)
    return rows


def format_table(rows: list) -> str:
    head = ["Context cons.", "Context gen.", "Regime", "Ctx", "Ambig.", "All",
            "w/ ctx", "w/o ctx", "Added %", "Train. %"]
    body = []
    for r in rows:
        gen = r["generator"] + (" + CP" if r["cp"] else "")
        body.append([r["consumption"], gen, r["regime"], r["context"],
                     f"{r['rwerr_ambiguous']:.1f}%", f"{r['rwerr_all']:.1f}%",
                     f"{r['rwerr_with_context']:.1f}%", f"{r['rwerr_without_context']:.1f}%",
                     f"+{r['added_params_pct']:.1f}%", f"{r['trainable_params_pct']:.1f}%"])
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)) for line in [head] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_records(rows: list) -> str:
    return "".join(json.dumps({k: r[k] for k in REPORT_FIELDS}, sort_keys=True) + "\n" for r in rows)


def parse_records(text: str) -> list:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def _read_eval(path) -> dict:
    try:
        recs = parse_records(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None
    if len(recs) != 1:
        raise DataError(f"{path}: expected one eval record, found {len(recs)}")
    return recs[0]


def cmd_report(args) -> int:
    if not Path(args.baseline).exists():
        raise UsageError(f"missing baseline eval {args.baseline}")
    baseline = _read_eval(args.baseline)
    rows = report_rows(baseline, [_read_eval(p) for p in args.candidates])
    text = format_table(rows) if args.format == "table" else format_records(rows)
    _emit(text, args.out)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "decode": cmd_decode,
            "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
