"""``codeseed`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import corpus, evaluation, training
from .models import UNITS, predict_topk

log = logging.getLogger("codeseed")


class UsageError(Exception):
    pass


def _thread_limit():
    n = os.environ.get("CODESEED_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def _train_flags(p: argparse.ArgumentParser, max_epochs: int = 50):
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--max-epochs", type=int, default=max_epochs)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--preprocess", choices=("normalize", "strip-comments"), default="normalize")


def _cfg(args) -> training.TrainConfig:
    try:
        return training.TrainConfig(lr=args.lr, batch_size=args.batch, max_epochs=args.max_epochs,
                                    patience=args.patience, dropout_rate=args.dropout, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _need_dir(path: str, what: str):
    if not Path(path).is_dir():
        raise UsageError(f"{what} {path!r} does not exist or is not a directory")


def _need_bundle(path: str):
    if not (Path(path) / training.MANIFEST).is_file():
        raise UsageError(f"{path!r} is not a model bundle")


def cmd_pretrain(args) -> int:
    _need_dir(args.corpus, "corpus")
    cfg = _cfg(args)
    if not 0.0 <= args.dropout < 1.0:
        raise UsageError("--dropout must be in [0, 1)")
    model, hist = training.pretrain(
        args.corpus, args.unit, cfg, min_count=args.min_count, context=args.context,
        embed_dim=args.embed, hidden_dim=args.hidden, folds=args.folds, preprocess=args.preprocess)
    training.save_bundle(model, args.out, history=hist)
    print(f"saved {args.unit} bundle to {args.out} (V={len(model.vocab)}, "
          f"params={model.parameter_count()}, best epoch {hist.best_epoch}/{hist.stopped_epoch})")
    return 0


def cmd_transfer(args) -> int:
    _need_bundle(args.rnn)
    _need_bundle(args.gru)
    _need_dir(args.project, "project")
    cfg = _cfg(args)
    model, hist = training.finetune(args.rnn, args.gru, args.project, cfg, min_count=args.min_count,
                                    folds=args.folds, attn_dim=args.attn, preprocess=args.preprocess)
    training.save_bundle(model, args.out, history=hist)
    training.verify_frozen(args.out, args.rnn, args.gru)
    for e, (tl, vl) in enumerate(zip(hist.train_loss, hist.valid_loss), 1):
        print(f"epoch {e} train_loss={tl:.6f} valid_loss={vl:.6f}")
    print(f"saved transfer bundle to {args.out} (V_target={len(model.vocab)}, best epoch "
          f"{hist.best_epoch}/{hist.stopped_epoch}); frozen branches verified")
    return 0


def suggest(model, code: str, k: int = 10) -> list[tuple[str, float]]:
    """Run raw code text through preprocessing and rank the next token."""
    literals = getattr(model, "manifest", {}).get("preprocess", "normalize") == "normalize"
    tokens = corpus.lex(corpus.normalize_source(code, literals=literals)).tokens
    if not tokens:
        raise UsageError("context is empty after normalization")
    return predict_topk(model, tokens, k)


def cmd_suggest(args) -> int:
    _need_bundle(args.model)
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    model = training.load_bundle(args.model, dtype=np.float32)
    t0 = time.perf_counter()
    try:
        ranked = suggest(model, args.context, args.k)
    except corpus.LexError as e:
        raise UsageError(f"cannot tokenize context: {e}") from None
    elapsed = time.perf_counter() - t0
    for i, (tok, p) in enumerate(ranked, 1):
        print(f"{i} {tok} {p:.6f}")
    log.info("inference %.2f ms", elapsed * 1000)
    return 0


def test_windows(model, project: str, folds: int, seed: int, preprocess: str):
    """Windows of fold 0 of the project split, as the fine-tuning run would cut it."""
    seqs = corpus.load_corpus(project, literals=preprocess == "normalize")
    if not seqs:
        raise training.TrainingError(f"{project}: no non-empty .java files")
    assignment = corpus.split_folds(seqs, folds, seed)
    X, y, f = training.windows_by_fold(model, seqs, assignment)
    test = f == corpus.FoldAssignment.TEST
    return X[test], y[test]


def cmd_eval(args) -> int:
    _need_bundle(args.model)
    _need_dir(args.project, "project")
    model = training.load_bundle(args.model)
    man = model.manifest
    folds = args.folds or int(man.get("folds", 10))
    seed = args.seed if args.seed is not None else int(man.get("fold_seed", man.get("seed", 0)))
    preprocess = args.preprocess or man.get("preprocess", "normalize")
    X, y = test_windows(model, args.project, folds, seed, preprocess)
    report, records = evaluation.evaluate_model(model, X, y, k=evaluation.TOP_K)
    text = report.format()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8", newline="\n")
    if args.records:
        Path(args.records).write_text(evaluation.format_record_log(records), encoding="utf-8", newline="\n")
    sys.stdout.write(text)
    return 0


def cmd_anova(args) -> int:
    if not 0.0 < args.alpha < 1.0:
        raise UsageError("--alpha must be in (0, 1)")
    try:
        groups = evaluation.read_groups(args.groups)
        result = evaluation.anova_oneway(groups, args.alpha)
    except (OSError, ValueError) as e:
        raise UsageError(str(e)) from None
    sys.stdout.write(result.format())
    return 0


def cmd_normalize(args) -> int:
    literals = not args.strip_comments_only
    src = Path(args.input)
    if src.is_file():
        text = corpus.normalize_source(corpus.SourceFile.read(src), literals=literals)
        if args.out:
            seq = corpus.lex(text, str(src))
            corpus.write_token_file(seq, args.out)
        else:
            sys.stdout.write(text + ("\n" if text else ""))
        return 0
    _need_dir(args.input, "input")
    if not args.out:
        raise UsageError("--out is required when the input is a directory")
    out = Path(args.out)
    n = 0
    for seq in corpus.load_corpus(src, literals=literals):
        dest = out / (seq.origin[: -len(".java")] + ".toks")
        dest.parent.mkdir(parents=True, exist_ok=True)
        corpus.write_token_file(seq, dest)
        n += 1
    print(f"wrote {n} token files to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="codeseed", description="Transfer-learned next-token suggestion for Java.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a base RNN or GRU language model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--unit", required=True, choices=UNITS)
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=3)
    p.add_argument("--context", type=int, default=20)
    p.add_argument("--embed", type=int, default=300)
    p.add_argument("--hidden", type=int, default=300)
    _train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("transfer", help="fine-tune an attention head over two frozen bundles")
    p.add_argument("--rnn", required=True)
    p.add_argument("--gru", required=True)
    p.add_argument("--project", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=2)
    p.add_argument("--attn", type=int, default=None, help="attention width (default: concatenated hidden width)")
    _train_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("suggest", help="rank next-token suggestions for a code context")
    p.add_argument("--model", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_suggest)

    p = sub.add_parser("eval", help="evaluate a bundle on a project's test fold")
    p.add_argument("--model", required=True)
    p.add_argument("--project", required=True)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--preprocess", choices=("normalize", "strip-comments"), default=None)
    p.add_argument("--report", help="write the metric report here as well as to stdout")
    p.add_argument("--records", help="per-record log: target_id,rank (or -1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("anova", help="one-way ANOVA over comma-separated groups")
    p.add_argument("--groups", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_anova)

    p = sub.add_parser("normalize", help="normalize and tokenize Java sources")
    p.add_argument("--input", required=True, help=".java file or directory")
    p.add_argument("--out", help=".toks file or output directory")
    p.add_argument("--strip-comments-only", action="store_true")
    p.set_defaults(func=cmd_normalize)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"codeseed {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (training.TrainingError, training.BundleError, corpus.LexError, ValueError, OSError) as e:
        print(f"codeseed {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
