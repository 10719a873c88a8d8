"""``xlcontrast`` command line: data generation, pre-training and evaluation."""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .corpus import Vocab, gen_synthetic_languages, load_corpora, write_mono, write_parallel
from .evaluation import (estimate_mi, language_scores, layer_sweep, transfer_gap,
                         write_gap_report, write_report)
from .gradcheck import joint_loss_check
from .trainer import train

log = logging.getLogger("xlcontrast")

CONFIG_FILE = "config.txt"
COMMANDS = ("gen-data", "pretrain", "eval-retrieval", "layer-sweep", "estimate-mi", "grad-check")


class CommandError(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config file (key = value lines)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable, applied after --config")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="xlcontrast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic cipher-language corpora")
    p.add_argument("--base-vocab", type=int, default=200)
    p.add_argument("--num-langs", type=int, default=2)
    p.add_argument("--sentences", type=int, default=2000)
    p.add_argument("--heldout", type=int, default=200)
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int, default=9)

    p = sub.add_parser("pretrain", parents=[common], help="run joint pre-training")
    p.add_argument("--data", type=Path, help="corpus directory (overrides data_dir)")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")

    for name, text in (("eval-retrieval", "retrieval accuracy at the retrieval layer"),
                       ("layer-sweep", "retrieval accuracy at every layer")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("checkpoint", type=Path)
        p.add_argument("--eval", type=Path, help="directory of held-out para.*.tsv files (overrides eval_dir)")
        p.add_argument("--vocab", type=Path, help="vocab file (default: <eval dir>/vocab.txt)")

    p = sub.add_parser("estimate-mi", parents=[common], help="InfoNCE estimate on a parallel set")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--eval", type=Path, help="directory of para.*.tsv files (overrides eval_dir)")
    p.add_argument("--vocab", type=Path)
    p.add_argument("--layer", type=int)
    p.add_argument("--max-pairs", type=int, default=256)

    sub.add_parser("grad-check", parents=[common], help="finite-difference check of the joint loss")
    return parser


def resolve_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return config.with_overrides(overrides) if overrides else config


def _eval_sets(config: RunConfig, args):
    eval_dir = args.eval or (Path(config.eval_dir) if config.eval_dir else None)
    if eval_dir is None:
        raise CommandError("no evaluation set: pass --eval or set eval_dir")
    vocab_path = args.vocab or eval_dir / "vocab.txt"
    if not vocab_path.exists():
        raise CommandError(f"vocab file not found: {vocab_path}")
    _, parallel = load_corpora(eval_dir, Vocab.load(vocab_path), config.pivot)
    if not parallel:
        raise CommandError(f"no para.*.tsv files in {eval_dir}")
    return parallel


def _require_out(args) -> Path:
    if args.out is None:
        raise CommandError(f"{args.command} needs --out DIR")
    return args.out


def cmd_gen_data(args, config: RunConfig, out: Path) -> None:
    data = gen_synthetic_languages(args.base_vocab, args.num_langs, args.sentences,
                                   (args.min_len, args.max_len), seed=config.seed, num_heldout=args.heldout)
    train_dir, eval_dir = out / "train", out / "eval"
    for d in (train_dir, eval_dir):
        d.mkdir(parents=True, exist_ok=True)
        data.vocab.save(d / "vocab.txt")
    for corpus in data.mono.values():
        write_mono(train_dir, corpus, data.vocab)
    for corpus in data.parallel.values():
        write_parallel(train_dir, corpus, data.vocab)
    for corpus in data.heldout.values():
        write_parallel(eval_dir, corpus, data.vocab)
    log.info("wrote %d languages, vocab %d, to %s", len(data.languages), len(data.vocab), out)


def cmd_pretrain(args, config: RunConfig, out: Path) -> None:
    if args.data is not None:
        config = config.replace(data_dir=str(args.data))
    t0 = time.perf_counter()

    def progress(t, state, info):
        if t % config.log_interval == 0 or t == config.total_steps:
            log.info("step %d loss %.4f", t, info["loss.total"])

    result = train(config, out_dir=out, resume=args.resume, on_step=progress)
    result.state.config.save(out / CONFIG_FILE)
    log.info("finished %d steps in %.1fs, checkpoint %s", result.state.step,
             time.perf_counter() - t0, result.checkpoint_path)


def cmd_eval(args, config: RunConfig, out: Path, sweep: bool) -> None:
    state = load_checkpoint(args.checkpoint)
    params = state.pair.query
    eval_sets = _eval_sets(config, args)
    layers = None if sweep else [params.config.retrieval_layer]
    results = layer_sweep(params, eval_sets, layers, pivot=config.pivot)
    name = "layer_sweep.tsv" if sweep else "retrieval.tsv"
    write_report(out / name, results)
    scores = language_scores(params, eval_sets, seed=config.seed)
    write_gap_report(out / "transfer_gap.tsv", scores, config.pivot)
    state.config.save(out / CONFIG_FILE)
    for r in results:
        print(f"{r.direction}\tlayer {r.layer}\t{r.top1_accuracy:.4f}")
    print(f"transfer_gap\t{transfer_gap(scores, config.pivot):.3f}")


def cmd_estimate_mi(args, config: RunConfig, out: Path | None) -> None:
    state = load_checkpoint(args.checkpoint)
    eval_sets = _eval_sets(config, args)
    lines = []
    for name, corpus in eval_sets.items():
        mi = estimate_mi(state.pair.query, state.pair.key, corpus, args.layer, args.max_pairs)
        lines.append(f"{name}\t{mi!r}")
        print(f"{name}\tmi {mi:.4f} (bound log N = {np.log(min(len(corpus), args.max_pairs)):.4f})")
    if out is not None:
        (out / "mi.tsv").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        state.config.save(out / CONFIG_FILE)


def cmd_grad_check(args, config: RunConfig, out: Path | None) -> int:
    report = joint_loss_check(seed=config.seed)
    worst = max(report.relative_errors, key=report.relative_errors.get)
    print(f"max relative error {report.max_relative_error:.3e} ({worst}); "
          f"{len(report.zero_grad)} key tensors without gradient")
    if out is not None:
        (out / "grad_check.tsv").write_text(
            "".join(f"{k}\t{v!r}\n" for k, v in report.relative_errors.items()), encoding="utf-8")
        config.save(out / CONFIG_FILE)
    return 0 if report.passed else 1


def _run(args, config: RunConfig, out: Path | None) -> int:
    if args.command == "gen-data":
        cmd_gen_data(args, config, _require_out(args))
        config.save(out / CONFIG_FILE)
    elif args.command == "pretrain":
        cmd_pretrain(args, config, _require_out(args))
    elif args.command in ("eval-retrieval", "layer-sweep"):
        cmd_eval(args, config, _require_out(args), sweep=args.command == "layer-sweep")
    elif args.command == "estimate-mi":
        cmd_estimate_mi(args, config, out)
    elif args.command == "grad-check":
        return cmd_grad_check(args, config, out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    out = args.out
    created = out is not None and not out.exists()
    before = set(out.iterdir()) if out is not None and out.is_dir() else set()
    try:
        config = resolve_config(args)
        log.info("effective config:\n%s", config.to_text().rstrip())
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        return _run(args, config, out)
    except KeyboardInterrupt:
        _cleanup(out, created, before)
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one-line cause for every failure
        _cleanup(out, created, before)
        if args.verbose:
            log.exception("command failed")
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


def _cleanup(out: Path | None, created: bool, before: set) -> None:
    """Remove whatever this command wrote: the whole directory if it made it."""
    if out is None or not out.exists():
        return
    if created:
        shutil.rmtree(out, ignore_errors=True)
        return
    for p in set(out.iterdir()) - before:
        if p.is_dir():
            shutil.rmtree(p, ignore_errors=True)
        else:
            p.unlink(missing_ok=True)


if __name__ == "__main__":
    sys.exit(main())
