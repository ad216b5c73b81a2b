"""Command line: ``crossutt {plan,train,decode,mask dump,gradcheck}``.

Every failure prints one line, ``error: <kind>: <message>``, and exits 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import config as config_io
from . import scheduler
from .attention_masks import NON_STREAMING, STREAMING, MaskSpec, build_mask, render
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, CrossUttError
from .model import ContextualTransducer
from .training import decode, finite_difference_check, gradcheck_setup, preload, train

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _optional_int(text):
    return None if text.lower() in ("none", "unlimited") else int(text)


def _int_list(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


def _load_config(args) -> config_io.RunConfig:
    cfg = config_io.load(args.config) if getattr(args, "config", None) else config_io.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.training.seed = args.seed
    return cfg.validate()


# subcommands

def cmd_plan(args, out):
    cfg = _load_config(args)
    rows = args.rows or cfg.scheduler.rows
    capacity = args.capacity or cfg.scheduler.capacity
    manifest = scheduler.read_manifest(args.manifest)
    utils = {}
    exports = []
    for splicing in (False, True):
        p = scheduler.plan(manifest, rows, capacity, splicing)
        window = p.num_steps if args.window is None else min(args.window, p.num_steps)
        u = utils[splicing] = scheduler.utilization(p, args.window)
        label = "splicing" if splicing else "no splicing"
        out.write(f"== {label}: {p.num_steps} steps, rows={rows} capacity={capacity}\n")
        out.write(scheduler.render_grid(p, args.window))
        out.write(f"utilization {u:.4f} ({u * 100:.2f}%): {p.filled_frames(window)} of "
                  f"{rows * capacity * window} frames over {window} steps\n")
        exports.append(scheduler.export_plan(p))
    delta = utils[True] - utils[False]
    out.write(f"delta {delta * 100:+.2f}pp\n")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("".join(exports))


def cmd_train(args, out):
    cfg = _load_config(args)
    if args.steps is not None:
        cfg.training.steps = args.steps
    manifest = scheduler.read_manifest(args.manifest)
    model = ContextualTransducer(cfg)
    os.makedirs(args.out, exist_ok=True)
    loss_path = os.path.join(args.out, "loss.txt")

    def report(step, value):
        if args.verbose:
            out.write(f"step {step} loss {value:.6f}\n")

    result = train(model, manifest, loader=preload(manifest), on_step=report)
    save_checkpoint(args.out, model)
    with open(loss_path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{step}\t{value!r}\n" for step, value in enumerate(result.losses))
    if result.losses:
        first, last = result.losses[0], result.losses[-1]
        out.write(f"trained {len(result.losses)} steps: loss {first:.4f} -> {last:.4f} "
                  f"({last / first:.2%} of initial)\n")
    else:
        out.write("trained 0 steps\n")
    out.write(f"checkpoint {args.out}\n")


def cmd_decode(args, out):
    model = load_checkpoint(args.checkpoint)
    manifest = scheduler.read_manifest(args.manifest)
    report = decode(model, manifest)
    lines = [f"{uid}\thyp={','.join(map(str, hyp))}\tref={','.join(map(str, ref))}"
             for uid, hyp, ref in report.hypotheses]
    lines.append(f"TER {report.token_error_rate:.4f} ({report.errors}/{report.ref_tokens}) "
                 f"over {len(report.hypotheses)} utterances")
    text = "\n".join(lines) + "\n"
    out.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)


def mask_spec_from_args(args) -> MaskSpec:
    base = _load_config(args).mask_spec() if args.config else MaskSpec()
    fields = {}
    for name, attr in (("mode", "mode"), ("chunk_size", "chunk"), ("left_cap", "left_cap"),
                       ("prev_frame_cap", "prev_frame_cap"), ("prev_utt_cap", "prev_utt_cap"),
                       ("prev_utterance_lengths", "prev")):
        value = getattr(args, attr)
        if value is not None:
            fields[name] = value
    if args.lookahead is not None:
        fields["lookahead"] = _optional_int(args.lookahead)
    return dataclasses.replace(base, **fields)


def cmd_mask_dump(args, out):
    spec = mask_spec_from_args(args)
    text = render(build_mask(spec, args.frames))
    out.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_gradcheck(args, out):
    model, loss_fn = gradcheck_setup(args.seed or 0)
    worst = finite_difference_check(model, loss_fn)
    name = max(worst, key=worst.get)
    ok = worst[name] < GRADCHECK_TOLERANCE
    out.write(f"{len(worst)} tensors, {sum(a.size for a in model.params.values())} elements; "
              f"max relative error {worst[name]:.3e} ({name}) {'ok' if ok else 'FAILED'}\n")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crossutt", description="Cross-utterance context Conformer-Transducer tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", help="batch plan occupancy and utilization")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--rows", type=int)
    p.add_argument("--capacity", type=int)
    p.add_argument("--window", type=int, help="only count the first N steps")
    p.add_argument("--out", help="write both plan exports here")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train and write a checkpoint plus loss.txt")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="greedy decode and token error rate")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("mask", help="attention mask tools")
    msub = p.add_subparsers(dest="mask_command", required=True, parser_class=_Parser)
    d = msub.add_parser("dump", help="print a composed mask as a 0/1 grid")
    d.add_argument("--config")
    d.add_argument("--mode", choices=(NON_STREAMING, STREAMING))
    d.add_argument("--chunk", type=int)
    d.add_argument("--lookahead", help="frames, or 'none' for unlimited")
    d.add_argument("--left-cap", type=_optional_int)
    d.add_argument("--prev", type=_int_list, help="cached lengths, most recent first (e.g. 9,6)")
    d.add_argument("--prev-frame-cap", type=_optional_int)
    d.add_argument("--prev-utt-cap", type=_optional_int)
    d.add_argument("--frames", type=int, required=True, help="current utterance frames")
    d.add_argument("--out")
    d.set_defaults(func=cmd_mask_dump)

    p = sub.add_parser("gradcheck", help="finite-difference check of the contextual model")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, out) or 0
    except _UsageError as exc:
        reason = f"usage: {exc}"
    except CrossUttError as exc:
        reason = f"{exc.kind}: {exc}"
    except OSError as exc:
        reason = f"io: {exc.filename or ''}: {exc.strerror}".replace(": : ", ": ")
    except ValueError as exc:  # e.g. int("x") from an option converter
        reason = f"{ConfigError.kind}: {exc}"
    sys.stderr.write(f"error: {reason}".replace("\n", " ") + "\n")
    return 2


if __name__ == "__main__":
    sys.exit(main())
