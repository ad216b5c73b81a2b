"""Overfit the synthetic corpus with every fusion method and report the final
loss ratio and token error rate. One run of configs/toy.ini takes ~10 s."""

import argparse
import os
import tempfile

from crossutt import config as config_io
from crossutt.config import FUSION_METHODS, MaskConfig
from crossutt.model import ContextualTransducer
from crossutt.toy import make_corpus
from crossutt.training import decode, train

TOY = os.path.join(os.path.dirname(__file__), os.pardir, "configs", "toy.ini")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=TOY)
    ap.add_argument("--methods", default=",".join(FUSION_METHODS))
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--steps", type=int)
    args = ap.parse_args()

    base = config_io.load(args.config)
    with tempfile.TemporaryDirectory() as tmp:
        manifest = make_corpus(tmp, vocab=base.model.vocab, d_in=base.model.d_in)
        print("method        seed  loss0     final     ratio   TER")
        for method in args.methods.split(","):
            for seed in range(args.seeds):
                cfg = config_io.load(args.config)
                cfg.fusion.method = method
                cfg.training.seed = seed
                if args.steps is not None:
                    cfg.training.steps = args.steps
                if method == "chunked":
                    cfg.mask = MaskConfig(mode="streaming", chunk=3, lookahead=3)
                model = ContextualTransducer(cfg)
                losses = train(model, manifest).losses
                ter = decode(model, manifest).token_error_rate
                print(f"{method:12s}  {seed:4d}  {losses[0]:8.4f}  {losses[-1]:8.4f}  "
                      f"{losses[-1] / losses[0]:6.4f}  {ter:.3f}")


if __name__ == "__main__":
    main()
