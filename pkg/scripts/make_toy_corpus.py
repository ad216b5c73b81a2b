"""Write the synthetic conversational corpus (feature files + manifest.tsv)."""

import argparse

from crossutt.toy import make_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out")
    ap.add_argument("--conversations", type=int, default=3)
    ap.add_argument("--utterances", type=int, default=3)
    ap.add_argument("--vocab", type=int, default=8)
    ap.add_argument("--d-in", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    m = make_corpus(args.out, args.conversations, args.utterances, args.vocab, args.d_in,
                    seed=args.seed)
    print(f"{len(m.conversations)} conversations, {m.total_frames} frames -> {args.out}/manifest.tsv")


if __name__ == "__main__":
    main()
