"""Synthetic conversational corpus for desk-scale runs.

Each token id owns a random prototype feature vector; an utterance is its
label sequence rendered as a few noisy frames per token, so labels are
recoverable from audio and a small model can overfit quickly.
"""

from __future__ import annotations

import os
from dataclasses import replace

import numpy as np

from .features import write_features
from .scheduler import Conversation, Manifest, Utterance, format_manifest


def make_corpus(directory, conversations=3, utterances=3, vocab=8, d_in=16,
                frames_per_token=6, max_labels=4, seed=0) -> Manifest:
    """Write feature files plus ``manifest.tsv`` under ``directory``."""
    rng = np.random.default_rng(seed)
    os.makedirs(directory, exist_ok=True)
    prototypes = rng.standard_normal((vocab + 1, d_in))
    convs = []
    for c in range(conversations):
        cid = f"conv{c}"
        utts = []
        for u in range(utterances):
            n = int(rng.integers(2, max_labels + 1))
            labels = tuple(int(x) for x in rng.integers(1, vocab + 1, size=n))
            # one silence frame block between tokens keeps repeats separable
            blocks = []
            for y in labels:
                blocks.append(np.repeat(prototypes[y][None], frames_per_token, axis=0))
                blocks.append(np.repeat(prototypes[0][None], 2, axis=0))
            feats = np.concatenate(blocks)
            feats = feats + 0.1 * rng.standard_normal(feats.shape)
            uid = f"{cid}-u{u}"
            name = f"{uid}.feat"
            write_features(os.path.join(directory, name), feats)
            utts.append(Utterance(uid, feats.shape[0], labels,
                                  os.path.abspath(os.path.join(directory, name)), float(u)))
        convs.append(Conversation(cid, utts))
    manifest = Manifest(convs)
    # the file lists bare names, resolved against its own directory on read
    local = Manifest([Conversation(c.conversation_id,
                                   [replace(u, feature_ref=os.path.basename(u.feature_ref))
                                    for u in c.utterances]) for c in convs])
    with open(os.path.join(directory, "manifest.tsv"), "w", encoding="utf-8") as fh:
        fh.write(format_manifest(local))
    return manifest
