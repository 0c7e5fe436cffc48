"""Fit the toy decoder to the synthetic task before it is frozen.

This plays the role of the pretrained VLM: the pruning module is only ever
trained against a decoder that already answers the task with all tokens.
Random vision-token dropout during fitting keeps the toy model usable on
shortened sequences, as large pretrained models are in practice.
"""
from __future__ import annotations

import logging

import numpy as np

from ..autodiff import Tape
from ..decoder import SequenceLayout
from ..optim import Adam

log = logging.getLogger(__name__)


def pretrain_decoder(decoder, features, queries, answers, steps=1500, lr=3e-3, batch_size=32,
                     drop_max=0.95, seed=0):
    """Adam on the answer cross-entropy; returns the per-step loss list.

    Each sample keeps a random fraction of vision tokens in ``[1 - drop_max, 1]``.
    """
    queries, answers = np.asarray(queries), np.asarray(answers)
    n, n_vision = features.shape[0], features.shape[1]
    layout = SequenceLayout(n_vision, queries.shape[1], answers.shape[1])
    text = np.concatenate([queries, answers], axis=1)
    rng = np.random.default_rng([seed, 6])
    decoder.freeze(False)
    opt = Adam(decoder.params.values(), lr=lr)
    losses = []
    try:
        for step in range(steps):
            idx = rng.integers(0, n, batch_size)
            rate = 1.0 - rng.uniform(0.0, drop_max, (batch_size, 1))
            keep = (rng.uniform(size=(batch_size, n_vision)) < rate).astype(np.float64)
            keep[rng.uniform(size=batch_size) < 0.25] = 1.0
            with Tape() as tape:
                emb = decoder.embed(features[idx], text[idx])
                loss = decoder.training_forward(emb, layout, keep, answers[idx])
            tape.backward(loss)
            opt.step()
            for t in opt.tensors:
                t.grad = None
            losses.append(float(loss.data))
            if step % 100 == 0:
                log.debug("pretrain step %d loss %.4f", step, losses[-1])
    finally:
        decoder.freeze(True)
    return losses
