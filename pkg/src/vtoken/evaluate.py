"""Greedy captioning and held-out evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import objectives as O
from . import tensor as T
from .analysis import pseudo_features_from_tokens
from .data import EOS, Batch, collate
from .model import VisionLanguageModel


def greedy_generate(model: VisionLanguageModel, batch: Batch, max_new: int = 8,
                    x_image=None) -> list:
    """Greedy continuation of each row's instruction; returns token lists without EOS."""
    B = len(batch)
    generated = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with T.no_grad():
        if x_image is None:
            x_image = model.image_embeddings(batch.pixels)
        for _ in range(max_new):
            rows = Batch(batch.pixels, batch.instructions,
                         [g for g in generated])
            # text block appends EOS after the response; strip it by reading at the last real token
            ids, n_ins, n_res = rows.text_block()
            seq = O.assemble_batch(model, rows, x_image=x_image)
            Q = O.compute_Q(model, seq)
            last = 1 + model.config.n_patches + n_ins + n_res - 1
            nxt = Q.logp.data[np.arange(B), last].argmax(-1)
            for b in range(B):
                if done[b]:
                    continue
                if nxt[b] == EOS:
                    done[b] = True
                else:
                    generated[b].append(int(nxt[b]))
            if done.all():
                break
    return generated


@dataclass
class EvalResult:
    accuracy: float
    loss_lm: float
    loss_vm: float | None = None
    n: int = 0


def _batches(samples, size):
    for i in range(0, len(samples), size):
        yield collate(samples[i:i + size])


def evaluate(model: VisionLanguageModel, samples, batch_size: int = 64,
             pseudo: bool = False, max_new: int = 8) -> EvalResult:
    """Exact-match accuracy and mean text loss; ``pseudo`` swaps in pseudo image features."""
    hits, lm_sum, lm_n = 0, 0.0, 0
    for batch in _batches(samples, batch_size):
        with T.no_grad():
            x_image = model.image_embeddings(batch.pixels)
            if pseudo:
                img_seq = O.assemble_batch(model, batch, x_image=x_image, include_text=False)
                x_image = pseudo_features_from_tokens(O.visual_tokens(model, img_seq),
                                                      model.params["decoder.embed"])
            seq = O.assemble_batch(model, batch, x_image=x_image)
            lm = O.loss_lm(seq, O.compute_Q(model, seq)).item()
        k = len(seq.lm_pairs)
        lm_sum += lm * k
        lm_n += k
        out = greedy_generate(model, batch, max_new=max_new, x_image=x_image)
        hits += sum(o == list(r) for o, r in zip(out, batch.responses))
    return EvalResult(hits / len(samples), lm_sum / lm_n, None, len(samples))


def heldout_visual_kl(model: VisionLanguageModel, samples, batch_size: int = 64) -> float:
    """Mean forward KL(P'||Q) over all visual pairs of the given images."""
    total, count = 0.0, 0
    for batch in _batches(samples, batch_size):
        with T.no_grad():
            seq = O.assemble_batch(model, batch, include_text=False)
            kl = O.loss_vm(seq, O.compute_Q(model, seq), O.visual_tokens(model, seq)).item()
        total += kl * len(seq.vm_pairs)
        count += len(seq.vm_pairs)
    return total / count
