"""Multi-modal sequence assembly, visual tokens and the training losses.

Layout of every assembled row::

    [BOS][visual x P][instruction][response][EOS][PAD ...]

Supervision follows the next-token convention: output index ``n`` is paired
with whatever sits at position ``n + 1``. Text pairs cover the response and
EOS only; visual pairs cover every patch, with BOS predicting patch 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BOS, Batch, collate, Sample
from .errors import ContractError, LengthError, ShapeError
from .model import VisionLanguageModel
from .tensor import Tensor

PROB_FLOOR = 1e-12
VISUAL, TEXT = "visual", "text"


@dataclass
class MultiModalSequence:
    """A batch of assembled rows sharing one layout.

    ``lm_pairs`` rows are ``(row, n, target_id)``; ``vm_pairs`` rows are
    ``(row, n, p)`` with ``p == n + 1`` a visual position.
    """

    embeddings: Tensor        # [B, L, d]
    x_image: Tensor | None    # [B, P, d], the visual rows of ``embeddings``
    modality_tags: list       # length L
    token_ids: np.ndarray     # [B, L]; -1 at visual positions
    lm_pairs: np.ndarray      # [K, 3]
    vm_pairs: np.ndarray      # [K, 3]
    visual_start: int = 1

    @property
    def length(self) -> int:
        return self.embeddings.shape[1]

    @property
    def batch_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_visual(self) -> int:
        return sum(tag == VISUAL for tag in self.modality_tags)


class VocabDistribution:
    """Rows of probability vectors over the vocabulary, kept in log space."""

    def __init__(self, logp: Tensor, probs: np.ndarray | None = None):
        self.logp = logp
        self._probs = probs

    @classmethod
    def from_logits(cls, logits: Tensor) -> "VocabDistribution":
        return cls(T.log_softmax(logits))

    @classmethod
    def from_probs(cls, probs) -> "VocabDistribution":
        probs = np.asarray(probs, dtype=T.default_dtype())
        if np.any(probs < 0) or np.any(np.abs(probs.sum(-1) - 1.0) > 1e-6):
            raise ContractError("rows must be nonnegative and sum to 1")
        return cls(Tensor(np.log(np.maximum(probs, PROB_FLOOR))), probs)

    @property
    def probs(self) -> np.ndarray:
        return self._probs if self._probs is not None else np.exp(self.logp.data)

    @property
    def shape(self):
        return self.logp.shape

    def detach(self) -> "VocabDistribution":
        return VocabDistribution(self.logp.detach(), self._probs)


@dataclass
class LossTerms:
    total: Tensor
    lm: Tensor | None = None
    vm: Tensor | None = None

    def values(self) -> dict:
        f = lambda t: None if t is None else t.item()
        return {"loss": f(self.total), "loss_lm": f(self.lm), "loss_vm": f(self.vm)}


# ---------------------------------------------------------------- assembly

def assemble_batch(model: VisionLanguageModel, batch: Batch, x_image: Tensor | None = None,
                   transcript: np.ndarray | None = None,
                   include_text: bool = True) -> MultiModalSequence:
    """Build ``X_input`` plus supervision index sets for a batch.

    ``x_image`` replaces the adapter output (e.g. pseudo features). With
    ``transcript`` (``[B, P]`` token ids) the visual slot holds text embeddings
    instead, as used for text-only pretraining; the transcript positions then
    join the response and EOS in the text pairs.
    """
    cfg = model.config
    B, P = len(batch), cfg.n_patches
    if include_text:
        text, n_ins, n_res = batch.text_block()
    else:
        text = np.zeros((B, 0), dtype=np.int64)
        n_ins = n_res = np.zeros(B, dtype=np.int64)
    L = 1 + P + text.shape[1]
    if L > cfg.max_len:
        raise LengthError(f"assembled length {L} exceeds max_len {cfg.max_len}")

    bos = model.embed_text(np.full((B, 1), BOS))
    if transcript is not None:
        transcript = np.asarray(transcript, dtype=np.int64)
        visual = model.embed_text(transcript)
        x_img = None
    else:
        visual = model.image_embeddings(batch.pixels) if x_image is None else x_image
        if visual.shape != (B, P, cfg.model_dim):
            raise ShapeError(f"visual embeddings {visual.shape} != {(B, P, cfg.model_dim)}")
        x_img = visual
    parts = [bos, visual]
    if text.shape[1]:
        parts.append(model.embed_text(text))
    x = T.concat(parts, axis=1)

    ids = np.full((B, L), -1, dtype=np.int64)
    ids[:, 0] = BOS
    if transcript is not None:
        ids[:, 1:1 + P] = transcript
    ids[:, 1 + P:] = text
    tag = TEXT if transcript is not None else VISUAL
    tags = [TEXT] + [tag] * P + [TEXT] * text.shape[1]

    off = 1 + P
    lm = []
    for b in range(B):
        has_text = n_ins[b] + n_res[b] > 0
        end = off + n_ins[b] + n_res[b] + (1 if has_text else 0)  # one past EOS
        if transcript is not None:
            lm.extend((b, q - 1, ids[b, q]) for q in range(1, off))
        lm.extend((b, q - 1, ids[b, q]) for q in range(off + n_ins[b], end))
    vm = [] if transcript is not None else [(b, p - 1, p) for b in range(B) for p in range(1, 1 + P)]
    return MultiModalSequence(
        embeddings=x,
        x_image=x_img,
        modality_tags=tags,
        token_ids=ids,
        lm_pairs=np.array(lm, dtype=np.int64).reshape(-1, 3),
        vm_pairs=np.array(vm, dtype=np.int64).reshape(-1, 3),
    )


def assemble_input(model: VisionLanguageModel, image, instruction_tokens, response_tokens,
                   x_image: Tensor | None = None) -> MultiModalSequence:
    """Single-sample form of :func:`assemble_batch` (batch of one)."""
    batch = collate([Sample(np.asarray(image), list(instruction_tokens), list(response_tokens))])
    if x_image is not None and x_image.ndim == 2:
        x_image = T.reshape(x_image, (1,) + x_image.shape)
    return assemble_batch(model, batch, x_image=x_image)


# ---------------------------------------------------------------- distributions

def compute_Q(model: VisionLanguageModel, seq: MultiModalSequence) -> VocabDistribution:
    """MM-head distribution at every decoder output position, ``[B, L, C]``."""
    hidden = model.decode(seq.embeddings, seq.modality_tags)
    return VocabDistribution.from_logits(model.mm_head(hidden))


def visual_tokens(model: VisionLanguageModel, seq: MultiModalSequence,
                  detach_input: bool = False) -> VocabDistribution:
    """VM-head distribution for each visual embedding, ``[B, P, C]``."""
    if seq.x_image is None or seq.n_visual == 0:
        raise ContractError("sequence has no visual positions")
    x = seq.x_image.detach() if detach_input else seq.x_image
    return VocabDistribution.from_logits(model.vm_head(x))


# ---------------------------------------------------------------- losses

def _kl_rows(label: VocabDistribution, label_idx, pred: VocabDistribution, pred_idx) -> Tensor:
    """Mean over rows of sum_i p(i) (log p(i) - log q(i)); ``label`` is treated as constant."""
    p = label.probs[label_idx]
    logp = label.logp.data[label_idx]
    const = np.where(p > 0, p * logp, 0.0).sum()
    logq = T.index(pred.logp, pred_idx)
    cross = T.tsum(T.mul(logq, Tensor(p, dtype=logq.dtype)))
    k = p.shape[0]
    return T.mul(T.neg(cross) + float(const), 1.0 / k)


def loss_lm(seq: MultiModalSequence, Q: VocabDistribution) -> Tensor:
    """Mean next-token cross-entropy over the text pairs."""
    if len(seq.lm_pairs) == 0:
        raise ContractError("loss_lm: no supervised text positions")
    rows, ns, targets = seq.lm_pairs.T
    picked = T.index(Q.logp, (rows, ns, targets))
    return T.mul(T.tsum(picked), -1.0 / len(rows))


def loss_vm(seq: MultiModalSequence, Q: VocabDistribution, P_visual: VocabDistribution) -> Tensor:
    """Forward KL(P'||Q) over the visual pairs; P' is the (constant) label."""
    if len(seq.vm_pairs) == 0:
        raise ContractError("loss_vm: no supervised visual positions")
    rows, ns, ps = seq.vm_pairs.T
    return _kl_rows(P_visual, (rows, ps - seq.visual_start), Q, (rows, ns))


def loss_vm_stage3(seq: MultiModalSequence, Q: VocabDistribution,
                   P_visual: VocabDistribution) -> Tensor:
    """Reversed KL(Q||P') over the visual pairs; Q is the (constant) label."""
    if len(seq.vm_pairs) == 0:
        raise ContractError("loss_vm_stage3: no supervised visual positions")
    rows, ns, ps = seq.vm_pairs.T
    return _kl_rows(Q, (rows, ns), P_visual, (rows, ps - seq.visual_start))


def loss_mm(model: VisionLanguageModel, seq: MultiModalSequence,
            P_visual: VocabDistribution | None = None) -> LossTerms:
    """Language plus visual modelling loss from one decoder pass.

    The visual-token labels are computed without gradient unless supplied.
    """
    if len(seq.lm_pairs) == 0 or len(seq.vm_pairs) == 0:
        raise ContractError("loss_mm needs both text and visual pairs")
    Q = compute_Q(model, seq)
    if P_visual is None:
        with T.no_grad():
            P_visual = visual_tokens(model, seq)
    P_visual = P_visual.detach()
    lm = loss_lm(seq, Q)
    vm = loss_vm(seq, Q, P_visual)
    return LossTerms(lm + vm, lm, vm)


# ---------------------------------------------------------------- per-stage objectives

def lm_objective(model, batch: Batch) -> LossTerms:
    seq = assemble_batch(model, batch)
    lm = loss_lm(seq, compute_Q(model, seq))
    return LossTerms(lm, lm, None)


def mm_objective(model, batch: Batch) -> LossTerms:
    return loss_mm(model, assemble_batch(model, batch))


def stage3_teacher(model, batch: Batch):
    """Frozen inputs of the stage-III loss: visual embeddings and the decoder's
    log-distribution at each position that predicts a patch, both ``[B, P, .]``."""
    with T.no_grad():
        seq = assemble_batch(model, batch, include_text=False)
        Q = compute_Q(model, seq)
    rows, ns, _ = seq.vm_pairs.T
    B, P = seq.batch_size, seq.n_visual
    return seq.x_image.data, Q.logp.data[rows, ns].reshape(B, P, -1)


def stage3_loss(model, x_image: np.ndarray, q_logp: np.ndarray) -> LossTerms:
    """KL(Q||P') with the teacher arrays from :func:`stage3_teacher` held constant."""
    B, P, _ = x_image.shape
    logp = T.log_softmax(model.vm_head(Tensor(x_image)))
    q = np.exp(q_logp)
    const = np.where(q > 0, q * q_logp, 0.0).sum()
    cross = T.tsum(T.mul(logp, Tensor(q, dtype=logp.dtype)))
    vm = T.mul(T.neg(cross) + float(const), 1.0 / (B * P))
    return LossTerms(vm, None, vm)


def stage3_objective(model, batch: Batch) -> LossTerms:
    """Fit the VM head to the decoder's predictions on pure-image sequences."""
    return stage3_loss(model, *stage3_teacher(model, batch))


def pretrain_objective(model, batch: Batch, transcripts: np.ndarray) -> LossTerms:
    """Text-only next-token loss with the image slot holding its patch-color transcript."""
    seq = assemble_batch(model, batch, transcript=transcripts)
    lm = loss_lm(seq, compute_Q(model, seq))
    return LossTerms(lm, lm, None)
