"""Interpretability probes over visual embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import objectives as O
from .data import BACKGROUND, COLORS, Vocabulary, collate, parse_scene, Sample
from .errors import ContractError
from .model import VisionLanguageModel
from .tensor import Tensor


class DegenerateInputError(ContractError):
    pass


@dataclass
class TokenMap:
    grid: np.ndarray          # [rows, cols] token ids
    token_strings: list       # rows x cols strings
    source: str               # "nearest_cosine" | "top_visual_token"
    scores: np.ndarray        # cosine similarity or probability of the chosen token

    def to_json(self) -> str:
        return json.dumps({"source": self.source,
                           "grid": self.grid.tolist(),
                           "tokens": self.token_strings,
                           "scores": np.round(self.scores.astype(float), 6).tolist()})


def cosine_scores(x: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.asarray(embeddings, dtype=np.float64)
    xn = np.linalg.norm(x, axis=-1, keepdims=True)
    en = np.linalg.norm(e, axis=-1)
    if np.any(xn == 0):
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    if np.any(en == 0):
        raise DegenerateInputError("embedding table has a zero row")
    return (x @ e.T) / (xn * en)


def nearest_token(x, embeddings) -> int:
    """Id of the embedding row with the highest cosine similarity to ``x``."""
    x = x.data if isinstance(x, Tensor) else x
    e = embeddings.data if isinstance(embeddings, Tensor) else embeddings
    return int(np.argmax(cosine_scores(np.ravel(x), e)))  # argmax keeps the first tie


def _grid(model, ids, scores, vocab, source) -> TokenMap:
    rows, cols = model.config.grid
    ids = np.asarray(ids).reshape(rows, cols)
    strings = [[vocab.tokens[int(i)] for i in row] for row in ids]
    return TokenMap(ids, strings, source, np.asarray(scores).reshape(rows, cols))


def _image_seq(model, image):
    batch = collate([Sample(np.asarray(image), [], [])])
    return O.assemble_batch(model, batch, include_text=False)


def token_map_nearest(model: VisionLanguageModel, image, vocab: Vocabulary) -> TokenMap:
    with T.no_grad():
        x = model.image_embeddings(image).data
    sims = cosine_scores(x, model.params["decoder.embed"].data)
    ids = sims.argmax(-1)
    return _grid(model, ids, sims[np.arange(len(ids)), ids], vocab, "nearest_cosine")


def token_map_top(model: VisionLanguageModel, image, vocab: Vocabulary) -> TokenMap:
    with T.no_grad():
        probs = O.visual_tokens(model, _image_seq(model, image)).probs[0]
    ids = probs.argmax(-1)
    return _grid(model, ids, probs[np.arange(len(ids)), ids], vocab, "top_visual_token")


def pseudo_features_from_tokens(P_visual: O.VocabDistribution, embed: Tensor) -> Tensor:
    """Each row is the probability-weighted mix of embedding rows."""
    return T.matmul(Tensor(P_visual.probs, dtype=embed.dtype), embed.detach())


def pseudo_image_features(model: VisionLanguageModel, image) -> Tensor:
    """``[P, d]`` (or ``[B, P, d]`` for a batch of images) convex combinations of embeddings."""
    image = np.asarray(image)
    single = image.ndim == 3
    batch = collate([Sample(im, [], []) for im in (image[None] if single else image)])
    with T.no_grad():
        seq = O.assemble_batch(model, batch, include_text=False)
        xp = pseudo_features_from_tokens(O.visual_tokens(model, seq), model.params["decoder.embed"])
    return T.reshape(xp, xp.shape[1:]) if single else xp


def color_accuracy(token_map: TokenMap, image, vocab: Vocabulary) -> tuple:
    """(correct, total) over solid-color patches, including background."""
    scene = parse_scene(image)
    solid = solid_patch_mask(image)
    truth = np.array([vocab[c] for c in scene.patch_colors])
    pred = token_map.grid.ravel()
    return int((pred[solid] == truth[solid]).sum()), int(solid.sum())


def solid_patch_mask(image, grid=(4, 4), patch=(8, 8)) -> np.ndarray:
    """True for patches whose pixels all share one palette color."""
    from .data import PALETTE
    names = list(PALETTE)
    ref = np.array([PALETTE[n] for n in names], dtype=np.int64)
    px = np.asarray(image, dtype=np.int64)
    nearest = ((px[..., None, :] - ref) ** 2).sum(-1).argmin(-1)
    out = []
    for r in range(grid[0]):
        for c in range(grid[1]):
            block = nearest[r * patch[0]:(r + 1) * patch[0], c * patch[1]:(c + 1) * patch[1]]
            out.append(bool((block == block.flat[0]).all()))
    return np.array(out)


def object_color_accuracy(token_map: TokenMap, image, vocab: Vocabulary) -> tuple:
    """(correct, total) over solid patches covered by the object only."""
    scene = parse_scene(image)
    solid = solid_patch_mask(image)
    obj = np.array([c != BACKGROUND for c in scene.patch_colors]) & solid
    pred = token_map.grid.ravel()
    return int((pred[obj] == vocab[scene.color]).sum()), int(obj.sum())


__all__ = ["TokenMap", "nearest_token", "token_map_nearest", "token_map_top",
           "pseudo_image_features", "color_accuracy", "object_color_accuracy",
           "DegenerateInputError", "COLORS"]
