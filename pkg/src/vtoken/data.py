"""Synthetic shape-caption corpus, toy tokenizer and dataset files.

Each image is a 4x4 grid of 8x8 patches on a black background holding one
colored object inside one quadrant. Objects are built from whole patches
(square, bar, column) or drawn inside a single patch (circle), so every
patch is either a solid color or a two-color shape.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import VocabularyError

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")

COLORS = ("red", "green", "blue", "yellow")
BACKGROUND = "black"
SHAPES = ("square", "bar", "column", "circle")
ROWS = ("top", "bottom")
COLS = ("left", "right")

PALETTE = {
    "red": (200, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 200),
    "yellow": (220, 200, 40),
    "black": (15, 15, 15),
}
NOISE = 12

_TEMPLATE_WORDS = (
    "describe", "the", "image", "what", "color", "is", "shape", "where", "it", "?",
    "a", "of", "in", "on", "there", "this", "picture", "and", "with", "object",
    "background", ",", ".", "which", "see", "do", "you",
)

TASKS = ("caption", "color", "shape", "where")
INSTRUCTIONS = {
    "caption": "",
    "color": "what color is the shape ?",
    "shape": "what shape is it ?",
    "where": "where is the shape ?",
}


class Vocabulary:
    """Whitespace tokenizer over a fixed, dense id table."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if tuple(self.tokens[:3]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")

    @classmethod
    def default(cls, size: int = 64) -> "Vocabulary":
        words = [*SPECIALS, *COLORS, BACKGROUND, *SHAPES, *ROWS, *COLS, *_TEMPLATE_WORDS]
        if size < len(words):
            raise ValueError(f"vocabulary size {size} below the {len(words)} required tokens")
        words += [f"<extra_{i}>" for i in range(size - len(words))]
        return cls(words)

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, word: str) -> int:
        try:
            return self.ids[word]
        except KeyError:
            raise VocabularyError(f"out-of-vocabulary word: {word!r}") from None

    def encode(self, text: str) -> list:
        return [self[w] for w in text.split()]

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            out.append(self.tokens[i])
        return " ".join(out)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())


# ---------------------------------------------------------------- scenes

@dataclass(frozen=True)
class Scene:
    color: str
    shape: str
    row: str          # quadrant row: "top" | "bottom"
    col: str          # quadrant column: "left" | "right"
    patch_colors: tuple  # per patch, row-major; BACKGROUND for empty patches

    def caption(self) -> str:
        return f"{self.color} {self.shape} {self.row} {self.col}"

    def answer(self, task: str) -> str:
        if task == "caption":
            return self.caption()
        if task == "color":
            return self.color
        if task == "shape":
            return self.shape
        if task == "where":
            return f"{self.row} {self.col}"
        raise ValueError(f"unknown task {task!r}")


def _disk_mask(ph: int, pw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:ph, 0:pw]
    cy, cx = (ph - 1) / 2, (pw - 1) / 2
    r = min(ph, pw) * 3 / 8
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def render(color: str, shape: str, row: str, col: str, rng: np.random.Generator,
           grid=(4, 4), patch=(8, 8)) -> np.ndarray:
    """Draw one object into a noisy black image; returns uint8 ``[H, W, 3]``."""
    gr, gc = grid
    ph, pw = patch
    qr0 = 0 if row == "top" else gr // 2
    qc0 = 0 if col == "left" else gc // 2
    if shape == "square":
        cells = [(qr0 + i, qc0 + j) for i in range(2) for j in range(2)]
    elif shape == "bar":
        r = qr0 + int(rng.integers(2))
        cells = [(r, qc0), (r, qc0 + 1)]
    elif shape == "column":
        c = qc0 + int(rng.integers(2))
        cells = [(qr0, c), (qr0 + 1, c)]
    elif shape == "circle":
        cells = [(qr0 + int(rng.integers(2)), qc0 + int(rng.integers(2)))]
    else:
        raise ValueError(f"unknown shape {shape!r}")

    img = np.empty((gr * ph, gc * pw, 3), dtype=np.int64)
    img[:] = PALETTE[BACKGROUND]
    fill = np.array(PALETTE[color])
    disk = _disk_mask(ph, pw)
    for r, c in cells:
        block = img[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw]
        if shape == "circle":
            block[disk] = fill
        else:
            block[:] = fill
    img += rng.integers(-NOISE, NOISE + 1, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def parse_scene(pixels: np.ndarray, grid=(4, 4), patch=(8, 8)) -> Scene:
    """Recover the scene description from pixels alone."""
    names = list(PALETTE)
    ref = np.array([PALETTE[n] for n in names], dtype=np.int64)
    px = np.asarray(pixels, dtype=np.int64)
    nearest = ((px[..., None, :] - ref) ** 2).sum(-1).argmin(-1)  # [H, W]
    gr, gc = grid
    ph, pw = patch
    bg = names.index(BACKGROUND)
    patch_colors, solid, partial = [], [], []
    for r in range(gr):
        for c in range(gc):
            labels = nearest[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw].ravel()
            fg = labels[labels != bg]
            if fg.size == 0:
                patch_colors.append(BACKGROUND)
                continue
            name = names[np.bincount(fg, minlength=len(names)).argmax()]
            patch_colors.append(name)
            (solid if fg.size == labels.size else partial).append((r, c, name))
    cells = solid + partial
    if not cells:
        raise ValueError("image holds no object")
    color = cells[0][2]
    rows = sorted({r for r, _, _ in cells})
    cols = sorted({c for _, c, _ in cells})
    if partial:
        shape = "circle"
    elif len(cells) == 4:
        shape = "square"
    elif len(rows) == 1:
        shape = "bar"
    else:
        shape = "column"
    row = "top" if rows[0] < gr // 2 else "bottom"
    col = "left" if cols[0] < gc // 2 else "right"
    return Scene(color, shape, row, col, tuple(patch_colors))


# ---------------------------------------------------------------- samples & files

@dataclass
class Sample:
    pixels: np.ndarray
    instruction: list
    response: list


def make_sample(pixels: np.ndarray, task: str, vocab: Vocabulary) -> Sample:
    if task == "image":
        return Sample(pixels, [], [])
    scene = parse_scene(pixels)
    return Sample(pixels, vocab.encode(INSTRUCTIONS[task]), vocab.encode(scene.answer(task)))


def generate_samples(seed: int, n_samples: int, task: str = "caption",
                     vocab: Vocabulary | None = None) -> list:
    """Balanced samples: combos cycle through shuffled blocks of color x shape x quadrant.

    ``task`` is one of ``caption``, ``image`` (no text), ``instruct`` (the four
    tasks in rotation), or any single entry of :data:`TASKS`.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    vocab = vocab or Vocabulary.default()
    rng = np.random.default_rng(seed)
    combos = [(c, s, r, q) for c in COLORS for s in SHAPES for r in ROWS for q in COLS]
    out = []
    while len(out) < n_samples:
        for k in rng.permutation(len(combos)):
            if len(out) == n_samples:
                break
            pixels = render(*combos[k], rng)
            t = TASKS[len(out) % len(TASKS)] if task == "instruct" else task
            out.append(make_sample(pixels, t, vocab))
    return out


def write_jsonl(samples, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for s in samples:
            fh.write(json.dumps({"pixels": s.pixels.tolist(),
                                 "instruction": [int(i) for i in s.instruction],
                                 "response": [int(i) for i in s.response]},
                                separators=(",", ":")) + "\n")
    os.replace(tmp, path)


def generate_corpus(path, seed: int, n_samples: int, task: str = "caption",
                    vocab: Vocabulary | None = None) -> Path:
    samples = generate_samples(seed, n_samples, task, vocab)
    write_jsonl(samples, path)
    return Path(path)


class DatasetParseError(ValueError):
    pass


def read_jsonl(path) -> list:
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pixels = np.asarray(rec["pixels"], dtype=np.uint8)
                samples.append(Sample(pixels, list(rec["instruction"]), list(rec["response"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetParseError(f"{path}:{lineno}: {exc}") from None
    return samples


def transcript_ids(pixels: np.ndarray, vocab: Vocabulary) -> list:
    """Per-patch color words of an image, row-major: the text rendering of the grid."""
    return [vocab[w] for w in parse_scene(pixels).patch_colors]


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    pixels: np.ndarray          # [B, H, W, 3] uint8
    instructions: list
    responses: list
    indices: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.instructions)

    def text_block(self):
        """``[instruction][response][EOS]`` per row, right-padded with PAD.

        Returns ``(ids[B, T], n_instruction[B], n_response[B])``; samples with no
        text at all (image-only) get ``T == 0``.
        """
        n_ins = np.array([len(i) for i in self.instructions], dtype=np.int64)
        n_res = np.array([len(r) for r in self.responses], dtype=np.int64)
        has_text = (n_ins + n_res) > 0
        lengths = n_ins + n_res + has_text
        ids = np.full((len(self), int(lengths.max(initial=0))), PAD, dtype=np.int64)
        for b, (ins, res) in enumerate(zip(self.instructions, self.responses)):
            row = list(ins) + list(res) + ([EOS] if has_text[b] else [])
            ids[b, :len(row)] = row
        return ids, n_ins, n_res


def collate(samples, indices=None) -> Batch:
    return Batch(np.stack([s.pixels for s in samples]),
                 [list(s.instruction) for s in samples],
                 [list(s.response) for s in samples],
                 None if indices is None else np.asarray(indices))


def batch_iterator(samples, batch_size: int, seed: int, epoch: int = 0, drop_last: bool = True):
    """One epoch of batches in a seeded shuffle order."""
    if isinstance(samples, (str, os.PathLike)):
        samples = read_jsonl(samples)
    order = np.random.default_rng([seed, epoch]).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield collate([samples[i] for i in idx], idx)


def batches_per_epoch(n_samples: int, batch_size: int, drop_last: bool = True) -> int:
    return n_samples // batch_size if drop_last else -(-n_samples // batch_size)
