"""Staged training: per-stage freezing, AdamW, warmup + cosine schedule, metrics."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import objectives as O
from .errors import ContractError, DomainError, NumericError
from .model import GROUPS, VisionLanguageModel, init_params

log = logging.getLogger(__name__)

STAGE_GROUPS = {
    0: ("decoder", "mm_head"),
    1: ("adapter",),
    2: ("decoder", "mm_head", "adapter"),
    3: ("vm_head",),
    4: ("decoder", "mm_head"),
}
STAGE_LOSS = {0: "pretrain", 1: "lm", 2: "lm", 3: "vm_stage3", 4: "mm"}
STAGE_DATASET = {0: "instruct.jsonl", 1: "caption.jsonl", 2: "instruct.jsonl",
                 3: "images.jsonl", 4: "instruct.jsonl"}
# Peak learning rates per stage follow the published schedule; batch sizes are toy-scale.
STAGE_LR = {0: 1e-3, 1: 1e-3, 2: 2e-5, 3: 1e-3, 4: 2e-5}
STAGE_BATCH = {0: 32, 1: 32, 2: 16, 3: 32, 4: 16}
# The VM head reads raw adapter output, far smaller in scale than the normalised
# hidden states behind the MM head, so at the same lr it needs many more steps;
# its teacher is cached, which keeps those epochs cheap. Stage IV runs until the
# held-out caption accuracy of both the joint and the LM-only objective settles.
STAGE_EPOCHS = {0: 10, 1: 3, 2: 3, 3: 300, 4: 20}
STAGE_NAMES = {0: "pretrain", 1: "I", 2: "II", 3: "III", 4: "IV"}

METRIC_FIELDS = ("step", "lr", "loss", "loss_lm", "loss_vm", "seconds", "grad_norm")


class TrainingError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: int
    batch_size: int | None = None
    lr: float | None = None
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    epochs: int | None = None
    seed: int = 0
    dataset: str | None = None
    clip_norm: float | None = 1.0
    loss: str | None = None

    def __post_init__(self):
        if self.stage not in STAGE_GROUPS:
            raise ContractError(f"unknown stage {self.stage!r}; expected one of 0-4")
        if self.batch_size is None:
            self.batch_size = STAGE_BATCH[self.stage]
        if self.lr is None:
            self.lr = STAGE_LR[self.stage]
        if self.loss is None:
            self.loss = STAGE_LOSS[self.stage]
        if self.epochs is None:
            self.epochs = STAGE_EPOCHS[self.stage]
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ContractError("epochs and batch_size must be positive, lr nonnegative")
        allowed = {STAGE_LOSS[self.stage]} | ({"lm"} if self.stage == 4 else set())
        if self.loss not in allowed:
            raise ContractError(f"stage {self.stage} cannot train with loss {self.loss!r}")

    @property
    def trainable(self) -> tuple:
        return STAGE_GROUPS[self.stage]

    @classmethod
    def from_file(cls, path, **overrides) -> "StageConfig":
        raw = json.loads(Path(path).read_text())
        raw.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ContractError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_ratio: float) -> float:
    """Linear warmup to ``peak_lr`` then half-cosine decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ContractError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = min(math.ceil(warmup_ratio * total_steps), total_steps - 1)
    if step < warmup:
        return peak_lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam over a fixed list of named parameters."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: dict, lr: float, weight_decay: float = 0.0):
        for n, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {n}")
        missing = set(self.params) - set(grads)
        if missing:
            raise ContractError(f"no gradient for {sorted(missing)[:3]}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in self.params.items():
            g = grads[n]
            m = self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            v = self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if weight_decay:
                update = update + weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


def clip_by_global_norm(grads: dict, max_norm: float | None) -> float:
    """Scale ``grads`` in place; returns the norm before clipping."""
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for n in grads:
            grads[n] = grads[n] * np.asarray(scale, dtype=grads[n].dtype)
    return norm


def check_compatible(model: VisionLanguageModel):
    expected = init_params(model.config, 0)
    for name, t in expected.items():
        if name not in model.params.tensors:
            raise ContractError(f"checkpoint lacks parameter {name}")
        if model.params[name].shape != t.shape:
            raise ContractError(f"{name}: checkpoint shape {model.params[name].shape} "
                                f"!= config shape {t.shape}")
    extra = set(model.params) - set(expected)
    if extra:
        raise ContractError(f"checkpoint has unexpected parameters {sorted(extra)[:3]}")


def objective_for(loss: str):
    return {"lm": O.lm_objective, "mm": O.mm_objective,
            "vm_stage3": O.stage3_objective}[loss]


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)

    def append(self, row: dict):
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ContractError("metrics must be appended in increasing step order")
        self.rows.append(row)

    def write_csv(self, path, append: bool = True):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not (append and path.exists())
        with open(path, "w" if new else "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            if new:
                w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r.get(k) is None else r[k]) for k in METRIC_FIELDS})

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=float)


def load_samples(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return D.read_jsonl(path)


def _cached_stage3(n_samples: int):
    """Stage-III objective that computes each sample's teacher once.

    Everything upstream of the VM head is frozen in this stage, so the teacher
    for a sample is the same in every epoch.
    """
    cache = [None] * n_samples

    def objective(model, batch):
        todo = [k for k, i in enumerate(batch.indices) if cache[i] is None]
        if todo:
            sub = D.Batch(batch.pixels[todo], [batch.instructions[k] for k in todo],
                          [batch.responses[k] for k in todo], batch.indices[todo])
            x, q = O.stage3_teacher(model, sub)
            for j, k in enumerate(todo):
                cache[batch.indices[k]] = (x[j], q[j])
        x = np.stack([cache[i][0] for i in batch.indices])
        q = np.stack([cache[i][1] for i in batch.indices])
        return O.stage3_loss(model, x, q)

    return objective


def run_stage(model: VisionLanguageModel, cfg: StageConfig, samples=None,
              vocab: D.Vocabulary | None = None, max_steps: int | None = None) -> RunMetrics:
    """Train the stage's parameter groups in place and return per-step metrics.

    ``max_steps`` truncates the run without changing the schedule length.
    """
    check_compatible(model)
    if samples is None:
        if cfg.dataset is None:
            raise ContractError(f"stage {cfg.stage}: no dataset given")
        samples = load_samples(cfg.dataset)
    if cfg.stage == 0:
        vocab = vocab or D.Vocabulary.default(model.config.vocab_size)
        transcripts = np.array([D.transcript_ids(s.pixels, vocab) for s in samples])
        objective = lambda m, b: O.pretrain_objective(m, b, transcripts[b.indices])
    elif cfg.loss == "vm_stage3":
        objective = _cached_stage3(len(samples))
    else:
        objective = objective_for(cfg.loss)

    params = model.params
    params.set_trainable(cfg.trainable)
    trainable = {n: params[n] for n in params.in_groups(cfg.trainable)}
    opt = AdamW(trainable)
    per_epoch = D.batches_per_epoch(len(samples), cfg.batch_size)
    if per_epoch == 0:
        raise ContractError(f"stage {cfg.stage}: {len(samples)} samples < batch size {cfg.batch_size}")
    total = per_epoch * cfg.epochs
    metrics = RunMetrics()
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        for batch in D.batch_iterator(samples, cfg.batch_size, cfg.seed, epoch):
            if max_steps is not None and step >= max_steps:
                break
            where = f"stage {STAGE_NAMES[cfg.stage]} step {step}"
            params.zero_grad()
            lr = lr_at(step + 1, total, cfg.lr, cfg.warmup_ratio)
            try:
                terms = objective(model, batch)
                loss = terms.total.item()
                if not math.isfinite(loss):
                    raise NumericError(f"loss is {loss}")
                terms.total.backward()
                grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                         for n, p in trainable.items()}
                norm = clip_by_global_norm(grads, cfg.clip_norm)
                opt.step(grads, lr, cfg.weight_decay)
            except (NumericError, DomainError) as exc:
                raise TrainingError(f"{where}: {exc}") from exc
            step += 1
            row = {"step": step, "lr": lr, **terms.values(),
                   "seconds": round(time.perf_counter() - start, 4), "grad_norm": norm}
            metrics.append(row)
            if step % 100 == 0:
                log.info("stage %s step %d/%d loss %.4f", STAGE_NAMES[cfg.stage], step, total, loss)
    params.set_trainable(())
    return metrics


def stage_meta(cfg: StageConfig, steps: int) -> dict:
    return {"stage": cfg.stage, "step": steps, "rng": {"seed": cfg.seed, "epoch": cfg.epochs},
            "train_config": {k: v for k, v in cfg.to_dict().items() if k != "dataset"}}
