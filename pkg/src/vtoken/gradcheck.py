"""Central finite-difference checks for every op and for the full multi-modal loss."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import objectives as O
from . import tensor as T
from .model import ModelConfig, VisionLanguageModel
from .tensor import Tensor

TOL = {64: 1e-5, 32: 1e-3}
FD_STEP = 1e-3
# Gradient magnitudes below the floor are indistinguishable from zero at that width;
# relative error uses the floor as its smallest denominator.
ABS_FLOOR = {64: 1e-7, 32: 1e-4}


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} max_rel_err={self.max_rel_err:.2e} "
                f"tol={self.tolerance:.0e} n={self.n_checked}")


def rel_err(analytic, numeric, floor: float = ABS_FLOOR[64]) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(f, arrays, k: int, flat_idx, h: float = FD_STEP) -> np.ndarray:
    """d f / d arrays[k].flat[i] for each i in ``flat_idx``; ``f`` maps arrays to a float.

    Five-point central stencil, truncation error O(h^4).
    """
    x = arrays[k].reshape(-1)
    out = np.empty(len(flat_idx))
    for j, i in enumerate(flat_idx):
        old = x[i]
        vals = []
        for step in (-2, -1, 1, 2):
            x[i] = old + step * h
            vals.append(f(arrays))
        x[i] = old
        out[j] = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
    return out



def _op_cases(rng):
    """name -> (fn(*tensors) -> Tensor, input arrays)."""
    r = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    idx = (np.array([0, 2, 2, 1]), np.array([1, 0, 0, 3]))
    mask = rng.random((3, 4)) < 0.3
    return {
        "add": (lambda a, b: a + b, [r(3, 4), r(3, 4)]),
        "add_bias": (lambda a, b: a + b, [r(2, 3, 4), r(4)]),
        "sub": (lambda a, b: a - b, [r(3, 4), r(4)]),
        "mul": (lambda a, b: a * b, [r(3, 4), r(3, 4)]),
        "mul_bias": (lambda a, b: a * b, [r(2, 3, 4), r(4)]),
        "matmul": (T.matmul, [r(3, 4), r(4, 2)]),
        "matmul_weight": (T.matmul, [r(2, 3, 4), r(4, 5)]),
        "matmul_batched": (T.matmul, [r(2, 3, 3, 4), r(2, 3, 4, 2)]),
        "exp": (T.exp, [r(3, 4)]),
        "log": (T.log, [pos(3, 4)]),
        "gelu": (T.gelu, [r(3, 4) * 2]),
        "layer_norm": (T.layer_norm, [r(2, 3, 6), r(6), r(6)]),
        "softmax": (T.softmax, [r(2, 5)]),
        "log_softmax": (T.log_softmax, [r(2, 5)]),
        "masked_fill": (lambda a: T.masked_fill(a, mask, -3.0), [r(3, 4)]),
        "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [r(2, 3, 4)]),
        "reshape": (lambda a: T.reshape(a, (4, 6)), [r(2, 3, 4)]),
        "sum_axis": (lambda a: T.tsum(a, 1), [r(2, 3, 4)]),
        "mean": (lambda a: T.mean(a, -1), [r(2, 3, 4)]),
        "index": (lambda a: T.index(a, idx), [r(3, 4)]),
        "embedding": (lambda a: T.embedding(a, np.array([[0, 3], [3, 1]])), [r(5, 4)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [r(2, 3, 4), r(2, 2, 4)]),
    }


def check_ops(seed: int = 0, tol: float = TOL[64]) -> list:
    rng = np.random.default_rng(seed)
    results = []
    with T.float_width(64):
        for name, (fn, arrays) in _op_cases(rng).items():
            wrng = np.random.default_rng([seed, len(results)])
            weights = None

            def f(arrs):
                nonlocal weights
                out = fn(*[Tensor(a) for a in arrs])
                if weights is None:
                    weights = wrng.standard_normal(out.shape)
                return float((out.data * weights).sum())

            f(arrays)
            ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
            out = fn(*ts)
            T.tsum(T.mul(out, Tensor(weights))).backward()
            worst, count = 0.0, 0
            for k, t in enumerate(ts):
                flat = np.arange(arrays[k].size)
                num = central_difference(f, arrays, k, flat)
                worst = max(worst, float(rel_err(t.grad.reshape(-1), num).max()))
                count += len(flat)
            results.append(CheckResult(f"op:{name}", worst, tol, count))
    return results


def _fixture(config: ModelConfig, seed: int, batch_size: int = 2):
    vocab = D.Vocabulary.default(config.vocab_size)
    samples = D.generate_samples(seed, batch_size, "instruct", vocab)
    return D.collate(samples)


def check_model(n_params: int = 1000, seed: int = 0, config: ModelConfig | None = None,
                widths=(64, 32)) -> list:
    """Full multi-modal loss vs finite differences on ``n_params`` sampled coordinates.

    The visual-token labels are computed once and held fixed, so the loss is
    a plain function of the parameters that receive gradient. Finite
    differences always run in 64-bit; the analytic gradient is taken at each
    requested width.
    """
    config = config or ModelConfig()
    batch = _fixture(config, seed)
    groups = ("visual_encoder", "adapter", "decoder", "mm_head")
    with T.float_width(64):
        model = VisionLanguageModel(config, seed=seed)
        # perturb zero-initialised tensors so every path carries signal
        prng = np.random.default_rng(seed + 1)
        for t in model.params.tensors.values():
            t.data = t.data + 0.02 * prng.standard_normal(t.shape)
        with T.no_grad():
            label = O.visual_tokens(model, O.assemble_batch(model, batch)).detach()
    names = model.params.in_groups(groups)

    analytic = {}
    for width in widths:
        with T.float_width(width):
            m = VisionLanguageModel(config, model.params.astype(T.default_dtype()))
            m.params.set_trainable(groups)
            lab = O.VocabDistribution(Tensor(label.logp.data.astype(T.default_dtype())))
            O.loss_mm(m, O.assemble_batch(m, batch), lab).total.backward()
            analytic[width] = [m.params[n].grad.astype(np.float64) for n in names]

    def f(_arrays):
        with T.float_width(64):
            return O.loss_mm(model, O.assemble_batch(model, batch), label).total.item()

    # sample coordinates proportional to tensor size, at least one per tensor
    rng = np.random.default_rng(seed + 2)
    arrays = [model.params[n].data for n in names]
    sizes = np.array([a.size for a in arrays])
    picks = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = dict.fromkeys(widths, 0.0)
    count = 0
    for k in range(len(names)):
        local = picks[(picks >= offsets[k]) & (picks < offsets[k + 1])] - offsets[k]
        if len(local) == 0:
            local = np.array([rng.integers(sizes[k])])
        num = central_difference(f, arrays, k, local)
        for width in widths:
            err = rel_err(analytic[width][k].reshape(-1)[local], num, ABS_FLOOR[width])
            worst[width] = max(worst[width], float(err.max()))
        count += len(local)
    return [CheckResult(f"loss_mm[{w}-bit]", worst[w], TOL[w], count) for w in widths]


def run_all(n_params: int = 1000, seed: int = 0, verbose=print) -> bool:
    start = time.perf_counter()
    results = check_ops(seed)
    results += check_model(n_params, seed)
    for r in results:
        verbose(r.line())
    verbose(f"gradcheck finished in {time.perf_counter() - start:.1f}s")
    return all(r.passed for r in results)
