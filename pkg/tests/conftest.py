import numpy as np
import pytest
from hypothesis import settings

from vtoken import data as D
from vtoken import tensor as T
from vtoken.model import ModelConfig, VisionLanguageModel

settings.register_profile("repo", derandomize=True, deadline=None)
settings.load_profile("repo")


@pytest.fixture
def f64():
    with T.float_width(64):
        yield


@pytest.fixture(scope="session")
def vocab():
    return D.Vocabulary.default()


@pytest.fixture
def config():
    return ModelConfig()


@pytest.fixture
def model(config):
    return VisionLanguageModel(config, seed=0)


@pytest.fixture(scope="session")
def samples(vocab):
    return D.generate_samples(7, 16, "instruct", vocab)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6, five_point: bool = False) -> np.ndarray:
    """Central differences of scalar ``f`` over every entry of ``x`` (modified in place).

    ``five_point`` switches to the O(eps^4) stencil, which tolerates a larger step."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)

    def at(i, old, d):
        flat[i] = old + d
        v = f()
        flat[i] = old
        return v
    for i in range(flat.size):
        old = flat[i]
        d1 = at(i, old, eps) - at(i, old, -eps)
        if five_point:
            d2 = at(i, old, 2 * eps) - at(i, old, -2 * eps)
            gflat[i] = (8 * d1 - d2) / (12 * eps)
        else:
            gflat[i] = d1 / (2 * eps)
    return g


# ---------------------------------------------------------------- acceptance report

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture(scope="session")
def criterion(request):
    """Record a named check under an acceptance criterion; a criterion passes only
    if every check recorded for it passed."""
    table = request.config.stash[_CRITERIA]

    def record(number: int, ok: bool, detail: str):
        table.setdefault(number, []).append((bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_CRITERIA, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        checks = table[n]
        verdict = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        detail = "; ".join(f"{d} [{'ok' if ok else 'FAIL'}]" for ok, d in checks)
        terminalreporter.write_line(f"criterion {n}: {verdict}  {detail}")
