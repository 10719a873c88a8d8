import numpy as np
import pytest

from xlcontrast.corpus import gen_synthetic_languages
from xlcontrast.encoder import EncoderConfig, EncoderParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    return gen_synthetic_languages(60, 2, 200, (3, 6), seed=5, num_heldout=40)


@pytest.fixture
def tiny_params():
    cfg = EncoderConfig(num_layers=2, hidden_size=16, ffn_size=32, num_heads=2, vocab_size=32,
                        max_positions=16, projection_dim=8)
    return EncoderParams.init(cfg, np.random.default_rng(0), init_range=0.3)


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; it is echoed in the terminal summary."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(criterion: int, ok: bool, detail: str) -> bool:
        store[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, {})
    if store:
        terminalreporter.section("acceptance")
        for k in sorted(store):
            terminalreporter.write_line(store[k])
