import numpy as np
import pytest

from gram_mmt import model as M
from gram_mmt import numerics as nx


@pytest.fixture(autouse=True)
def _reset_numerics():
    yield
    nx.set_precision(32)
    nx.set_debug(False)
    nx.clear_tape()


@pytest.fixture
def toy_cfg():
    return M.ModelConfig(d_model=32, vocab_size=40, heads=4, d_ff=64, enc_dim=12, n_latents=4,
                         vt_heads=4, vt_d_ff=64, max_len=20)


def random_inputs(gen, cfg, batch=3, max_images=4):
    srcs = [list(gen.integers(4, cfg.vocab_size, gen.integers(1, 8))) for _ in range(batch)]
    tgts = [list(gen.integers(4, cfg.vocab_size, gen.integers(1, 8))) for _ in range(batch)]
    ims = [gen.normal(size=(int(gen.integers(0, max_images + 1)), cfg.enc_dim)) for _ in range(batch)]
    return srcs, tgts, ims


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, ok, detail):
        results[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 11):
        if number not in results:
            terminalreporter.write_line(f"criterion {number:2d}: NO RESULT  (errored before measuring, or deselected)")
            continue
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
