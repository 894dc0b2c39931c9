import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from speechqformer.data import CorpusSpec, gen_corpus
from speechqformer.frontend import SynthEncoderSpec

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = CorpusSpec(n_train=40, n_dev=8, n_test=8, n_lm_train=200, n_lm_dev=24)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    enc = SynthEncoderSpec(vocab_size=TINY.vocab_size)
    return gen_corpus(TINY, enc, root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting: one line per criterion in the terminal summary ----------

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if not rep.passed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:200] if rep.longrepr else "error"
    _CRITERIA[n] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
