import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tcseizure.synth import SynthConfig, generate

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Three patients, six minutes each: enough for every split and calibration."""
    out = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(n_patients=3, minutes=6, seed=3)
    anns = generate(cfg, out)
    return out, anns, cfg


@pytest.fixture(scope="session")
def small_prepared(small_corpus, tmp_path_factory):
    from tcseizure.pipeline import PreparedCorpus, preprocess_corpus

    root, _, _ = small_corpus
    out = tmp_path_factory.mktemp("prepared")
    preprocess_corpus(root, root / "annotations.csv", out)
    return PreparedCorpus.open(out)


_ACCEPTANCE: list[str] = []


class _Criterion:
    def __init__(self, number, title, limit_s=None):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.detail = ""

    def __enter__(self):
        import time

        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time

        elapsed = time.perf_counter() - self._t0
        ok = exc_type is None
        if ok and self.limit_s is not None and elapsed > self.limit_s:
            ok = False
            self.detail += f" (over the {self.limit_s:g} s budget)"
        status = "PASS" if ok else ("SKIP" if exc_type is pytest.skip.Exception else "FAIL")
        if exc_type is not None and not self.detail and status == "FAIL":
            self.detail = str(exc).splitlines()[0] if str(exc) else exc_type.__name__
        _ACCEPTANCE.append(f"criterion {self.number:>2} {status}: {self.title} [{elapsed:.2f} s] {self.detail}".rstrip())
        if exc_type is None and not ok:
            raise AssertionError(f"criterion {self.number} exceeded its {self.limit_s} s budget")
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
