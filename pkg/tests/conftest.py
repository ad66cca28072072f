import numpy as np
import pytest

from msatl.data import TARGET, DomainDataset, DomainSample, PartAnnotation, generate_toy_corpus


def make_sample(k, size=8, domain_id=TARGET, rng=None, with_parts=False):
    """Random image with a rectangular object split into left/right parts."""
    rng = rng or np.random.default_rng(k)
    image = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[2:6, 1:7] = 1
    parts = None
    if with_parts:
        left = np.zeros((size, size), dtype=bool)
        left[2:6, 1:4] = True
        right = mask.astype(bool) & ~left
        parts = PartAnnotation({"left": left, "right": right})
    return DomainSample(image, mask, domain_id, f"x{k:03d}", parts)


def make_dataset(n, domain_id=TARGET, size=8, prefix="x"):
    samples = []
    for k in range(n):
        s = make_sample(k, size, domain_id)
        s.sample_id = f"{prefix}{k:03d}"
        samples.append(s)
    return DomainDataset(samples, domain_id)


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_toy_corpus(seed=0)


# -- acceptance reporting -------------------------------------------------------

ACCEPTANCE_RESULTS = {}


class criterion:
    """Record one acceptance criterion as PASS/FAIL, optionally under a time budget."""

    def __init__(self, number, title, budget=None):
        self.key, self.title, self.budget = number, title, budget

    def __enter__(self):
        import time
        self._start = time.perf_counter()
        self.detail = ""
        return self

    def __exit__(self, exc_type, exc, tb):
        import time
        elapsed = time.perf_counter() - self._start
        ok = exc_type is None and (self.budget is None or elapsed < self.budget)
        note = f"{elapsed:.1f}s" + (f" (budget {self.budget}s)" if self.budget else "")
        if self.detail:
            note += f"; {self.detail}"
        if exc_type is not None:
            msg = str(exc).splitlines()[0] if str(exc) else ""
            note += f"; {exc_type.__name__}" + (f": {msg}" if msg and msg != self.detail else "")
        ACCEPTANCE_RESULTS[self.key] = (ok, self.title, note)
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {self.key}: {self.title} ({note})"
        print(line)
        if exc_type is None and not ok:
            raise AssertionError(f"criterion {self.key} exceeded its time budget: {note}")
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, title, note = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}. {title} ({note})")
