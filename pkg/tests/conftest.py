import numpy as np
import pytest

from mixedimpute import DesignSpec, PanelDataset, build_design


def make_panel(n_subjects=3, n_days=2, n_beeps=3, seed=0, missing_frac=0.0, extra=None):
    """Small balanced panel with columns ``x`` and ``y`` (plus ``extra``)."""
    rng = np.random.default_rng(seed)
    subject, day, beep = [], [], []
    for i in range(n_subjects):
        for d in range(1, n_days + 1):
            for b in range(1, n_beeps + 1):
                subject.append(f"s{i + 1:02d}")
                day.append(d)
                beep.append(b)
    n = len(subject)
    cols = {"x": rng.normal(size=n), "y": rng.normal(2.0, 1.0, size=n)}
    for name in extra or ():
        cols[name] = rng.normal(size=n)
    if missing_frac:
        cols["y"][rng.random(n) < missing_frac] = np.nan
    return PanelDataset(subject, day, beep, cols)


def random_design(rng, max_subjects=5, max_occ=6, p=2, pv=1, q=2, missing_frac=0.3):
    """Random ragged design with ``n <= 5`` subjects and ``n_i <= 6`` occasions."""
    n = int(rng.integers(2, max_subjects + 1))
    subject, day, beep = [], [], []
    for i in range(n):
        ni = int(rng.integers(1, max_occ + 1))
        for j in range(ni):
            subject.append(f"s{i}")
            day.append(1 + j // 3)
            beep.append(1 + j % 3)
    rows = len(subject)
    cols = {f"c{k}": rng.normal(size=rows) for k in range(max(p, pv))}
    y = rng.normal(size=rows)
    y[rng.random(rows) < missing_frac] = np.nan
    cols["y"] = y
    ds = PanelDataset(subject, day, beep, cols)
    spec = DesignSpec(
        [f"c{k}" for k in range(p)],
        [f"c{k}" for k in range(pv)],
        ["cont(day)", "cont(beep)"][:q],
    )
    return build_design(ds, spec, "y")


@pytest.fixture
def panel():
    return make_panel()


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.details = number, title, []

    def note(self, text):
        self.details.append(text)

    def check(self, ok, text):
        self.details.append(f"{text} [{'ok' if ok else 'FAILED'}]")
        return ok

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        passed = exc_type is None
        if exc_type is not None and exc_type is not AssertionError:
            self.details.append(f"{exc_type.__name__}: {exc}")
        ACCEPTANCE[self.number] = (passed, self.title, "; ".join(self.details))
        line = f"criterion {self.number} {'PASS' if passed else 'FAIL'}: {self.title} ({ACCEPTANCE[self.number][2]})"
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[k]
        terminalreporter.line(f"criterion {k} {'PASS' if passed else 'FAIL'}: {title} ({detail})")


