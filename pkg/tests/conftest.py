import numpy as np
import pytest

from msimil.dataset import InMemorySource
from msimil.slideio import MSI_H, MSS, SlideRecord

PROCS = ("CORE_NEEDLE_BIOPSY", "RESECTION")


def make_feature_cohort(n=40, n_pos=12, k=12, d=6, shift=3.0, seed=0, prefix="F"):
    """Bags of ``k`` Gaussian feature rows; positives carry one row shifted
    by ``shift`` along the first axis."""
    rng = np.random.default_rng(seed)
    records, bags = [], {}
    pos = set(rng.choice(n, n_pos, replace=False).tolist())
    for i in range(n):
        sid = f"{prefix}{i:03d}"
        label = MSI_H if i in pos else MSS
        bag = rng.normal(size=(k, d))
        if label == MSI_H:
            bag[rng.integers(k), 0] += shift
        bags[sid] = bag
        records.append(SlideRecord(sid, f"{sid}.milf", label, gleason_total=int(rng.integers(7, 11)),
                                   procedure=PROCS[i % 2], tumor_purity=float(rng.random())))
    return records, InMemorySource(bags)


@pytest.fixture
def feature_cohort():
    return make_feature_cohort


@pytest.fixture
def criterion(request):
    """Record one acceptance line; ``check(ok, detail)`` asserts after recording."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def check(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title}" + (f" [{detail}]" if detail else "")
        lines.append((number, line))
        print(line)
        assert ok, line

    return check


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
