import numpy as np
import pytest

from ioucal.data import Box, Category, Dataset, DetectionSet, GroundTruthObject, ImageInfo


def make_dets(rows, image=1):
    """DetectionSet from ``(x1, y1, x2, y2, score, category[, id])`` tuples of one image."""
    rows = [tuple(r) for r in rows]
    ids = [r[6] if len(r) > 6 else k for k, r in enumerate(rows)]
    return DetectionSet([r[:4] for r in rows], [r[4] for r in rows], [r[5] for r in rows],
                        [image] * len(rows), ids)


def make_gt(boxes, categories=None, image=1, size=(100.0, 100.0), crowd=None, n_categories=None):
    """Single-image Dataset; ``boxes`` are corner-form tuples."""
    categories = categories or [1] * len(boxes)
    crowd = crowd or [False] * len(boxes)
    gts = tuple(GroundTruthObject(Box(*b), c, image, cr, k + 1)
                for k, (b, c, cr) in enumerate(zip(boxes, categories, crowd)))
    n_cat = n_categories or max(categories, default=1)
    return Dataset((ImageInfo(image, *size),), gts, tuple(Category(c, f"c{c}") for c in range(1, n_cat + 1)))


def random_boxes(rng, n, size=100.0, min_wh=1.0, max_wh=40.0):
    wh = rng.uniform(min_wh, max_wh, size=(n, 2))
    xy = rng.uniform(0, size, size=(n, 2))
    return np.hstack([xy, xy + wh])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


#: One line per acceptance criterion, filled by tests/test_acceptance.py.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
