import os
from pathlib import Path

import numpy as np
import pytest

from ragforget.backbone import BackboneModel
from ragforget.corpus import CategoryMap, Dataset, Interaction

ML100K_DIR = Path(os.environ.get("RAGFORGET_ML100K_DIR", "/root/data/ml-100k"))


def make_model(user_vecs, item_vecs, kind="bpr"):
    """Hand-built frozen model from ``{id: vector}`` dicts."""
    uids = sorted(user_vecs)
    iids = sorted(item_vecs)
    return BackboneModel(np.array([user_vecs[u] for u in uids], dtype=np.float32),
                         np.array([item_vecs[i] for i in iids], dtype=np.float32),
                         np.array(uids), np.array(iids), kind=kind)


def history(user, items, rating=4):
    return [Interaction(user, i, rating, t) for t, i in enumerate(items)]


def labelled(groups):
    """CategoryMap from ``{"A": [items], ...}``; items may appear in several groups."""
    mapping = {}
    for cat, items in groups.items():
        for i in items:
            mapping.setdefault(i, set()).add(cat)
    return CategoryMap.from_mapping(mapping)


@pytest.fixture
def toy_data():
    rng = np.random.default_rng(3)
    users = np.repeat(np.arange(1, 21), 5)
    items = np.concatenate([rng.choice(np.arange(1, 31), 5, replace=False) for _ in range(20)])
    return Dataset(users, items, rng.integers(1, 6, len(users)), np.arange(len(users)))


@pytest.fixture(scope="session")
def ml100k_dir():
    if not (ML100K_DIR / "u.data").exists():
        pytest.skip(f"ML-100K not found in {ML100K_DIR} (set RAGFORGET_ML100K_DIR)")
    return ML100K_DIR


ACCEPTANCE_RESULTS = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_RESULTS[number] = (passed, detail)
    print(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
