"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import hashlib
import numbers

import numpy as np
from sklearn.utils import check_array


def check_positive_int(value, name, *, allow_zero=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    lower = 0 if allow_zero else 1
    if value < lower:
        raise ValueError(f"{name} must be >= {lower}, got {value}")
    return int(value)


def check_interaction_array(X, *, min_columns=2):
    """Validate an (n, >=2) integer array of user/item[/rating[/timestamp]] rows."""
    X = check_array(X, dtype=np.int64, ensure_2d=True, ensure_min_samples=1)
    if X.shape[1] < min_columns:
        raise ValueError(f"expected at least {min_columns} columns, got {X.shape[1]}")
    return X


def as_dataset(X):
    """Coerce a Dataset or an interaction array into a Dataset."""
    from .corpus import Dataset

    if isinstance(X, Dataset):
        return X
    X = check_interaction_array(X)
    n = X.shape[0]
    ratings = X[:, 2] if X.shape[1] > 2 else np.full(n, 5, dtype=np.int64)
    stamps = X[:, 3] if X.shape[1] > 3 else np.zeros(n, dtype=np.int64)
    return Dataset(X[:, 0], X[:, 1], ratings, stamps)


def sub_seed(root, name):
    """Derive a named child seed so components can be reseeded in isolation."""
    digest = hashlib.sha256(f"{int(root)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def digest_bytes(*chunks):
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()
