"""Rating/metadata loading, category maps and deterministic forget/train/val/test splits."""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._validation import digest_bytes
from .exceptions import EmptyDataset, InvalidRatios, MalformedLine, MissingGenreHeader

logger = logging.getLogger(__name__)

UNKNOWN_CATEGORY = "unknown"

# Column order of the 19 binary genre flags at the end of a MovieLens-100K ``u.item`` line.
MOVIELENS_GENRES = (
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
)

SPLIT_NAMES = ("forget", "train", "val", "test")


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    rating: int
    timestamp: int = 0


class Dataset:
    """Immutable, column-oriented collection of interactions.

    Rows keep their insertion order. Per-user and per-item position indices are
    built lazily on first access and are read-only afterwards, so a Dataset can be
    shared between threads.
    """

    __slots__ = ("users", "items", "ratings", "timestamps", "_user_index", "_item_index", "_pairs")

    def __init__(self, users, items, ratings, timestamps=None):
        self.users = np.ascontiguousarray(users, dtype=np.int64)
        self.items = np.ascontiguousarray(items, dtype=np.int64)
        self.ratings = np.ascontiguousarray(ratings, dtype=np.int64)
        if timestamps is None:
            timestamps = np.zeros(len(self.users), dtype=np.int64)
        self.timestamps = np.ascontiguousarray(timestamps, dtype=np.int64)
        n = len(self.users)
        if not (len(self.items) == len(self.ratings) == len(self.timestamps) == n):
            raise ValueError("interaction columns have different lengths")
        for arr in (self.users, self.items, self.ratings, self.timestamps):
            arr.setflags(write=False)
        self._user_index = None
        self._item_index = None
        self._pairs = None

    @classmethod
    def from_interactions(cls, interactions):
        rows = list(interactions)
        if not rows:
            return cls.empty()
        cols = list(zip(*rows))
        stamps = cols[3] if len(cols) > 3 else None
        return cls(cols[0], cols[1], cols[2], stamps)

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z)

    def __len__(self):
        return len(self.users)

    def __iter__(self):
        for row in zip(self.users.tolist(), self.items.tolist(),
                       self.ratings.tolist(), self.timestamps.tolist()):
            yield Interaction(*row)

    def __getitem__(self, pos):
        return Interaction(int(self.users[pos]), int(self.items[pos]),
                           int(self.ratings[pos]), int(self.timestamps[pos]))

    def __repr__(self):
        return (f"Dataset(n_interactions={len(self)}, n_users={self.n_users}, "
                f"n_items={self.n_items})")

    @property
    def user_ids(self):
        return np.unique(self.users)

    @property
    def item_ids(self):
        return np.unique(self.items)

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    @staticmethod
    def _group(keys):
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        uniq, starts = np.unique(sorted_keys, return_index=True)
        bounds = list(starts[1:]) + [len(keys)]
        return {int(k): order[s:e] for k, s, e in zip(uniq, starts, bounds)}

    @property
    def user_index(self):
        if self._user_index is None:
            self._user_index = self._group(self.users)
        return self._user_index

    @property
    def item_index(self):
        if self._item_index is None:
            self._item_index = self._group(self.items)
        return self._item_index

    def pairs(self):
        """Set of ``(user_id, item_id)`` tuples."""
        if self._pairs is None:
            self._pairs = frozenset(zip(self.users.tolist(), self.items.tolist()))
        return self._pairs

    def items_of(self, user_id):
        pos = self.user_index.get(int(user_id))
        if pos is None:
            return frozenset()
        return frozenset(self.items[pos].tolist())

    def take(self, positions):
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(self.users[positions], self.items[positions],
                       self.ratings[positions], self.timestamps[positions])

    def without_pairs(self, pairs):
        """Rows whose (user, item) pair is not in ``pairs``."""
        if not pairs:
            return self
        keep = [k for k, p in enumerate(zip(self.users.tolist(), self.items.tolist()))
                if p not in pairs]
        return self.take(keep)

    @staticmethod
    def concat(*parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return Dataset.empty()
        return Dataset(np.concatenate([p.users for p in parts]),
                       np.concatenate([p.items for p in parts]),
                       np.concatenate([p.ratings for p in parts]),
                       np.concatenate([p.timestamps for p in parts]))

    def as_array(self):
        return np.column_stack([self.users, self.items, self.ratings, self.timestamps])

    def checksum(self):
        """Order-independent digest of the interaction content."""
        arr = self.as_array()
        if len(arr):
            arr = arr[np.lexsort((arr[:, 1], arr[:, 0]))]
        return digest_bytes(np.ascontiguousarray(arr, dtype="<i8").tobytes())

    def summary(self):
        return {"users": self.n_users, "items": self.n_items, "interactions": len(self)}

    def to_tsv(self, path):
        with open(path, "w", encoding="ascii") as fh:
            for u, i, r, t in zip(self.users.tolist(), self.items.tolist(),
                                  self.ratings.tolist(), self.timestamps.tolist()):
                fh.write(f"{u}\t{i}\t{r}\t{t}\n")


def load_interactions(path, format="tsv", *, allow_empty=False):
    """Read a ratings file of ``user, item, rating[, timestamp]`` records.

    Duplicate (user, item) pairs keep their last occurrence. Blank lines are
    ignored; anything else that does not parse raises :class:`MalformedLine`.
    """
    if format not in ("tsv", "csv"):
        raise ValueError(f"unsupported ratings format {format!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    delim = "\t" if format == "tsv" else ","
    last = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for line_no, fields in enumerate(csv.reader(fh, delimiter=delim), start=1):
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) < 3:
                raise MalformedLine(line_no, f"expected >=3 fields, got {len(fields)}")
            try:
                u, i, r = int(fields[0]), int(fields[1]), int(fields[2])
                t = int(fields[3]) if len(fields) > 3 and fields[3].strip() else 0
            except ValueError:
                raise MalformedLine(line_no, "non-integer field") from None
            if not 1 <= r <= 5:
                raise MalformedLine(line_no, f"rating {r} outside 1..5")
            key = (u, i)
            last.pop(key, None)
            last[key] = (r, t)
    if not last:
        if allow_empty:
            return Dataset.empty()
        raise EmptyDataset(f"no interactions in {path}")
    rows = [(u, i, r, t) for (u, i), (r, t) in last.items()]
    data = Dataset.from_interactions(rows)
    logger.info("loaded %s: %d users, %d items, %d interactions", path.name,
                data.n_users, data.n_items, len(data))
    return data


@dataclass(frozen=True)
class CategoryMap:
    item_to_categories: dict
    all_categories: tuple

    def __post_init__(self):
        referenced = set().union(*self.item_to_categories.values()) if self.item_to_categories else set()
        missing = referenced - set(self.all_categories)
        if missing:
            raise ValueError(f"categories {sorted(missing)} missing from all_categories")

    @classmethod
    def from_mapping(cls, mapping):
        item_map = {int(k): frozenset(v) or frozenset({UNKNOWN_CATEGORY}) for k, v in mapping.items()}
        labels = sorted(set().union(*item_map.values())) if item_map else []
        return cls(item_map, tuple(labels))

    def categories_of(self, item_id):
        return self.item_to_categories.get(int(item_id), frozenset({UNKNOWN_CATEGORY}))

    def __len__(self):
        return len(self.all_categories)


@dataclass(frozen=True)
class ItemMetadata:
    categories: CategoryMap
    titles: dict = field(default_factory=dict)
    years: dict = field(default_factory=dict)


_YEAR_SUFFIX = re.compile(r"\s*\((\d{4})\)\s*$")


def _split_title_year(raw):
    m = _YEAR_SUFFIX.search(raw)
    if m:
        return raw[: m.start()].strip(), int(m.group(1))
    return raw.strip(), None


def _load_movielens_item(path):
    cats, titles, years = {}, {}, {}
    with open(path, encoding="latin-1") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("|")
            if len(fields) < 5 + len(MOVIELENS_GENRES):
                raise MalformedLine(line_no, "too few pipe-delimited fields")
            flags = fields[-len(MOVIELENS_GENRES):]
            try:
                item = int(fields[0])
                bits = [int(f) for f in flags]
            except ValueError:
                raise MalformedLine(line_no, "non-integer id or genre flag") from None
            if any(b not in (0, 1) for b in bits):
                raise MalformedLine(line_no, "genre flags must be 0/1")
            labels = {g for g, b in zip(MOVIELENS_GENRES, bits) if b}
            cats[item] = labels
            title, year = _split_title_year(fields[1])
            if year is None:
                m = re.search(r"(\d{4})\s*$", fields[2])
                year = int(m.group(1)) if m else None
            titles[item] = title
            years[item] = year
    return cats, titles, years


_HEADER_ALIASES = {
    "id": ("item_id", "itemid", "movieid", "movie_id", "item", "id"),
    "title": ("title", "movie_title", "name"),
    "year": ("year", "release_year"),
    "genres": ("genres", "genre", "class", "categories", "category"),
}


def _load_genre_tsv(path):
    cats, titles, years = {}, {}, {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
        # Atomic-file headers carry a ":type" suffix, e.g. "class:token_seq".
        names = [h.split(":", 1)[0].strip().lower() for h in header]
        col = {}
        for key, aliases in _HEADER_ALIASES.items():
            for alias in aliases:
                if alias in names:
                    col[key] = names.index(alias)
                    break
        if "genres" not in col:
            raise MissingGenreHeader(f"{path}: no genre column in header {header}")
        id_col = col.get("id", 0)
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) <= max(col.values()):
                raise MalformedLine(line_no, "missing columns")
            try:
                item = int(fields[id_col])
            except ValueError:
                raise MalformedLine(line_no, "non-integer item id") from None
            raw = fields[col["genres"]].strip()
            sep = "|" if "|" in raw else None
            labels = {g.strip() for g in raw.split(sep) if g.strip()}
            cats[item] = labels
            if "title" in col:
                title, year = _split_title_year(fields[col["title"]])
                titles[item] = title
            else:
                year = None
            if "year" in col and fields[col["year"]].strip().isdigit():
                year = int(fields[col["year"]])
            years[item] = year
    return cats, titles, years


def load_item_metadata(path, format="movielens_item"):
    """Read item metadata into a :class:`CategoryMap` plus titles and release years.

    Items without any genre flag fall into the ``"unknown"`` category.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if format == "movielens_item":
        cats, titles, years = _load_movielens_item(path)
    elif format == "genre_tsv":
        cats, titles, years = _load_genre_tsv(path)
    else:
        raise ValueError(f"unsupported metadata format {format!r}")
    return ItemMetadata(CategoryMap.from_mapping(cats), titles, years)


@dataclass(frozen=True)
class SplitBundle:
    train: Dataset
    val: Dataset
    test: Dataset
    forget: Dataset
    seed: int
    ratios: tuple
    forget_fraction: float
    too_small_users: tuple = ()

    @property
    def remain(self):
        """D_r: everything that was not forgotten."""
        return Dataset.concat(self.train, self.val, self.test)

    @property
    def source(self):
        return Dataset.concat(self.forget, self.train, self.val, self.test)

    def parts(self):
        return {name: getattr(self, name) for name in SPLIT_NAMES}

    def forget_by_user(self):
        """D_f^u for every user that has forgotten interactions."""
        return {u: frozenset(self.forget.items[pos].tolist())
                for u, pos in self.forget.user_index.items()}

    def manifest(self):
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "forget_fraction": self.forget_fraction,
            "counts": {name: len(d) for name, d in self.parts().items()},
            "checksums": {name: d.checksum() for name, d in self.parts().items()},
            "too_small_users": len(self.too_small_users),
        }

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, d in self.parts().items():
            d.to_tsv(directory / f"{name}.tsv")
        manifest = self.manifest()
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest

    @classmethod
    def read(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        parts = {name: load_interactions(directory / f"{name}.tsv", allow_empty=True)
                 for name in SPLIT_NAMES}
        return cls(seed=manifest["seed"], ratios=tuple(manifest["ratios"]),
                   forget_fraction=manifest["forget_fraction"], **parts)


def make_splits(data, ratios=(0.7, 0.1, 0.2), forget_fraction=0.1, seed=0):
    """Carve a forget set out of ``data`` and split the rest per user.

    A seeded permutation of all interactions is drawn; its first
    ``floor(forget_fraction * len(data))`` rows are forgotten. Each user's
    remaining rows (in permuted order) are then split by ``ratios`` with floor
    rounding, the remainder going to train. Users with fewer than three
    remaining rows are kept entirely in train and listed in ``too_small_users``.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatios(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    if not 0.0 <= forget_fraction < 1.0:
        raise InvalidRatios(f"forget_fraction must lie in [0, 1), got {forget_fraction}")
    n = len(data)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_forget = math.floor(forget_fraction * n + 1e-9)
    forget_pos = perm[:n_forget]
    rest = perm[n_forget:]

    by_user = {}
    for pos, u in zip(rest.tolist(), data.users[rest].tolist()):
        by_user.setdefault(u, []).append(pos)

    train_pos, val_pos, test_pos, small = [], [], [], []
    _, r_val, r_test = ratios
    for u in sorted(by_user):
        pos = by_user[u]
        k = len(pos)
        if k < 3:
            small.append(u)
            train_pos.extend(pos)
            continue
        n_val = math.floor(r_val * k + 1e-9)
        n_test = math.floor(r_test * k + 1e-9)
        n_train = k - n_val - n_test
        train_pos.extend(pos[:n_train])
        val_pos.extend(pos[n_train:n_train + n_val])
        test_pos.extend(pos[n_train + n_val:])
    if small:
        logger.warning("%d users have <3 interactions after forget sampling; kept in train", len(small))

    def part(positions):
        return data.take(np.sort(np.asarray(positions, dtype=np.int64)))

    return SplitBundle(
        train=part(train_pos), val=part(val_pos), test=part(test_pos),
        forget=part(forget_pos), seed=int(seed), ratios=ratios,
        forget_fraction=float(forget_fraction), too_small_users=tuple(small),
    )


def user_history(data, user_id):
    """All of a user's interactions ordered by timestamp, then item id."""
    pos = data.user_index.get(int(user_id))
    if pos is None:
        return []
    order = np.lexsort((data.items[pos], data.timestamps[pos]))
    return [data[p] for p in pos[order]]
