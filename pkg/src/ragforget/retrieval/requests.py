"""Forget-request files: ``[{"user": 42, "items": [1, 2]}, {"user": 7, "items": "ALL"}]``."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

ALL = "ALL"


@dataclass(frozen=True)
class ForgetRequest:
    user_id: int
    items: frozenset | None  # None means every interaction of the user

    @property
    def forget_all(self):
        return self.items is None

    def resolve(self, user_items):
        """Concrete (user, item) pairs given the user's known items."""
        items = user_items if self.items is None else self.items
        return {(self.user_id, int(i)) for i in items}

    def to_json(self):
        return {"user": self.user_id, "items": ALL if self.items is None else sorted(self.items)}


def parse_requests(obj):
    if not isinstance(obj, list):
        raise ValueError("forget-request file must hold a JSON array")
    out = []
    for k, entry in enumerate(obj):
        if not isinstance(entry, dict) or "user" not in entry or "items" not in entry:
            raise ValueError(f"request {k}: expected an object with 'user' and 'items'")
        items = entry["items"]
        if items == ALL:
            out.append(ForgetRequest(int(entry["user"]), None))
        elif isinstance(items, list):
            out.append(ForgetRequest(int(entry["user"]), frozenset(int(i) for i in items)))
        else:
            raise ValueError(f"request {k}: 'items' must be a list or \"ALL\"")
    return out


def load_requests(path):
    return parse_requests(json.loads(Path(path).read_text()))


def dump_requests(requests, path):
    Path(path).write_text(json.dumps([r.to_json() for r in requests], indent=1) + "\n")


def resolve_requests(requests, data):
    """Union of (user, item) pairs to forget; ``ALL`` expands against ``data``."""
    pairs = set()
    for req in requests:
        pairs |= req.resolve(data.items_of(req.user_id))
    return frozenset(pairs)
