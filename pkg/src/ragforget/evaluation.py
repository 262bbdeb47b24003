"""Top-K ranking metrics and forget/remain reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

from ._validation import check_positive_int
from .exceptions import EmptyTargets, KGridMismatch, NoEvaluableUsers

DEFAULT_KS = (5, 10, 20)


def hit_ratio_at_k(ranked, targets, k):
    """1.0 if any target is among the first ``k`` items, else 0.0."""
    k = check_positive_int(k, "k")
    if not targets:
        raise EmptyTargets("hit ratio needs at least one target")
    return 1.0 if any(i in targets for i in ranked[:k]) else 0.0


def ndcg_at_k(ranked, targets, k):
    """Binary-relevance NDCG with ideal DCG over ``min(k, |targets|)`` hits."""
    k = check_positive_int(k, "k")
    if not targets:
        raise EmptyTargets("NDCG needs at least one target")
    dcg = sum(1.0 / math.log2(r + 1) for r, i in enumerate(ranked[:k], start=1) if i in targets)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(targets)) + 1))
    return dcg / idcg


@dataclass(frozen=True)
class MetricsReport:
    per_k: dict
    users_evaluated: int
    target_set: str = "remain_test"
    config_digest: str = ""
    users_skipped: int = 0

    def hr(self, k):
        return self.per_k[k][0]

    def ndcg(self, k):
        return self.per_k[k][1]

    def to_json(self):
        return {
            "target_set": self.target_set,
            "users_evaluated": self.users_evaluated,
            "users_skipped": self.users_skipped,
            "config_digest": self.config_digest,
            "metrics": {str(k): {"hr": hr, "ndcg": nd} for k, (hr, nd) in sorted(self.per_k.items())},
        }

    def table(self):
        lines = [f"{self.target_set}  users={self.users_evaluated}",
                 f"{'K':>4}  {'HR@K':>8}  {'NDCG@K':>8}"]
        for k, (hr, nd) in sorted(self.per_k.items()):
            lines.append(f"{k:>4}  {hr:>8.4f}  {nd:>8.4f}")
        return "\n".join(lines)


def evaluate_users(rankings, holdout, ks=DEFAULT_KS, target_set="remain_test", config_digest=""):
    """Average HR@K and NDCG@K uniformly over users with at least one target.

    Users are reduced in ascending id order so the floating-point sums are
    reproducible regardless of how ``rankings`` was produced.
    """
    ks = tuple(check_positive_int(k, "k") for k in ks)
    sums = {k: [0.0, 0.0] for k in ks}
    evaluated = skipped = 0
    for user in sorted(rankings):
        targets = holdout.get(user)
        if not targets:
            skipped += 1
            continue
        ranked = list(rankings[user])
        targets = set(targets)
        for k in ks:
            sums[k][0] += hit_ratio_at_k(ranked, targets, k)
            sums[k][1] += ndcg_at_k(ranked, targets, k)
        evaluated += 1
    if evaluated == 0:
        raise NoEvaluableUsers("no ranked user has a held-out target")
    per_k = {k: (s[0] / evaluated, s[1] / evaluated) for k, s in sums.items()}
    return MetricsReport(per_k, evaluated, target_set, config_digest, skipped)


@dataclass(frozen=True)
class ForgetRemainComparison:
    rows: list = field(default_factory=list)

    def ratio(self, metric, k):
        for row in self.rows:
            if row["metric"] == metric and row["k"] == k:
                return row["ratio"]
        raise KeyError((metric, k))

    def table(self):
        out = [f"{'metric':>8} {'K':>3} {'forget':>8} {'remain':>8} {'ratio':>8}"]
        for r in self.rows:
            ratio = "n/a" if r["ratio"] is None else f"{r['ratio']:.4f}"
            out.append(f"{r['metric']:>8} {r['k']:>3} {r['forget']:>8.4f} {r['remain']:>8.4f} {ratio:>8}")
        return "\n".join(out)


def compare_forget_remain(forget_report, remain_report):
    """Forget/remain ratio of every metric at every K (lower means more forgotten)."""
    if set(forget_report.per_k) != set(remain_report.per_k):
        raise KGridMismatch(f"K grids differ: {sorted(forget_report.per_k)} vs {sorted(remain_report.per_k)}")
    rows = []
    for k in sorted(forget_report.per_k):
        for idx, metric in enumerate(("hr", "ndcg")):
            f = forget_report.per_k[k][idx]
            r = remain_report.per_k[k][idx]
            rows.append({"metric": metric, "k": k, "forget": f, "remain": r,
                         "ratio": f / r if r else None})
    return ForgetRemainComparison(rows)


def reports_to_csv(entries):
    """One row per (method, dataset, backbone, metric, k).

    ``entries`` is an iterable of ``(method, dataset, backbone, MetricsReport)``.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "dataset", "backbone", "target_set", "metric", "k", "value"])
    for method, dataset, backbone, report in entries:
        for k, (hr, nd) in sorted(report.per_k.items()):
            writer.writerow([method, dataset, backbone, report.target_set, "hr", k, f"{hr:.6f}"])
            writer.writerow([method, dataset, backbone, report.target_set, "ndcg", k, f"{nd:.6f}"])
    return buf.getvalue()


def dumps_report(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
