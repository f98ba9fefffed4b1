"""Retrieval metrics: rank of the ground truth, MRR, recall@k, mean rank, NDCG."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class EvalReport:
    mrr: float
    r1: float  # recall@k in percent
    r5: float
    r10: float
    mean_rank: float
    ndcg: float | None = None
    ranks: list[int] = field(default_factory=list)

    def to_dict(self, with_ranks: bool = False) -> dict:
        d = asdict(self)
        d["r@1"], d["r@5"], d["r@10"] = d.pop("r1"), d.pop("r5"), d.pop("r10")
        if not with_ranks:
            d.pop("ranks")
        if d["ndcg"] is None:
            d.pop("ndcg")
        return d

    def to_json(self, with_ranks: bool = False) -> str:
        return json.dumps(self.to_dict(with_ranks), sort_keys=True)

    def to_csv(self) -> str:
        d = self.to_dict()
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(list(d))
        w.writerow([d[k] for k in d])
        return buf.getvalue()


def gt_rank(probs: np.ndarray, gt: int) -> int:
    """1-based rank of ``gt`` under descending probability; ties go to the lower index."""
    probs = np.asarray(probs)
    p = probs[gt]
    return int(1 + np.sum(probs > p) + np.sum(probs[:gt] == p))


def ranks_from_probs(probs: np.ndarray, gt) -> list[int]:
    probs = np.atleast_2d(probs)
    return [gt_rank(row, int(g)) for row, g in zip(probs, np.atleast_1d(gt))]


def metrics(ranks, ks=(1, 5, 10)) -> EvalReport:
    r = np.asarray(list(ranks), dtype=np.float64)
    if r.size == 0:
        raise ValueError("metrics: no ranks given")
    if np.any(r < 1):
        raise ValueError("metrics: ranks are 1-based")
    rec = {k: float(100.0 * np.mean(r <= k)) for k in ks}
    return EvalReport(
        mrr=float(np.mean(1.0 / r)),
        r1=rec.get(1, float(100.0 * np.mean(r <= 1))),
        r5=rec.get(5, float(100.0 * np.mean(r <= 5))),
        r10=rec.get(10, float(100.0 * np.mean(r <= 10))),
        mean_rank=float(np.mean(r)),
        ranks=[int(x) for x in r],
    )


def ranking(probs: np.ndarray) -> np.ndarray:
    """Candidate indices by descending probability, ties by index."""
    probs = np.asarray(probs)
    return np.lexsort((np.arange(probs.size), -probs))


def ndcg(probs, relevance) -> float:
    """DCG of the model's ordering over ideal DCG, gains = relevance,
    discount 1/log2(position + 1).  All-zero relevance gives 0."""
    rel = np.asarray(relevance, dtype=np.float64)
    if rel.shape != np.shape(probs):
        raise ValueError("ndcg: relevance and probs differ in length")
    disc = 1.0 / np.log2(np.arange(2, rel.size + 2))
    ideal = float(np.sum(np.sort(rel)[::-1] * disc))
    if ideal == 0.0:
        return 0.0
    return float(np.sum(rel[ranking(probs)] * disc)) / ideal
