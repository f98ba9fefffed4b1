"""Cue importance, interaction pruning and attention dumps for trained models."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from ..data import DialogRecord
from ..model import FGAModel, collate
from .training import batches

SELF = "self"


@dataclass
class ImportanceTable:
    """Per target utility: cue -> share of the weighted mean evidence.

    Cues are "prior", "local", "self" and the names of joint partners.
    ``means`` holds the mean raw term of each cue and ``weights`` the scalar
    it is multiplied by.
    """

    scores: dict[str, dict[str, float]]
    means: dict[str, dict[str, float]] = field(default_factory=dict)
    weights: dict[str, dict[str, float]] = field(default_factory=dict)
    absolute: bool = False

    def row_sums(self) -> dict[str, float]:
        return {u: float(sum(row.values())) for u, row in self.scores.items()}

    def to_dict(self) -> dict:
        return {"absolute": self.absolute, "scores": self.scores, "means": self.means,
                "weights": self.weights}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target", "cue", "score", "mean_term", "weight"])
        for u, row in self.scores.items():
            for cue, s in row.items():
                w.writerow([u, cue, repr(s), repr(self.means[u][cue]), repr(self.weights[u][cue])])
        return buf.getvalue()


def _cue_key(target: str, source: str) -> str:
    return SELF if source == target else source


def mean_terms(model: FGAModel, records: list[DialogRecord],
               absolute: bool = False) -> dict[str, dict[str, float]]:
    """Mean raw cue term over all records and entity positions (eval mode)."""
    if not records:
        raise ValueError("importance needs a non-empty validation set")
    records = sorted(records, key=lambda r: r.record_id)
    totals: dict[str, dict[str, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    for chunk in batches(records, model.cfg.batch_size):
        out = model.forward(collate(chunk, model.cfg), train=False, keep_terms=True)
        for u, terms in out.attention.terms.items():
            for src, t in terms.items():
                key = "prior" if src == "prior" else "local" if src == "local" else _cue_key(u, src)
                t = np.abs(t) if absolute else t
                totals.setdefault(u, {}).setdefault(key, 0.0)
                counts.setdefault(u, {}).setdefault(key, 0)
                totals[u][key] += float(np.sum(t, dtype=np.float64))
                counts[u][key] += t.size
    return {u: {k: totals[u][k] / counts[u][k] for k in totals[u]} for u in totals}


def importance_scores(model: FGAModel, records: list[DialogRecord],
                      absolute: bool | None = None) -> ImportanceTable:
    """S(g) = |m_g * g| / sum_d |m_d * d| for every cue of every utility.

    A pruned cue contributes nothing and scores 0; a row whose weighted
    evidence is all zero scores 0 everywhere.
    """
    if absolute is None:
        absolute = model.cfg.importance_absolute
    means = mean_terms(model, records, absolute)
    params = model.fga
    scores, mrow, wrow = {}, {}, {}
    for u in params.graph.names:
        cues = params.cues(u)
        m = {_cue_key(u, c): means[u].get(_cue_key(u, c), 0.0) for c in cues}
        w = {_cue_key(u, c): float(params.weight(u, c).data) for c in cues}
        for c in cues:
            if c not in ("prior", "local", u) and (u, c) in params.pruned:
                m[c] = 0.0
        mass = {k: abs(m[k] * w[k]) for k in m}
        total = sum(mass.values())
        scores[u] = {k: (v / total if total > 0 else 0.0) for k, v in mass.items()}
        mrow[u], wrow[u] = m, w
    return ImportanceTable(scores, mrow, wrow, absolute)


def prune_interactions(model: FGAModel, table: ImportanceTable, threshold: float) -> FGAModel:
    """Copy of ``model`` with every joint direction j -> i whose S(w_ij) is below
    ``threshold`` disabled."""
    out = model.copy()
    for u, row in table.scores.items():
        for cue, s in row.items():
            if cue in ("prior", "local", SELF):
                continue
            if s < threshold:
                out.fga.prune(u, cue)
    return out


def local_prior_only(model: FGAModel, freeze: bool = True) -> FGAModel:
    """Copy with every interaction cue weight (joint and self) set to 0, so
    beliefs depend on the prior and local terms alone."""
    out = model.copy()
    for p in out.registry:
        if ".w_from." in p.name:
            p.data[...] = 0
            if freeze:
                p.trainable = False
    return out


def attention_map(model: FGAModel, record: DialogRecord) -> dict[str, list[float]]:
    """Eval-mode belief vector of every utility for one record."""
    out = model.forward(collate([record], model.cfg), train=False)
    return {u: [float(x) for x in b.data[0]] for u, b in out.attention.beliefs.items()}
