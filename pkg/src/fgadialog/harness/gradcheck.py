"""End-to-end finite-difference check of the full model at toy sizes."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import core
from ..config import RunConfig
from ..data import DialogRecord
from ..encoders import TokenSequence
from ..model import FGAModel, collate

TOY_DIMS = {
    "tiny": dict(
        vocab_size=12, n_question=5, n_caption=4, n_history=3, n_answer_tokens=3,
        history_rounds=1, n_answers=6, n_regions=6, d_embed=4, d_question=6, d_caption=5,
        d_history=4, d_answer=6, d_image=8, d_round=3,
    ),
}


@dataclass
class ModelGradCheck:
    max_rel_error: float
    worst: tuple | None
    coordinates: int
    seconds: float
    utilities: list[str]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4

    def to_dict(self) -> dict:
        worst = None if self.worst is None else [self.worst[0], [int(i) for i in self.worst[1]]]
        return {"max_rel_error": self.max_rel_error, "worst": worst, "passed": self.passed,
                "coordinates": self.coordinates, "seconds": self.seconds,
                "utilities": self.utilities}


def toy_config(dims: str = "tiny", seed: int = 0) -> RunConfig:
    if dims not in TOY_DIMS:
        raise ValueError(f"unknown toy dims {dims!r}; choose from {sorted(TOY_DIMS)}")
    return RunConfig(**TOY_DIMS[dims], dropout_image=0.0, dropout_local=0.0,
                     dropout_fusion=0.0, batch_size=3, dtype="float64", seed=seed)


def toy_records(cfg: RunConfig, rng: np.random.Generator, count: int = 3) -> list[DialogRecord]:
    def seq(n):
        length = int(rng.integers(1, n + 1))
        ids = list(rng.integers(1, cfg.vocab_size, size=length)) + [0] * (n - length)
        return TokenSequence([int(i) for i in ids], length)

    out = []
    for k in range(count):
        out.append(DialogRecord(
            record_id=f"toy-{k}",
            image=rng.standard_normal((cfg.n_regions, cfg.d_image)),
            caption=seq(cfg.n_caption),
            history=[(seq(cfg.n_history), seq(cfg.n_history)) for _ in range(cfg.history_rounds)],
            question=seq(cfg.n_question),
            candidates=[seq(cfg.n_answer_tokens) for _ in range(cfg.n_answers)],
            gt_index=int(rng.integers(cfg.n_answers)),
        ))
    return out


def model_grad_check(dims: str = "tiny", seed: int = 0, h: float = 1e-5, corrupt=None,
                     max_per_param: int | None = 8, records: int = 6) -> ModelGradCheck:
    """Compare every parameter gradient of the training loss with central
    differences (``max_per_param`` random coordinates per tensor, every
    coordinate when None).

    Parameters are jittered away from their symmetric initialization so that
    no gradient is zero only by symmetry.  Batch norms run in eval mode with
    random running statistics: in train mode a bias feeding a batch norm has
    an identically zero gradient, which a relative error cannot assess.  For
    the same reason the checked scalar is the loss plus a fixed random
    projection of the candidate scores; the softmax alone is blind to
    per-record shifts of all scores.
    """
    t0 = time.perf_counter()
    cfg = toy_config(dims, seed)
    rng = np.random.default_rng(seed)
    model = FGAModel(cfg, seed)
    for p in model.registry:
        p.data += 0.3 * rng.standard_normal(p.shape)
    for st in model.batchnorms.values():
        shape = np.shape(st.running_mean)
        st.running_mean = 0.3 * rng.standard_normal(shape)
        st.running_var = np.exp(0.3 * rng.standard_normal(shape))
        st.initialized = True
    batch = collate(toy_records(cfg, rng, records), cfg)
    probe = core.constant(0.5 * rng.standard_normal((batch.size, cfg.n_answers)))

    def f():
        out = model.forward(batch, train=False)
        return core.add(out.loss, core.reduce_sum(core.mul(out.scores, probe)))

    res = core.grad_check(f, model.registry, h=h, corrupt=corrupt,
                          max_per_param=max_per_param, rng=rng)
    checked = sum(min(p.data.size, max_per_param or p.data.size) for p in model.registry)
    return ModelGradCheck(res.max_rel_error, res.worst, checked,
                          time.perf_counter() - t0, model.fga.graph.names)
