"""Training loop, evaluation and probability-averaging ensembles."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import core
from ..config import RunConfig
from ..data import DialogRecord
from ..model import FGAModel, collate
from .metrics import EvalReport, metrics, ndcg, ranks_from_probs

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainResult:
    model: FGAModel  # holds the best-validation state
    best_epoch: int
    best_mrr: float | None
    log: list[dict] = field(default_factory=list)


def batches(records: list[DialogRecord], size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(records)) if rng is None else rng.permutation(len(records))
    for lo in range(0, len(records), size):
        yield [records[i] for i in order[lo:lo + size]]


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("FGA_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def predict(model: FGAModel, records: list[DialogRecord], batch_size: int | None = None,
            workers: int | None = None) -> np.ndarray:
    """Eval-mode probabilities, (N, n_A), in record order."""
    if not records:
        return np.zeros((0, model.cfg.n_answers))
    size = batch_size or model.cfg.batch_size
    chunks = list(batches(records, size))
    run = lambda chunk: model.predict(collate(chunk, model.cfg))  # noqa: E731
    workers = workers or _workers()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts, axis=0)


def ensemble_mean(prob_sets: list[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of probability arrays, written as first + mean offset so
    identical members reproduce the first array bit for bit."""
    if not prob_sets:
        raise ValueError("ensemble needs at least one member")
    first = np.asarray(prob_sets[0])
    if len(prob_sets) == 1:
        return first.copy()
    offset = sum(np.asarray(p) - first for p in prob_sets[1:])
    return first + offset / len(prob_sets)


def ensemble_predict(models: list[FGAModel], records: list[DialogRecord],
                     batch_size: int | None = None) -> np.ndarray:
    if not models:
        raise ValueError("ensemble needs at least one checkpoint")
    h = models[0].cfg.hash()
    for m in models[1:]:
        if m.cfg.replace(seed=models[0].cfg.seed).hash() != h:
            raise ValueError("ensemble members must share one configuration")
    return ensemble_mean([predict(m, records, batch_size) for m in models])


def report(probs: np.ndarray, records: list[DialogRecord], with_ndcg: bool = False) -> EvalReport:
    gt = [r.gt_index for r in records]
    rep = metrics(ranks_from_probs(probs, gt))
    if with_ndcg:
        missing = [r.record_id for r in records if r.dense_relevance is None]
        if missing:
            raise ValueError(f"dense_relevance missing for {len(missing)} records, e.g. {missing[0]}")
        rep.ndcg = float(np.mean([ndcg(p, r.dense_relevance) for p, r in zip(probs, records)]))
    return rep


def evaluate(model: FGAModel | list[FGAModel], records: list[DialogRecord],
             with_ndcg: bool = False) -> EvalReport:
    if isinstance(model, list):
        probs = ensemble_predict(model, records)
    else:
        probs = predict(model, records)
    # order-fixed reduction
    order = sorted(range(len(records)), key=lambda i: records[i].record_id)
    return report(probs[order], [records[i] for i in order], with_ndcg)


def calibrate_batchnorm(model: FGAModel, records: list[DialogRecord], seed: int = 0,
                        passes: int = 3) -> FGAModel:
    """Collect batch-norm running statistics with train-mode forwards and no
    parameter update, so an untrained model can be scored in eval mode."""
    rng = np.random.default_rng(seed)
    for _ in range(passes):
        for chunk in batches(records, model.cfg.batch_size, rng):
            model.forward(collate(chunk, model.cfg), train=True, rng=rng)
    return model


def train(model: FGAModel, train_set: list[DialogRecord], val_set: list[DialogRecord],
          cfg: RunConfig | None = None, on_epoch=None) -> TrainResult:
    """Adam over shuffled mini-batches; after each epoch evaluate on ``val_set``
    and keep the state with the best validation MRR."""
    cfg = cfg or model.cfg
    rng = np.random.default_rng(cfg.seed)
    opt = core.Adam(model.registry, cfg.lr, cfg.betas, cfg.adam_eps)
    best_state, best_mrr, best_epoch = model.state(), None, 0
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for chunk in batches(train_set, cfg.batch_size, rng):
            try:
                out = model.forward(collate(chunk, model.cfg), train=True, rng=rng)
                loss = float(out.loss.data)
                if not np.isfinite(loss):
                    raise core.NonFiniteError("non-finite loss")
                out.loss.backward()
                opt.step()
            except core.NonFiniteError as e:
                ids = ", ".join(r.record_id for r in chunk[:3])
                raise DivergenceError(f"epoch {epoch}, batch starting [{ids}]: {e}") from None
            losses.append(loss)
        entry = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else None}
        if val_set:
            rep = evaluate(model, val_set)
            entry.update(val_mrr=rep.mrr, val_r1=rep.r1)
            if best_mrr is None or rep.mrr > best_mrr:
                best_mrr, best_epoch, best_state = rep.mrr, epoch, model.state()
        else:
            best_state, best_epoch = model.state(), epoch
        history.append(entry)
        log.info("epoch %d: %s", epoch, entry)
        if on_epoch is not None:
            on_epoch(entry)
    model.load_state(best_state)
    return TrainResult(model, best_epoch, best_mrr, history)
