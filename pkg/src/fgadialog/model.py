"""End-to-end discriminative dialog model: encoders, factor graph attention,
fusion MLP over candidates, loss, and checkpoint persistence."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import core, encoders, fga
from .config import QUESTION_MODE, RunConfig, dialog_graph
from .core import BatchNormState, ParameterRegistry, Tensor
from .data import Batch, DialogRecord
from .encoders import TokenSequence, pad_or_truncate

CHECKPOINT_FORMAT = "fgadialog-checkpoint/1"


@dataclass
class FusionParams:
    hist_W: core.Parameter | None
    hist_b: core.Parameter | None
    W1: core.Parameter
    b1: core.Parameter
    bn1: BatchNormState
    W2: core.Parameter
    b2: core.Parameter
    bn2: BatchNormState
    W_out: core.Parameter
    b_out: core.Parameter
    dropout: float = 0.3


@dataclass
class ModelOutput:
    probs: Tensor
    scores: Tensor
    attention: fga.AttentionResult
    loss: Tensor | None = None


def fuse_history(pairs: list[tuple[Tensor, Tensor]], W: Tensor, b: Tensor) -> Tensor:
    """Per round: concat(a_Qt, a_At) -> W . + b; rounds concatenated in order."""
    rounds = [core.linear(core.concat([aq, aa], axis=-1), W, b) for aq, aa in pairs]
    return core.concat(rounds, axis=-1)


def assemble(a_I: Tensor, a_Q: Tensor, a_C: Tensor, a_A: Tensor, a_H: Tensor | None,
             dims: tuple[int, ...] | None = None) -> Tensor:
    """Fixed-order concatenation (image, question, caption, answers, history)."""
    parts = [a_I, a_Q, a_C, a_A] + ([a_H] if a_H is not None else [])
    if dims is not None and tuple(p.shape[-1] for p in parts) != tuple(dims):
        raise core.ContractError(
            f"assemble: dims {[p.shape[-1] for p in parts]} != expected {list(dims)}")
    return core.concat(parts, axis=-1)


def score_answers(a: Tensor, U_A: Tensor, fusion: FusionParams, train: bool = False,
                  rng=None) -> Tensor:
    """MLP((a, u)) for every candidate row u of U_A; returns (B, n_A) scores."""
    B, nA, dA = U_A.shape
    if nA < 2:
        raise core.ContractError("score_answers needs at least two candidates")
    L = a.shape[-1]
    rep = core.expand(core.reshape(a, (B, 1, L)), (B, nA, L))
    x = core.reshape(core.concat([rep, U_A], axis=-1), (B * nA, L + dA))
    h = core.relu(core.batch_norm(core.linear(x, fusion.W1, fusion.b1), fusion.bn1, train))
    h = core.relu(core.batch_norm(core.linear(h, fusion.W2, fusion.b2), fusion.bn2, train))
    h = core.dropout(h, fusion.dropout, train, rng)
    s = core.linear(h, fusion.W_out, fusion.b_out)
    return core.reshape(s, (B, nA))


def build_query(rec: DialogRecord, cfg: RunConfig) -> TokenSequence:
    """The query utility's tokens: the current question, or in question-generation
    mode the previous interaction (last history question followed by its answer)."""
    if cfg.mode != QUESTION_MODE:
        return pad_or_truncate(rec.question, cfg.n_question)
    if not rec.history:
        return TokenSequence([0] * cfg.n_question, 0)
    q, a = rec.history[-1]
    ids = q.ids[:q.true_length] + a.ids[:a.true_length]
    return pad_or_truncate(TokenSequence.of(ids), cfg.n_question)


def collate(records: list[DialogRecord], cfg: RunConfig) -> Batch:
    T = cfg.history_rounds
    B = len(records)
    hq = np.zeros((B, T, cfg.n_history), dtype=np.int64)
    ha = np.zeros((B, T, cfg.n_history), dtype=np.int64)
    mask = np.zeros((B, T))
    for k, r in enumerate(records):
        for t, (q, a) in enumerate(r.history[:T]):
            hq[k, t] = pad_or_truncate(q, cfg.n_history).ids
            ha[k, t] = pad_or_truncate(a, cfg.n_history).ids
            mask[k, t] = 1.0
    cands = [[pad_or_truncate(c, cfg.n_answer_tokens) for c in r.candidates] for r in records]
    return Batch(
        image=np.stack([r.image for r in records]),
        query=np.array([build_query(r, cfg).ids for r in records], dtype=np.int64),
        caption=np.array([pad_or_truncate(r.caption, cfg.n_caption).ids for r in records],
                         dtype=np.int64),
        hist_q=hq,
        hist_a=ha,
        hist_mask=mask,
        candidates=np.array([[c.ids for c in cs] for cs in cands], dtype=np.int64),
        candidate_len=np.array([[c.true_length for c in cs] for cs in cands], dtype=np.int64),
        gt=np.array([r.gt_index for r in records], dtype=np.int64),
        record_ids=[r.record_id for r in records],
    )


class FGAModel:
    def __init__(self, cfg: RunConfig, seed: int | None = None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.dtype = np.dtype(cfg.dtype)
        self.graph = dialog_graph(cfg)
        self.registry = ParameterRegistry()
        rng = np.random.default_rng(self.seed)
        reg, dt = self.registry, self.dtype

        E = rng.standard_normal((cfg.vocab_size, cfg.d_embed)) * np.sqrt(2.0 / cfg.d_embed)
        E[0] = 0.0
        self.E = reg.add("embed.E", E.astype(dt))
        self.lstm = {
            "question": encoders.make_lstm(reg, "lstm.question", cfg.d_embed, cfg.d_question, rng, dt),
            "caption": encoders.make_lstm(reg, "lstm.caption", cfg.d_embed, cfg.d_caption, rng, dt),
            "hq": encoders.make_lstm(reg, "lstm.hq", cfg.d_embed, cfg.d_history, rng, dt),
            "ha": encoders.make_lstm(reg, "lstm.ha", cfg.d_embed, cfg.d_history, rng, dt),
            "answers": encoders.make_lstm(reg, "lstm.answers", cfg.d_embed, cfg.d_answer, rng, dt),
        }
        self.img_W = reg.add("image.W", (rng.standard_normal((cfg.d_image, cfg.d_image))
                                         * np.sqrt(2.0 / cfg.d_image)).astype(dt))
        self.img_b = reg.add("image.b", np.zeros(cfg.d_image, dtype=dt))

        self.fga = fga.FactorGraphParams(self.graph, reg, rng, dt, cfg.bn_momentum, cfg.bn_epsilon,
                                         cfg.l2_epsilon, cfg.dropout_local)

        def lin(name, d_out, d_in):
            W = reg.add(f"{name}.W", (rng.standard_normal((d_out, d_in)) * np.sqrt(2.0 / d_in)).astype(dt))
            return W, reg.add(f"{name}.b", np.zeros(d_out, dtype=dt))

        T = cfg.history_rounds
        hist_W = hist_b = None
        if T:
            hist_W, hist_b = lin("fusion.history", cfg.d_round, 2 * cfg.d_history)
        width = cfg.L + cfg.d_answer
        h1, h2 = width // 2, width // 4
        W1, b1 = lin("fusion.mlp1", h1, width)
        W2, b2 = lin("fusion.mlp2", h2, h1)
        Wo, bo = lin("fusion.out", 1, h2)
        bn = lambda name, n: core.make_batchnorm(reg, name, (n,), dt, cfg.bn_momentum,  # noqa: E731
                                                 cfg.bn_epsilon)
        self.fusion = FusionParams(hist_W, hist_b, W1, b1, bn("fusion.bn1", h1), W2, b2,
                                   bn("fusion.bn2", h2), Wo, bo, cfg.dropout_fusion)

    # -- bookkeeping --------------------------------------------------------

    @property
    def batchnorms(self) -> dict[str, BatchNormState]:
        out = dict(self.fga.bn)
        out["fusion.bn1"] = self.fusion.bn1
        out["fusion.bn2"] = self.fusion.bn2
        return out

    def parameter_count(self) -> int:
        return self.registry.count()

    def state(self) -> dict:
        """Deep copy of every parameter value and batch-norm statistic."""
        return {
            "params": {p.name: p.data.copy() for p in self.registry},
            "bn": {n: (st.running_mean.copy(), st.running_var.copy(), st.initialized)
                   for n, st in self.batchnorms.items()},
            "pruned": sorted(self.fga.pruned),
            "frozen": [p.name for p in self.registry if not p.trainable],
        }

    def load_state(self, state: dict) -> None:
        for name, value in state["params"].items():
            self.registry[name].data = np.array(value, dtype=self.dtype, copy=True)
            self.registry[name].zero_grad()
        bns = self.batchnorms
        for name, (rm, rv, init) in state["bn"].items():
            bns[name].running_mean = np.array(rm, dtype=self.dtype, copy=True)
            bns[name].running_var = np.array(rv, dtype=self.dtype, copy=True)
            bns[name].initialized = bool(init)
        self.fga.pruned = {tuple(p) for p in state.get("pruned", [])}
        frozen = set(state.get("frozen", []))
        for p in self.registry:
            p.trainable = p.name not in frozen

    def copy(self) -> "FGAModel":
        m = FGAModel(self.cfg, self.seed)
        m.load_state(self.state())
        return m

    # -- forward ------------------------------------------------------------

    def utilities(self, batch: Batch, train: bool = False, rng=None) -> list[fga.Utility]:
        cfg, dt = self.cfg, self.dtype
        img = encoders.encode_image(core.constant(batch.image, dt), self.img_W, self.img_b,
                                    cfg.dropout_image, train, rng)
        Q = encoders.encode_text(batch.query, self.E, self.lstm["question"])
        C = encoders.encode_text(batch.caption, self.E, self.lstm["caption"])
        lengths = batch.candidate_len if cfg.last_state == "true_length" else None
        A = encoders.encode_answer_bank(batch.candidates, self.E, self.lstm["answers"], lengths)
        made = {"image": img, "question": Q, "caption": C, "answers": A}
        T = cfg.history_rounds
        if T:
            mask = core.constant(batch.hist_mask.reshape(batch.size, T, 1, 1), dt)
            HQ = core.mul(encoders.encode_text(batch.hist_q, self.E, self.lstm["hq"]), mask)
            HA = core.mul(encoders.encode_text(batch.hist_a, self.E, self.lstm["ha"]), mask)
            for t in range(T):
                made[f"hq{t + 1}"] = core.index(HQ, (slice(None), t))
                made[f"ha{t + 1}"] = core.index(HA, (slice(None), t))
        return [fga.Utility(u.name, u.kind, u.group, made[u.name]) for u in self.graph.utilities]

    def forward(self, batch: Batch, train: bool = False, rng=None,
                keep_terms: bool = False) -> ModelOutput:
        cfg = self.cfg
        utils = self.utilities(batch, train, rng)
        att = fga.run_attention(utils, self.fga, train, rng, keep_terms)
        a = att.attended
        a_H = None
        if cfg.history_rounds:
            pairs = [(a[f"hq{t}"], a[f"ha{t}"]) for t in range(1, cfg.history_rounds + 1)]
            a_H = fuse_history(pairs, self.fusion.hist_W, self.fusion.hist_b)
        dims = (cfg.d_image, cfg.d_question, cfg.d_caption, cfg.d_answer) + (
            (cfg.history_rounds * cfg.d_round,) if cfg.history_rounds else ())
        rep = assemble(a["image"], a["question"], a["caption"], a["answers"], a_H, dims)
        U_A = next(u.M for u in utils if u.name == "answers")
        scores = score_answers(rep, U_A, self.fusion, train, rng)
        probs = core.softmax(scores, axis=-1)
        loss = core.cross_entropy(scores, batch.gt) if batch.gt is not None else None
        return ModelOutput(probs, scores, att, loss)

    def predict(self, batch: Batch) -> np.ndarray:
        return self.forward(batch, train=False).probs.data


# ---------------------------------------------------------------------------
# checkpoints


def _blob_path(path: str) -> str:
    root, _ = os.path.splitext(path)
    return root + ".bin"


def save_checkpoint(model: FGAModel, path, extra: dict | None = None) -> None:
    """JSON manifest at ``path`` plus a little-endian float blob next to it.

    float32 models are stored as "f32"; float64 models as "f64" so that
    reloading is exact.
    """
    path = str(path)
    code, np_dt = ("f32", "<f4") if model.dtype == np.float32 else ("f64", "<f8")
    entries, chunks, offset = [], [], 0
    arrays = [(p.name, p.data) for p in model.registry]
    for name, st in model.batchnorms.items():
        arrays.append((f"{name}.running_mean", st.running_mean))
        arrays.append((f"{name}.running_var", st.running_var))
    for name, a in arrays:
        raw = np.ascontiguousarray(a, dtype=np_dt).tobytes()
        entries.append({"name": name, "shape": list(np.shape(a)), "dtype": code,
                        "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "seed": model.seed,
        "blob": os.path.basename(_blob_path(path)),
        "pruned": [list(p) for p in sorted(model.fga.pruned)],
        "frozen": [p.name for p in model.registry if not p.trainable],
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    with open(_blob_path(path), "wb") as fh:
        fh.write(b"".join(chunks))
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    path = str(path)
    with open(path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: not a checkpoint manifest ({e})") from None
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint manifest")
    return manifest


def load_checkpoint(path) -> FGAModel:
    path = str(path)
    manifest = read_manifest(path)
    cfg = RunConfig.from_dict(manifest["config"])
    if cfg.hash() != manifest["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    with open(os.path.join(os.path.dirname(os.path.abspath(path)), manifest["blob"]), "rb") as fh:
        blob = fh.read()
    model = FGAModel(cfg, manifest["seed"])
    values = {}
    for e in manifest["tensors"]:
        np_dt = {"f32": "<f4", "f64": "<f8"}[e["dtype"]]
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(blob, dtype=np_dt, count=count, offset=e["byte_offset"])
        values[e["name"]] = a.reshape(e["shape"])
    bns = model.batchnorms
    state = {"params": {}, "bn": {}, "pruned": manifest.get("pruned", []),
             "frozen": manifest.get("frozen", [])}
    for p in model.registry:
        if p.name not in values:
            raise ValueError(f"{path}: missing tensor {p.name}")
        state["params"][p.name] = values[p.name]
    # loaded statistics count as collected
    for name in bns:
        state["bn"][name] = (values[f"{name}.running_mean"], values[f"{name}.running_var"], True)
    model.load_state(state)
    return model
