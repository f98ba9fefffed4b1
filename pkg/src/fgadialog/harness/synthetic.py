"""Desk-scale synthetic dialogs with a planted cross-utility rule.

Each image holds a few object regions on a blank background; an object
region's feature is the sum of an object direction, a colour direction and
small noise.  The caption names a modifier word.  Earlier history rounds are
idle chatter, so no colour word reaches the model through text.

answer task
    question "what color is the <obj>"; the correct candidate is
    "<modifier> <colour>" where the colour belongs to the region holding
    <obj>.  Distractors are every other modifier/colour combination, so the
    question, the caption and the right image region are all needed.

question task
    the previous round asks which colour is visible and the answer names
    <colour>; the correct next question is "where is the <modifier> <obj>"
    for the object carrying that colour.  Distractors pair the other
    modifier and the other objects.

Directions come from a world seed shared by every split; the record seed
only drives sampling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..config import ANSWER_MODE, QUESTION_MODE, RunConfig
from ..data import encode_array, write_rows
from ..encoders import PAD, UNK, Vocabulary

TEMPLATE_WORDS = ["what", "color", "is", "the", "a", "photo", "of", "scene", "in", "where",
                  "which", "do", "you", "see", "i", "maybe", "not", "sure"]
MODIFIERS = ["light", "dark"]


class SpecError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    count: int = 200
    vocab_size: int = 50
    n_answers: int = 10
    history_rounds: int = 2
    n_regions: int = 8
    region_dim: int = 16
    n_objects: int = 3
    n_colors: int = 6
    objects_per_image: int = 2
    noise: float = 0.05
    task: str = "answer"
    world_seed: int = 0

    def __post_init__(self):
        for f in ("count", "vocab_size", "n_answers", "n_regions", "region_dim", "n_objects",
                  "n_colors", "objects_per_image"):
            v = getattr(self, f)
            if not isinstance(v, int) or v < (0 if f == "count" else 1):
                raise SpecError(f"{f} must be a positive integer")
        if self.history_rounds < (1 if self.task == "question" else 0):
            raise SpecError("history_rounds too small for this task")
        if self.task not in ("answer", "question"):
            raise SpecError(f"unknown task {self.task!r}")
        if self.objects_per_image > min(self.n_regions, self.n_colors, self.n_objects):
            raise SpecError("objects_per_image exceeds regions, colours or objects")
        if self.n_objects + self.n_colors > self.region_dim:
            raise SpecError("region_dim too small for orthogonal object/colour directions")
        if self.noise < 0:
            raise SpecError("noise must be non-negative")
        if self.n_answers < 2:
            raise SpecError("n_answers must be at least 2")
        if self.vocab_size < len(base_tokens(self)):
            raise SpecError(f"vocab_size {self.vocab_size} < {len(base_tokens(self))} required tokens")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise SpecError(str(e)) from None

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as e:
            raise SpecError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise SpecError(f"{path}: spec must be a JSON object")
        return cls.from_dict(d)


def object_words(spec: SyntheticSpec) -> list[str]:
    return [f"obj{k}" for k in range(spec.n_objects)]


def color_words(spec: SyntheticSpec) -> list[str]:
    return [f"col{k}" for k in range(spec.n_colors)]


def base_tokens(spec: SyntheticSpec) -> list[str]:
    return [PAD, UNK] + TEMPLATE_WORDS + MODIFIERS + object_words(spec) + color_words(spec)


def build_vocabulary(spec: SyntheticSpec) -> Vocabulary:
    toks = base_tokens(spec)
    toks += [f"w{k}" for k in range(spec.vocab_size - len(toks))]
    return Vocabulary(toks)


@dataclass
class World:
    obj_dirs: np.ndarray  # (n_objects, dim)
    col_dirs: np.ndarray  # (n_colors, dim)


def make_world(spec: SyntheticSpec) -> World:
    rng = np.random.default_rng(spec.world_seed)
    q, _ = np.linalg.qr(rng.standard_normal((spec.region_dim, spec.region_dim)))
    dirs = q.T
    return World(dirs[:spec.n_objects], dirs[spec.n_objects:spec.n_objects + spec.n_colors])


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    vocab: Vocabulary
    rows: list[dict]

    def __len__(self) -> int:
        return len(self.rows)

    def write(self, path) -> None:
        write_rows(path, self.rows)

    def records(self, cfg: RunConfig):
        from ..data import record_from_row
        return [record_from_row(r, self.vocab, cfg) for r in self.rows]


def _image(spec: SyntheticSpec, world: World, rng, objs, cols) -> tuple[np.ndarray, list[int]]:
    # background regions stay blank: under cosine scoring a noisy background
    # region scores as strongly as an object region
    img = np.zeros((spec.n_regions, spec.region_dim))
    slots = rng.choice(spec.n_regions, size=len(objs), replace=False)
    for s, o, c in zip(slots, objs, cols):
        img[s] = world.obj_dirs[o] + world.col_dirs[c]
        img[s] += rng.standard_normal(spec.region_dim) * spec.noise
    return img.astype(np.float32), [int(s) for s in slots]


def _candidates(rng, correct: str, hard: list[str], rest: list[str], fillers: list[str],
                n: int) -> tuple[list[str], int]:
    pool = [c for c in dict.fromkeys(hard) if c != correct]
    others = [c for c in rest if c != correct and c not in pool]
    rng.shuffle(others)
    pool += others
    k = 0
    while len(pool) < n - 1:
        pool.append(fillers[k % len(fillers)] + ("" if k < len(fillers) else f" w{k}"))
        k += 1
    cands = [correct] + pool[:n - 1]
    order = rng.permutation(n)
    cands = [cands[i] for i in order]
    return cands, int(np.flatnonzero(order == 0)[0])


FILLERS = ["maybe", "not sure", "i do not see", "you see"]


def _idle_round(rng, objects: list[str]) -> list[str]:
    # earlier rounds never carry colour words, so text alone cannot reveal the answer
    return [f"where is the {objects[int(rng.integers(len(objects)))]}",
            FILLERS[int(rng.integers(len(FILLERS)))]]


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticDataset:
    """Deterministic given (spec, seed)."""
    rng = np.random.default_rng(seed)
    world = make_world(spec)
    vocab = build_vocabulary(spec)
    O, C = object_words(spec), color_words(spec)
    rows = []
    for k in range(spec.count):
        objs = [int(x) for x in rng.choice(spec.n_objects, spec.objects_per_image, replace=False)]
        cols = [int(x) for x in rng.choice(spec.n_colors, spec.objects_per_image, replace=False)]
        img, _ = _image(spec, world, rng, objs, cols)
        mod = int(rng.integers(len(MODIFIERS)))
        caption = f"a photo of the scene in {MODIFIERS[mod]}"
        target = int(rng.integers(spec.objects_per_image))

        if spec.task == "answer":
            n_hist = int(rng.integers(spec.history_rounds + 1))
            history = []
            for _ in range(n_hist):
                history.append(_idle_round(rng, O))
            question = f"what color is the {O[objs[target]]}"
            correct = f"{MODIFIERS[mod]} {C[cols[target]]}"
            hard = [f"{m} {C[cols[target]]}" for m in MODIFIERS]
            hard += [f"{m} {C[c]}" for c in cols for m in MODIFIERS]
            rest = [f"{m} {c}" for c in C for m in MODIFIERS]
        else:
            n_hist = int(rng.integers(1, spec.history_rounds + 1))
            history = []
            for _ in range(n_hist - 1):
                history.append(_idle_round(rng, O))
            history.append(["which color do you see", f"i see {C[cols[target]]}"])
            correct = f"where is the {MODIFIERS[mod]} {O[objs[target]]}"
            question = correct
            hard = [f"where is the {m} {O[objs[target]]}" for m in MODIFIERS]
            hard += [f"where is the {m} {O[o]}" for o in objs for m in MODIFIERS]
            rest = [f"where is the {m} {o}" for o in O for m in MODIFIERS]
        cands, gt = _candidates(rng, correct, hard, rest, FILLERS, spec.n_answers)
        rows.append({
            "record_id": f"{spec.task}-{seed}-{k:05d}",
            "image": encode_array(img),
            "caption": caption,
            "history": history,
            "question": question,
            "candidates": cands,
            "gt_index": gt,
        })
    return SyntheticDataset(spec, vocab, rows)


def oracle_solve(row: dict, spec: SyntheticSpec) -> int:
    """Index of the candidate the planted rule selects, decoded without learning."""
    from ..data import decode_array

    world = make_world(spec)
    img = decode_array(row["image"]).astype(np.float64)
    obj_score = img @ world.obj_dirs.T
    col_score = img @ world.col_dirs.T
    present = obj_score.max(axis=1) > 0.5
    region_obj = {int(obj_score[r].argmax()): r for r in np.flatnonzero(present)}
    region_col = {int(col_score[r].argmax()): r for r in np.flatnonzero(present)}
    mod = row["caption"].split()[-1]
    O, C = object_words(spec), color_words(spec)
    if spec.task == "answer":
        obj = O.index(row["question"].split()[-1])
        colour = C[int(col_score[region_obj[obj]].argmax())]
        want = f"{mod} {colour}"
    else:
        colour = C.index(row["history"][-1][1].split()[-1])
        obj = O[int(obj_score[region_col[colour]].argmax())]
        want = f"where is the {mod} {obj}"
    return row["candidates"].index(want)


def suggested_config(spec: SyntheticSpec, **overrides) -> RunConfig:
    """A small model configuration sized for a synthetic spec."""
    base = dict(
        vocab_size=spec.vocab_size,
        n_question=8,
        n_caption=8,
        n_history=6,
        n_answer_tokens=5,
        history_rounds=spec.history_rounds,
        n_answers=spec.n_answers,
        n_regions=spec.n_regions,
        d_embed=32,
        d_question=32,
        d_caption=16,
        d_history=16,
        d_answer=32,
        d_image=spec.region_dim,
        d_round=16,
        batch_size=16,
        lr=1e-3,
        epochs=50,
        dropout_image=0.0,
        dropout_local=0.0,
        dropout_fusion=0.1,
        dtype="float32",
        mode=ANSWER_MODE if spec.task == "answer" else QUESTION_MODE,
    )
    base.update(overrides)
    return RunConfig(**base)


def spec_to_json(spec: SyntheticSpec) -> str:
    return json.dumps(asdict(spec), sort_keys=True)
