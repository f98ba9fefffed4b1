"""Dialog records: JSONL reading/writing, validation and the feature sidecar."""

from __future__ import annotations

import base64
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .encoders import TokenSequence, Vocabulary, pad_or_truncate

SIDECAR_MAGIC = b"FGAF"


class DatasetError(ValueError):
    pass


@dataclass
class DialogRecord:
    record_id: str
    image: np.ndarray  # (n_regions, d_image) float32
    caption: TokenSequence
    history: list[tuple[TokenSequence, TokenSequence]]
    question: TokenSequence
    candidates: list[TokenSequence]
    gt_index: int
    dense_relevance: np.ndarray | None = None
    image_file: str | None = None  # sidecar reference this record was loaded from

    def __eq__(self, other) -> bool:
        if not isinstance(other, DialogRecord):
            return NotImplemented
        same_rel = (self.dense_relevance is None and other.dense_relevance is None) or (
            self.dense_relevance is not None and other.dense_relevance is not None
            and np.array_equal(self.dense_relevance, other.dense_relevance))
        return (self.record_id == other.record_id and np.array_equal(self.image, other.image)
                and self.caption == other.caption and self.history == other.history
                and self.question == other.question and self.candidates == other.candidates
                and self.gt_index == other.gt_index and same_rel)


# ---------------------------------------------------------------------------
# image encoding


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f4")
    return {"encoding": "base64-f32le", "shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    if d.get("encoding") != "base64-f32le":
        raise ValueError(f"unsupported image encoding {d.get('encoding')!r}")
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(d["shape"]).astype(np.float32)


def write_features(path, features: dict[str, np.ndarray]) -> None:
    """Sidecar: magic, uint32 (count, n_I, d_I), an index table of
    (uint16 key length, utf-8 key, uint64 block offset), then f32 LE blocks."""
    keys = sorted(features)
    shapes = {np.asarray(features[k]).shape for k in keys}
    if len(shapes) > 1:
        raise DatasetError("all feature blocks must share one shape")
    n_I, d_I = shapes.pop() if shapes else (0, 0)
    block = n_I * d_I * 4
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC + struct.pack("<III", len(keys), n_I, d_I))
        for k, key in enumerate(keys):
            kb = key.encode()
            fh.write(struct.pack("<H", len(kb)) + kb + struct.pack("<Q", k * block))
        for key in keys:
            fh.write(np.ascontiguousarray(features[key], dtype="<f4").tobytes())


def read_features(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != SIDECAR_MAGIC:
        raise DatasetError(f"{path}: not a feature sidecar")
    count, n_I, d_I = struct.unpack_from("<III", buf, 4)
    pos = 16
    index = []
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", buf, pos)
        key = buf[pos + 2:pos + 2 + klen].decode()
        (off,) = struct.unpack_from("<Q", buf, pos + 2 + klen)
        index.append((key, off))
        pos += 2 + klen + 8
    out = {}
    for key, off in index:
        a = np.frombuffer(buf, dtype="<f4", count=n_I * d_I, offset=pos + off)
        out[key] = a.reshape(n_I, d_I).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# JSONL rows <-> records


def _tokens(vocab: Vocabulary, text, n: int) -> TokenSequence:
    return pad_or_truncate(TokenSequence.of(vocab.encode(text)), n)


def _text(vocab: Vocabulary, seq: TokenSequence) -> str:
    return " ".join(vocab.decode(seq.ids[:seq.true_length]))


def record_from_row(row: dict, vocab: Vocabulary, cfg: RunConfig,
                    features: dict[str, np.ndarray] | None = None) -> DialogRecord:
    rid = str(row.get("record_id", "?"))

    def fail(fieldname, msg):
        raise DatasetError(f"record {rid}: field {fieldname!r}: {msg}")

    for f in ("record_id", "caption", "question", "candidates", "gt_index"):
        if f not in row:
            fail(f, "missing")
    if "image" in row:
        try:
            image = decode_array(row["image"])
        except (ValueError, KeyError, TypeError) as e:
            fail("image", str(e))
        image_file = None
    elif "image_file" in row:
        if features is None or rid not in features:
            fail("image_file", "no sidecar block for this record")
        image = features[rid]
        image_file = row["image_file"]
    else:
        fail("image", "missing (need 'image' or 'image_file')")
    if image.shape != (cfg.n_regions, cfg.d_image):
        fail("image", f"shape {image.shape} != ({cfg.n_regions}, {cfg.d_image})")
    if not np.all(np.isfinite(image)):
        fail("image", "non-finite features")

    cands = row["candidates"]
    if not isinstance(cands, list) or len(cands) != cfg.n_answers:
        fail("candidates", f"expected {cfg.n_answers} candidates, got "
             f"{len(cands) if isinstance(cands, list) else type(cands).__name__}")
    gt = row["gt_index"]
    if not isinstance(gt, int) or not 0 <= gt < cfg.n_answers:
        fail("gt_index", f"must be an int in [0, {cfg.n_answers})")
    hist = row.get("history", [])
    if len(hist) > cfg.history_rounds:
        fail("history", f"{len(hist)} rounds exceed T={cfg.history_rounds}")
    for pair in hist:
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            fail("history", "each round must be a [question, answer] pair")
    rel = row.get("dense_relevance")
    if rel is not None:
        rel = np.asarray(rel, dtype=np.float64)
        if rel.shape != (cfg.n_answers,) or np.any(rel < 0) or np.any(rel > 1):
            fail("dense_relevance", f"need {cfg.n_answers} values in [0, 1]")

    return DialogRecord(
        record_id=rid,
        image=image,
        caption=_tokens(vocab, row["caption"], cfg.n_caption),
        history=[(_tokens(vocab, q, cfg.n_history), _tokens(vocab, a, cfg.n_history))
                 for q, a in hist],
        question=_tokens(vocab, row["question"], cfg.n_question),
        candidates=[_tokens(vocab, c, cfg.n_answer_tokens) for c in cands],
        gt_index=gt,
        dense_relevance=rel,
        image_file=image_file,
    )


def record_to_row(rec: DialogRecord, vocab: Vocabulary) -> dict:
    row = {
        "record_id": rec.record_id,
        "caption": _text(vocab, rec.caption),
        "history": [[_text(vocab, q), _text(vocab, a)] for q, a in rec.history],
        "question": _text(vocab, rec.question),
        "candidates": [_text(vocab, c) for c in rec.candidates],
        "gt_index": rec.gt_index,
    }
    if rec.image_file is not None:
        row["image_file"] = rec.image_file
    else:
        row["image"] = encode_array(rec.image)
    if rec.dense_relevance is not None:
        row["dense_relevance"] = [float(x) for x in rec.dense_relevance]
    return row


def load_dataset(path, vocab: Vocabulary, cfg: RunConfig) -> list[DialogRecord]:
    """Read a JSONL dataset.  Records referencing ``image_file`` resolve it
    relative to the dataset file."""
    records = []
    sidecars: dict[str, dict] = {}
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {lineno}: invalid JSON ({e})") from None
            feats = None
            if "image_file" in row:
                ref = row["image_file"]
                if ref not in sidecars:
                    sidecars[ref] = read_features(os.path.join(base, ref))
                feats = sidecars[ref]
            records.append(record_from_row(row, vocab, cfg, feats))
    return records


def write_dataset(path, records: list[DialogRecord], vocab: Vocabulary) -> None:
    write_rows(path, [record_to_row(r, vocab) for r in records])


def write_rows(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class Batch:
    image: np.ndarray       # (B, n_I, d_I)
    query: np.ndarray       # (B, n_Q)
    caption: np.ndarray     # (B, n_C)
    hist_q: np.ndarray      # (B, T, n_H)
    hist_a: np.ndarray      # (B, T, n_H)
    hist_mask: np.ndarray   # (B, T) 1 where a round is present
    candidates: np.ndarray  # (B, n_A, n_tok)
    candidate_len: np.ndarray  # (B, n_A)
    gt: np.ndarray          # (B,)
    record_ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.gt.shape[0]
