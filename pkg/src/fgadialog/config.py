"""Run configuration and the factor-graph layout derived from it."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

ANSWER_MODE = "answer"
QUESTION_MODE = "question-generation"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # vocabulary / sequence lengths
    vocab_size: int = 50
    n_question: int = 20
    n_caption: int = 20
    n_history: int = 20
    n_answer_tokens: int = 20
    history_rounds: int = 10
    n_answers: int = 100
    n_regions: int = 49
    # embedding dims
    d_embed: int = 128
    d_question: int = 512
    d_caption: int = 128
    d_history: int = 128
    d_answer: int = 512
    d_image: int = 512
    d_round: int = 128
    # regularization
    dropout_image: float = 0.5
    dropout_local: float = 0.1
    dropout_fusion: float = 0.3
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    l2_epsilon: float = 1e-12
    # optimization
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 4
    seed: int = 0
    # model structure
    mode: str = ANSWER_MODE
    pairs: Any = "all"  # "all" or a list of [utility, utility] pairs
    prior_utilities: tuple[str, ...] = ("question", "caption")
    last_state: str = "padded_end"  # or "true_length"
    dtype: str = "float64"
    importance_absolute: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.prior_utilities = tuple(self.prior_utilities)
        if self.pairs != "all":
            self.pairs = [list(p) for p in self.pairs]
        self.validate()

    def validate(self) -> None:
        dims = ["vocab_size", "n_question", "n_caption", "n_history", "n_answer_tokens",
                "n_answers", "n_regions", "d_embed", "d_question", "d_caption", "d_history",
                "d_answer", "d_image", "d_round", "batch_size"]
        for name in dims:
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.history_rounds < 0 or self.epochs < 0:
            raise ConfigError("history_rounds and epochs must be non-negative")
        if self.n_answers < 2:
            raise ConfigError("n_answers must be at least 2")
        if self.mode not in (ANSWER_MODE, QUESTION_MODE):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.last_state not in ("padded_end", "true_length"):
            raise ConfigError(f"unknown last_state {self.last_state!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        for r in ("dropout_image", "dropout_local", "dropout_fusion"):
            if not 0.0 <= getattr(self, r) < 1.0:
                raise ConfigError(f"{r} must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["prior_utilities"] = list(self.prior_utilities)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)

    @property
    def L(self) -> int:
        """Length of the fused attention representation."""
        return (self.d_image + self.d_question + self.d_caption + self.d_answer
                + self.history_rounds * self.d_round)


@dataclass(frozen=True)
class UtilitySpec:
    name: str
    kind: str
    n: int
    d: int
    group: str
    prior: str = "none"  # "none" or "last"


@dataclass
class GraphConfig:
    utilities: list[UtilitySpec]
    pairs: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        names = [u.name for u in self.utilities]
        if len(set(names)) != len(names):
            raise ConfigError("utility names must be unique")
        order = {n: k for k, n in enumerate(names)}
        canon = []
        for a, b in self.pairs:
            if a not in order or b not in order:
                raise ConfigError(f"pair ({a}, {b}) names an unknown utility")
            if a == b:
                raise ConfigError("joint pairs need two distinct utilities")
            canon.append((a, b) if order[a] < order[b] else (b, a))
        self.pairs = sorted(set(canon), key=lambda p: (order[p[0]], order[p[1]]))

    def __getitem__(self, name: str) -> UtilitySpec:
        for u in self.utilities:
            if u.name == name:
                return u
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [u.name for u in self.utilities]

    def to_dict(self) -> dict:
        return {"utilities": [asdict(u) for u in self.utilities],
                "pairs": [list(p) for p in self.pairs]}

    @classmethod
    def from_dict(cls, d: dict) -> "GraphConfig":
        return cls([UtilitySpec(**u) for u in d["utilities"]], [tuple(p) for p in d.get("pairs", [])])


def all_pairs(names: list[str]) -> list[tuple[str, str]]:
    return [(a, b) for k, a in enumerate(names) for b in names[k + 1:]]


def dialog_graph(cfg: RunConfig) -> GraphConfig:
    """Utilities for the visual-dialog model: image, query, caption, answer bank
    and T history questions/answers (two sharing groups)."""
    prior = lambda name: "last" if name in cfg.prior_utilities else "none"  # noqa: E731
    utils = [
        UtilitySpec("image", "image", cfg.n_regions, cfg.d_image, "image", prior("image")),
        UtilitySpec("question", "question", cfg.n_question, cfg.d_question, "question",
                    prior("question")),
        UtilitySpec("caption", "caption", cfg.n_caption, cfg.d_caption, "caption", prior("caption")),
        UtilitySpec("answers", "answer_bank", cfg.n_answers, cfg.d_answer, "answers",
                    prior("answers")),
    ]
    for t in range(1, cfg.history_rounds + 1):
        utils.append(UtilitySpec(f"hq{t}", "history_q", cfg.n_history, cfg.d_history, "hq",
                                 prior("hq")))
        utils.append(UtilitySpec(f"ha{t}", "history_a", cfg.n_history, cfg.d_history, "ha",
                                 prior("ha")))
    names = [u.name for u in utils]
    if cfg.pairs == "all":
        pairs = all_pairs(names)
    else:
        pairs = [tuple(p) for p in cfg.pairs]
    return GraphConfig(utils, pairs)
