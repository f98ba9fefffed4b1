"""Factor graph attention over an arbitrary set of utilities.

A utility is a batch of entity matrices of shape (B, n, d): row ``u`` holds the
embedding of entity ``u``.  For each utility the unit computes

* local information   psi_i(u)       = v_i . relu(V_i u)
* local interactions  psi_ii(u, u')  = <L_i u / |L_i u|, R_i u' / |R_i u'|>
* joint interactions  psi_ij(u, u')  = <L_ij u / |L_ij u|, R_ji u' / |R_ji u'|>

(interaction scores pass through a scalar batch norm), messages
mu_{j->i}(u) = sum_u' W_ij(u, u') psi_ij(u, u'), the belief

    b_i = softmax(what_i p_i + w_i psi_i + sum_j w_ij mu_{j->i})

and the attended vector a_i = sum_u b_i(u) u.  Everything is computed in a
single aggregation pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core
from .config import ConfigError, GraphConfig, UtilitySpec
from .core import BatchNormState, ParameterRegistry, Tensor


@dataclass
class Utility:
    name: str
    kind: str
    group: str
    M: Tensor  # (B, n, d)

    @property
    def n(self) -> int:
        return self.M.shape[-2]

    @property
    def d(self) -> int:
        return self.M.shape[-1]


@dataclass
class AttentionResult:
    beliefs: dict[str, Tensor]
    attended: dict[str, Tensor]
    # raw (pre-weight) cue terms per utility: "prior", "local", and one entry per
    # message source utility (the utility's own name for local interactions)
    terms: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    interactions: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# single-factor operations


def local_info(M: Tensor, v: Tensor, V: Tensor, dropout_rate: float = 0.0, train: bool = False,
               rng=None) -> Tensor:
    """Per-entity score v . relu(dropout(V u)); shape M.shape[:-1]."""
    h = core.dropout(core.linear(M, V), dropout_rate, train, rng)
    return core.reduce_sum(core.mul(core.relu(h), v), axis=-1)


def _cosine(Ma: Tensor, Mb: Tensor, La: Tensor, Rb: Tensor, eps: float) -> Tensor:
    ea = core.l2_normalize(core.linear(Ma, La), eps)
    eb = core.l2_normalize(core.linear(Mb, Rb), eps)
    return core.matmul(ea, core.transpose(eb))


def self_interaction(M: Tensor, L: Tensor, R: Tensor, bn: BatchNormState | None = None,
                     train: bool = False, eps: float = 1e-12) -> Tensor:
    """(n, n) cosine scores between left- and right-embedded entities of one utility."""
    raw = _cosine(M, M, L, R, eps)
    return raw if bn is None else core.batchnorm_scalar(raw, bn, train)


def joint_interaction(Mi: Tensor, Mj: Tensor, Lij: Tensor, Rji: Tensor,
                      bn: BatchNormState | None = None, train: bool = False,
                      eps: float = 1e-12) -> Tensor:
    """(n_i, n_j) cosine scores between entities of two different utilities."""
    raw = _cosine(Mi, Mj, Lij, Rji, eps)
    return raw if bn is None else core.batchnorm_scalar(raw, bn, train)


def message(psi: Tensor, W: Tensor) -> Tensor:
    """mu(u_i) = sum_{u_j} W(u_i, u_j) psi(u_i, u_j)."""
    if psi.shape[-2:] != W.shape:
        raise core.ContractError(f"message: psi {psi.shape} vs W {W.shape}")
    return core.reduce_sum(core.mul(psi, W), axis=-1)


def belief(weighted_terms: list[tuple[Tensor, Tensor]]) -> Tensor:
    """softmax over entities of sum_k weight_k * term_k."""
    if not weighted_terms:
        raise core.ContractError("belief needs at least one term")
    n = weighted_terms[0][1].shape[-1]
    logits = None
    for w, term in weighted_terms:
        if term.shape[-1] != n:
            raise core.ContractError("belief terms must share the entity axis")
        x = core.mul(term, w)
        logits = x if logits is None else core.add(logits, x)
    return core.softmax(logits, axis=-1)


def attend(M: Tensor, b: Tensor) -> Tensor:
    """Belief-weighted average of the entity rows of M."""
    bw = core.reshape(b, b.shape + (1,))
    return core.reduce_sum(core.mul(M, bw), axis=-2)


# ---------------------------------------------------------------------------
# parameters


def _kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class FactorGraphParams:
    """All trainable factor parameters for a graph, with group sharing.

    Entity-level factor weights (v, V, L, R, L_ij, R_ji, W_ij and the batch-norm
    states) are stored once per group (or group pair); the scalar cue weights
    are per utility.
    """

    def __init__(self, graph: GraphConfig, registry: ParameterRegistry, rng: np.random.Generator,
                 dtype=np.float64, bn_momentum: float = 0.1, bn_epsilon: float = 1e-5,
                 l2_epsilon: float = 1e-12, dropout_local: float = 0.0, prefix: str = "fga"):
        self.graph = graph
        self.registry = registry
        self.dtype = np.dtype(dtype)
        self.l2_epsilon = l2_epsilon
        self.dropout_local = dropout_local
        self.prefix = prefix
        self.bn: dict[str, BatchNormState] = {}
        self.pruned: set[tuple[str, str]] = set()  # disabled (target, source) directions
        self._group_order: dict[str, int] = {}
        for u in graph.utilities:
            self._group_order.setdefault(u.group, len(self._group_order))
        self._util_order = {n: k for k, n in enumerate(graph.names)}

        def bn(name):
            st = core.make_batchnorm(registry, name, (), self.dtype, bn_momentum, bn_epsilon)
            self.bn[name] = st
            return st

        seen_groups: set[str] = set()
        for u in graph.utilities:
            if u.group in seen_groups:
                self._check_group_shape(u)
                continue
            seen_groups.add(u.group)
            g = f"{prefix}.{u.group}"
            registry.add(f"{g}.v", _kaiming(rng, (u.d,), u.d, self.dtype))
            registry.add(f"{g}.V", _kaiming(rng, (u.d, u.d), u.d, self.dtype))
            registry.add(f"{g}.L", _kaiming(rng, (u.d, u.d), u.d, self.dtype))
            registry.add(f"{g}.R", _kaiming(rng, (u.d, u.d), u.d, self.dtype))
            bn(f"{g}.self_bn")
            registry.add(f"{g}.W.{u.group}", np.full((u.n, u.n), 1.0 / u.n, dtype=self.dtype))

        for a, b in graph.pairs:
            first, second, key = self.orient(a, b)
            ua, ub = graph[first], graph[second]
            d = max(ua.d, ub.d)
            base = f"{prefix}.{key}"
            if f"{base}.L" not in registry:
                registry.add(f"{base}.L", _kaiming(rng, (d, ua.d), ua.d, self.dtype))
                registry.add(f"{base}.R", _kaiming(rng, (d, ub.d), ub.d, self.dtype))
                bn(f"{base}.bn")
            for tgt, src in ((ua, ub), (ub, ua)):
                wname = self._W_name(tgt, src)
                if wname not in registry:
                    registry.add(wname, np.full((tgt.n, src.n), 1.0 / src.n, dtype=self.dtype))

        one = np.ones((), dtype=self.dtype)
        for u in graph.utilities:
            s = f"{prefix}.{u.name}"
            registry.add(f"{s}.w_prior", one)
            registry.add(f"{s}.w_local", one)
            registry.add(f"{s}.w_from.{u.name}", one)
        for a, b in graph.pairs:
            registry.add(f"{prefix}.{a}.w_from.{b}", one)
            registry.add(f"{prefix}.{b}.w_from.{a}", one)

        self.priors = {u.name: self._prior(u) for u in graph.utilities}

    def _check_group_shape(self, u: UtilitySpec) -> None:
        ref = next(x for x in self.graph.utilities if x.group == u.group)
        if (ref.n, ref.d) != (u.n, u.d):
            raise ConfigError(f"group {u.group!r} members must share n and d")

    def _prior(self, u: UtilitySpec) -> np.ndarray:
        p = np.zeros(u.n, dtype=self.dtype)
        if u.prior == "last":
            p[-1] = 1.0
        elif u.prior != "none":
            raise ConfigError(f"unknown prior {u.prior!r} for {u.name}")
        return p

    def _W_name(self, tgt: UtilitySpec, src: UtilitySpec) -> str:
        return f"{self.prefix}.W.{tgt.group}<-{src.group}"

    def orient(self, a: str, b: str) -> tuple[str, str, str]:
        """Fix which utility of a pair takes the left map so group sharing is consistent."""
        ga, gb = self.graph[a].group, self.graph[b].group
        ka = (self._group_order[ga], self._util_order[a])
        kb = (self._group_order[gb], self._util_order[b])
        first, second = (a, b) if ka <= kb else (b, a)
        return first, second, f"{self.graph[first].group}~{self.graph[second].group}"

    # accessors -------------------------------------------------------------

    def local(self, name: str) -> tuple[Tensor, Tensor]:
        g = f"{self.prefix}.{self.graph[name].group}"
        return self.registry[f"{g}.v"], self.registry[f"{g}.V"]

    def self_factor(self, name: str):
        g = f"{self.prefix}.{self.graph[name].group}"
        return (self.registry[f"{g}.L"], self.registry[f"{g}.R"], self.bn[f"{g}.self_bn"],
                self.registry[f"{g}.W.{self.graph[name].group}"])

    def joint_factor(self, a: str, b: str):
        first, second, key = self.orient(a, b)
        base = f"{self.prefix}.{key}"
        try:
            return (first, second, self.registry[f"{base}.L"], self.registry[f"{base}.R"],
                    self.bn[f"{base}.bn"])
        except KeyError:
            raise ConfigError(f"no factor parameters for pair ({a}, {b})") from None

    def W(self, target: str, source: str) -> Tensor:
        name = self._W_name(self.graph[target], self.graph[source])
        if name not in self.registry:
            raise ConfigError(f"no message weights for {source} -> {target}")
        return self.registry[name]

    def weight(self, target: str, cue: str) -> Tensor:
        """Scalar for a cue of ``target``: "prior", "local" or a source utility name."""
        s = f"{self.prefix}.{target}"
        if cue == "prior":
            return self.registry[f"{s}.w_prior"]
        if cue == "local":
            return self.registry[f"{s}.w_local"]
        name = f"{s}.w_from.{cue}"
        if name not in self.registry:
            raise ConfigError(f"no cue weight for {cue} -> {target}")
        return self.registry[name]

    def cues(self, target: str) -> list[str]:
        out = ["prior", "local", target]
        for a, b in self.graph.pairs:
            if a == target:
                out.append(b)
            elif b == target:
                out.append(a)
        return out

    def prune(self, target: str, source: str) -> None:
        """Disable the message source -> target and zero its weight."""
        if target == source:
            raise ConfigError("local interactions are not prunable")
        self.weight(target, source).data[...] = 0
        self.pruned.add((target, source))

    def group_param_names(self, group: str) -> list[str]:
        return [n for n in self.registry.names() if n.startswith(f"{self.prefix}.{group}.")]


# ---------------------------------------------------------------------------
# the full unit


def _norm_shared(raws: list[Tensor], st: BatchNormState, train: bool) -> list[Tensor]:
    """One scalar batch norm pooled over every score matrix that shares it."""
    if len(raws) == 1:
        return [core.batchnorm_scalar(raws[0], st, train)]
    normed = core.batchnorm_scalar(core.stack(raws, axis=0), st, train)
    return [core.index(normed, k) for k in range(len(raws))]


def run_attention(utilities: list[Utility], params: FactorGraphParams, train: bool = False,
                  rng: np.random.Generator | None = None, keep_terms: bool = False) -> AttentionResult:
    graph = params.graph
    by_name = {u.name: u for u in utilities}
    if set(by_name) != set(graph.names):
        raise ConfigError(f"utilities {sorted(by_name)} do not match graph {graph.names}")
    eps = params.l2_epsilon

    # raw cosine scores, grouped by the batch-norm state they share
    pending: dict[int, tuple[BatchNormState, list]] = {}

    def queue(st, pair, raw):
        pending.setdefault(id(st), (st, []))[1].append((pair, raw))

    for u in utilities:
        L, R, st, _ = params.self_factor(u.name)
        queue(st, (u.name, u.name), _cosine(u.M, u.M, L, R, eps))
    for a, b in graph.pairs:
        if (a, b) in params.pruned and (b, a) in params.pruned:
            continue
        first, second, L, R, st = params.joint_factor(a, b)
        queue(st, (first, second), _cosine(by_name[first].M, by_name[second].M, L, R, eps))

    psi: dict[tuple[str, str], Tensor] = {}
    for st, items in pending.values():
        normed = _norm_shared([r for _, r in items], st, train)
        for (pair, _), t in zip(items, normed):
            psi[pair] = t

    incoming: dict[str, list[tuple[str, Tensor]]] = {u.name: [] for u in utilities}
    for (first, second), p in psi.items():
        if first == second:
            W = params.self_factor(first)[3]
            incoming[first].append((first, message(p, W)))
            continue
        if (first, second) not in params.pruned:
            incoming[first].append((second, message(p, params.W(first, second))))
        if (second, first) not in params.pruned:
            incoming[second].append((first, message(core.transpose(p), params.W(second, first))))

    result = AttentionResult({}, {})
    for u in utilities:
        v, V = params.local(u.name)
        loc = local_info(u.M, v, V, params.dropout_local, train, rng)
        B = u.M.shape[0]
        prior = core.constant(np.broadcast_to(params.priors[u.name], (B, u.n)), params.dtype)
        terms = [(params.weight(u.name, "prior"), prior), (params.weight(u.name, "local"), loc)]
        terms += [(params.weight(u.name, src), m) for src, m in incoming[u.name]]
        b = belief(terms)
        result.beliefs[u.name] = b
        result.attended[u.name] = attend(u.M, b)
        if keep_terms:
            raw = {"prior": prior.data, "local": loc.data}
            raw.update({src: m.data for src, m in incoming[u.name]})
            result.terms[u.name] = raw
    if keep_terms:
        result.interactions = {k: t.data for k, t in psi.items()}
    return result
