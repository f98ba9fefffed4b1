"""Random factor graphs and the invariant checks run on them."""

import numpy as np

import oracles
from fgadialog import core, fga
from fgadialog.config import GraphConfig, UtilitySpec
from fgadialog.core import ParameterRegistry


def random_params(specs, pairs, rng, eval_stats=True):
    """FactorGraphParams with every trainable value and batch-norm statistic
    drawn at random."""
    reg = ParameterRegistry()
    params = fga.FactorGraphParams(GraphConfig(specs, pairs), reg, rng)
    for p in reg:
        p.data[...] = rng.standard_normal(p.shape) * (1.0 if p.data.ndim < 2 else 0.7)
    for st in params.bn.values():
        st.running_mean = 0.3 * rng.standard_normal(())
        st.running_var = np.exp(0.5 * rng.standard_normal(()))
        st.initialized = eval_stats
    return params


def random_utilities(specs, rng, batch=2):
    return [fga.Utility(s.name, s.kind, s.group, core.constant(rng.standard_normal((batch, s.n, s.d))))
            for s in specs]


def two_utility_specs(rng):
    n1, n2 = (int(x) for x in rng.integers(2, 6, size=2))
    d1, d2 = (int(x) for x in rng.integers(2, 6, size=2))
    return [UtilitySpec("x", "image", n1, d1, "x", "last"),
            UtilitySpec("y", "question", n2, d2, "y", "none")]


def oracle_params(params):
    """(pairs, P) arguments for ``oracles.attention`` read out of ``params``."""
    P = {}
    for name in params.graph.names:
        v, V = params.local(name)
        L, R, st, W = params.self_factor(name)
        P[("v", name)], P[("V", name)] = v.data, V.data
        P[("L", name)], P[("R", name)], P[("Wself", name)] = L.data, R.data, W.data
        P[("bn_self", name)] = (float(st.running_mean), float(st.running_var),
                                float(st.gamma.data), float(st.beta.data))
        P[("w_prior", name)] = params.weight(name, "prior").data
        P[("w_local", name)] = params.weight(name, "local").data
        P[("w", name, name)] = params.weight(name, name).data
    pairs = []
    for a, b in params.graph.pairs:
        first, second, L, R, st = params.joint_factor(a, b)
        pairs.append((first, second))
        P[("L", first, second)], P[("R", first, second)] = L.data, R.data
        P[("bn", first, second)] = (float(st.running_mean), float(st.running_var),
                                    float(st.gamma.data), float(st.beta.data))
        for t, s in ((a, b), (b, a)):
            P[("W", t, s)] = params.W(t, s).data
            P[("w", t, s)] = params.weight(t, s).data
    return pairs, P


def oracle_inputs(params, utils, example):
    pairs, P = oracle_params(params)
    by_name = {u.name: u for u in utils}
    ulist = [(name, by_name[name].M.data[example], params.priors[name])
             for name in params.graph.names]
    return ulist, pairs, P


def oracle_max_error(params, utils):
    res = fga.run_attention(utils, params, train=False)
    worst = 0.0
    for k in range(utils[0].M.shape[0]):
        ulist, pairs, P = oracle_inputs(params, utils, k)
        beliefs, attended = oracles.attention(ulist, pairs, P, params.l2_epsilon)
        for name in beliefs:
            worst = max(worst, np.max(np.abs(res.beliefs[name].data[k] - beliefs[name])),
                        np.max(np.abs(res.attended[name].data[k] - attended[name])))
    return worst


# invariants -----------------------------------------------------------------

def belief_normalization(rng, train=False):
    specs = two_utility_specs(rng)
    specs.append(UtilitySpec("z", "caption", int(rng.integers(1, 5)), specs[0].d, "x2", "none"))
    params = random_params(specs, [("x", "y"), ("y", "z"), ("x", "z")], rng)
    utils = random_utilities(specs, rng, batch=int(rng.integers(1, 4)) + (1 if train else 0))
    res = fga.run_attention(utils, params, train=train)
    dev = 0.0
    for b in res.beliefs.values():
        assert np.all(b.data > 0) and np.all(b.data < 1) or b.shape[-1] == 1
        dev = max(dev, float(np.max(np.abs(b.data.sum(axis=-1) - 1.0))))
    return dev


def shift_invariance(rng):
    n = int(rng.integers(1, 8))
    terms = [(core.constant(rng.standard_normal(())), core.constant(rng.standard_normal((2, n))))
             for _ in range(4)]
    base = fga.belief(terms).data
    k = int(rng.integers(len(terms)))
    c = 10 * rng.standard_normal()
    w, t = terms[k]
    shifted = list(terms)
    shifted[k] = (w, core.constant(t.data + c))
    return float(np.max(np.abs(fga.belief(shifted).data - base)))


def message_permutation(rng):
    """Permuting U_j's entities with W_ij's columns leaves mu_{j->i} unchanged."""
    specs = two_utility_specs(rng)
    params = random_params(specs, [("x", "y")], rng)
    ux, uy = random_utilities(specs, rng)
    _, _, L, R, st = params.joint_factor("x", "y")
    W = params.W("x", "y")
    perm = rng.permutation(specs[1].n)
    mu = fga.message(fga.joint_interaction(ux.M, uy.M, L, R, st), W).data
    Mp = core.constant(uy.M.data[:, perm])
    Wp = core.constant(W.data[:, perm])
    mu_p = fga.message(fga.joint_interaction(ux.M, Mp, L, R, st), Wp).data
    return float(np.max(np.abs(mu - mu_p)))


def belief_permutation(rng):
    """Permuting U_i's entities together with every weight indexed by them and
    with p_i permutes b_i and leaves a_i and the partner's outputs unchanged."""
    specs = two_utility_specs(rng)
    params = random_params(specs, [("x", "y")], rng)
    params.priors["x"] = rng.standard_normal(specs[0].n)
    utils = random_utilities(specs, rng)
    base = fga.run_attention(utils, params)
    perm = rng.permutation(specs[0].n)
    Wself = params.self_factor("x")[3]
    Wself.data[...] = Wself.data[np.ix_(perm, perm)]
    params.W("x", "y").data[...] = params.W("x", "y").data[perm]
    params.W("y", "x").data[...] = params.W("y", "x").data[:, perm]
    params.priors["x"] = params.priors["x"][perm]
    utils[0] = fga.Utility("x", "image", "x", core.constant(utils[0].M.data[:, perm]))
    out = fga.run_attention(utils, params)
    errs = [np.abs(out.beliefs["x"].data - base.beliefs["x"].data[:, perm]),
            np.abs(out.attended["x"].data - base.attended["x"].data),
            np.abs(out.beliefs["y"].data - base.beliefs["y"].data),
            np.abs(out.attended["y"].data - base.attended["y"].data)]
    return float(max(np.max(e) for e in errs))


def joint_scale_invariance(rng):
    specs = two_utility_specs(rng)
    params = random_params(specs, [("x", "y")], rng)
    ux, uy = random_utilities(specs, rng)
    _, _, L, R, st = params.joint_factor("x", "y")
    c = float(np.exp(rng.uniform(-3, 3)))
    a = fga.joint_interaction(ux.M, uy.M, L, R, st).data
    b = fga.joint_interaction(ux.M, core.constant(c * uy.M.data), L, R, st).data
    d = fga.joint_interaction(core.constant(c * ux.M.data), uy.M, L, R, st).data
    return float(max(np.max(np.abs(a - b)), np.max(np.abs(a - d))))


# whole model ----------------------------------------------------------------

def jitter_model(model, rng, scale=0.3):
    """Move every parameter off its symmetric initialization and give every
    batch norm random running statistics."""
    for p in model.registry:
        p.data += scale * rng.standard_normal(p.shape)
    for st in model.batchnorms.values():
        shape = np.shape(st.running_mean)
        st.running_mean = 0.3 * rng.standard_normal(shape)
        st.running_var = np.exp(0.3 * rng.standard_normal(shape))
        st.initialized = True
    return model


def forward_oracle(model, batch):
    """Eval-mode candidate probabilities recomputed record by record from the
    raw parameter arrays; (B, n_A)."""
    cfg = model.cfg
    val = {p.name: p.data for p in model.registry}
    E = val["embed.E"]

    def text(ids, name):
        return oracles.lstm_states(E[np.asarray(ids)], val[f"lstm.{name}.Wx"],
                                   val[f"lstm.{name}.Wh"], val[f"lstm.{name}.b"])

    def bn(x, name):
        st = model.batchnorms[name]
        return np.array([oracles.bn_eval(x[k], st.running_mean[k], st.running_var[k],
                                         st.gamma.data[k], st.beta.data[k], st.epsilon)
                         for k in range(len(x))])

    pairs, P = oracle_params(model.fga)
    out = []
    for k in range(batch.size):
        M = {
            "image": np.array([np.maximum(oracles.matvec(val["image.W"], r) + val["image.b"], 0)
                               for r in batch.image[k]]),
            "question": text(batch.query[k], "question"),
            "caption": text(batch.caption[k], "caption"),
            "answers": np.array([text(c, "answers")[-1] for c in batch.candidates[k]]),
        }
        for t in range(cfg.history_rounds):
            m = batch.hist_mask[k, t]
            M[f"hq{t + 1}"] = m * text(batch.hist_q[k, t], "hq")
            M[f"ha{t + 1}"] = m * text(batch.hist_a[k, t], "ha")
        ulist = [(n, M[n], model.fga.priors[n]) for n in model.fga.graph.names]
        _, a = oracles.attention(ulist, pairs, P, cfg.l2_epsilon, cfg.bn_epsilon)
        parts = [a["image"], a["question"], a["caption"], a["answers"]]
        for t in range(1, cfg.history_rounds + 1):
            x = np.concatenate([a[f"hq{t}"], a[f"ha{t}"]])
            parts.append(oracles.matvec(val["fusion.history.W"], x) + val["fusion.history.b"])
        rep = np.concatenate(parts)
        scores = []
        for u in M["answers"]:
            x = np.concatenate([rep, u])
            h = np.maximum(bn(oracles.matvec(val["fusion.mlp1.W"], x) + val["fusion.mlp1.b"],
                              "fusion.bn1"), 0)
            h = np.maximum(bn(oracles.matvec(val["fusion.mlp2.W"], h) + val["fusion.mlp2.b"],
                              "fusion.bn2"), 0)
            scores.append(float(oracles.matvec(val["fusion.out.W"], h)[0] + val["fusion.out.b"][0]))
        out.append(oracles.softmax(scores))
    return np.array(out)
