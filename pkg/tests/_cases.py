"""Gradient-check closures shared by the unit tests and the acceptance suite."""

import numpy as np

from targetapps import cntas, neusa
from targetapps import numcore as nc
from targetapps.context import UsageContextDistribution
from targetapps.dataio import Vocabulary


def dense_case(seed=0, n_in=5, n_out=3, batch=4):
    rng = np.random.default_rng(seed)
    store = nc.ParameterStore()
    store.add("W", rng.normal(size=(n_out, n_in)))
    store.add("b", rng.normal(size=n_out))
    x = rng.normal(size=(batch, n_in))
    target = rng.normal(size=(batch, n_out))

    def loss_fn():
        store.zero_grad()
        y = nc.dense_forward(store["W"], store["b"], x)
        loss = 0.5 * float(np.sum((y - target) ** 2))
        dW, db, _ = nc.dense_backward(store["W"], x, y - target)
        store.grad("W")[...] += dW
        store.grad("b")[...] += db
        return loss

    return loss_fn, store


def lstm_cell_case(seed=0, d=3, h=4, batch=2):
    rng = np.random.default_rng(seed)
    store = nc.ParameterStore()
    store.add("Wx", rng.normal(scale=0.5, size=(4 * h, d)))
    store.add("Wh", rng.normal(scale=0.5, size=(4 * h, h)))
    store.add("b", rng.normal(scale=0.5, size=4 * h))
    x = rng.normal(size=(batch, d))
    h0 = rng.normal(size=(batch, h))
    c0 = rng.normal(size=(batch, h))
    wh = rng.normal(size=(batch, h))
    wc = rng.normal(size=(batch, h))

    def loss_fn():
        store.zero_grad()
        params = (store["Wx"], store["Wh"], store["b"])
        h1, c1, cache = nc.lstm_cell(params, x, h0, c0)
        loss = float(np.sum(wh * h1) + np.sum(wc * c1))
        dWx, dWh, db, _, _, _ = nc.lstm_cell_backward(params, cache, wh, wc)
        store.grad("Wx")[...] += dWx
        store.grad("Wh")[...] += dWh
        store.grad("b")[...] += db
        return loss

    return loss_fn, store


def _random_store(store, rng, scale=0.5):
    # replace zero-initialized entries so every parameter gets a non-trivial gradient
    for name in store.names():
        store[name][...] = rng.normal(scale=scale, size=store[name].shape)


def cntas_case(seed=0, d=4, n_apps=5, loss="pointwise", use_context=True):
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(["<unk>"] + [f"t{i}" for i in range(6)], unk="<unk>")
    apps = [f"a{i}" for i in range(n_apps)]
    cfg = cntas.CNTASConfig(d=d, hidden=(6, 5), dropout=0.0, loss=loss, use_context=use_context, seed=seed)
    model = cntas.CNTAS(vocab, apps, cfg)
    _random_store(model.store, rng)
    B, L = 3, 4
    tok = rng.integers(0, len(vocab), size=(B, L))
    mask = np.ones((B, L), dtype=bool)
    mask[0, 3] = mask[2, 2:] = False
    P = rng.dirichlet(np.ones(n_apps + 1), size=B)
    pos = rng.integers(1, n_apps + 1, size=B)
    neg = rng.integers(1, n_apps + 1, size=B)

    def loss_fn():
        model.store.zero_grad()
        if loss == "pointwise":
            out, cache = model.forward(tok, mask, pos, P)
            value, dout = nc.mse(np.ones(B), out)
            model.backward(cache, dout)
            return value
        out, cache = model.forward(np.concatenate([tok, tok]), np.concatenate([mask, mask]),
                                   np.concatenate([pos, neg]), np.concatenate([P, P]))
        # shrink scores so no pair sits exactly on the hinge kink
        value, d1, d2 = nc.hinge_pair(np.ones(B), np.zeros(B), 0.3 * out[:B], 0.3 * out[B:])
        model.backward(cache, 0.3 * np.concatenate([d1, d2]))
        return value

    return loss_fn, model.store


def neusa_case(seed=0, d=4, n_apps=5, k=3, use_user=True, use_time=True, bin_usage=False):
    rng = np.random.default_rng(seed)
    apps = [f"a{i}" for i in range(n_apps)]
    users = ["u0", "u1"]
    cfg = neusa.NeuSAConfig(k=k, d=d, hidden=(6, 5), dropout=0.0, use_user=use_user, use_time=use_time,
                            bin_usage_feature=bin_usage, seed=seed)
    model = neusa.NeuSA(apps, users, cfg)
    _random_store(model.store, rng)
    B = 4
    batch = {
        "window": rng.integers(0, n_apps + 2, size=(B, k)),
        "user": rng.integers(0, len(users) + 1, size=B),
        "bin": rng.integers(0, 8, size=B),
        "label": rng.integers(0, n_apps, size=B),
    }
    if bin_usage:
        batch["bin_usage"] = rng.dirichlet(np.ones(n_apps + 2), size=B)

    def loss_fn():
        model.store.zero_grad()
        return model.loss(batch)

    return loss_fn, model.store


def empty_context(user="u"):
    return UsageContextDistribution(user, (0, 1))
