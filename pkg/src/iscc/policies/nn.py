"""Small feed-forward networks with explicit backpropagation and Adam.

Hidden layers use tanh, the output layer is linear. Parameters are float64.
"""
from __future__ import annotations

import numpy as np


class Mlp:
    def __init__(self, dims, rng: np.random.Generator, out_scale: float = 0.01):
        self.dims = [int(d) for d in dims]
        self.W, self.b = [], []
        for k, (i, o) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            last = k == len(self.dims) - 2
            gain = out_scale if last else np.sqrt(2.0)
            a = rng.standard_normal((i, o))
            q, _ = np.linalg.qr(a if i >= o else a.T)
            w = q if i >= o else q.T
            self.W.append(gain * w[:i, :o])
            self.b.append(np.zeros(o))

    @property
    def params(self) -> list:
        out = []
        for w, b in zip(self.W, self.b):
            out += [w, b]
        return out

    def forward(self, x: np.ndarray):
        h = np.asarray(x, dtype=float)
        cache = [h]
        L = len(self.W)
        for k in range(L):
            z = h @ self.W[k] + self.b[k]
            h = z if k == L - 1 else np.tanh(z)
            cache.append(h)
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dout: np.ndarray) -> list:
        """Gradients (same order as ``params``) of sum(dout * output)."""
        L = len(self.W)
        grads = [None] * (2 * L)
        g = dout
        for k in range(L - 1, -1, -1):
            if k < L - 1:
                g = g * (1.0 - cache[k + 1] ** 2)
            grads[2 * k] = cache[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k:
                g = g @ self.W[k].T
        return grads

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, v: np.ndarray) -> None:
        v = np.asarray(v, dtype=float)
        if v.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {v.size}")
        k = 0
        for p in self.params:
            p[...] = v[k:k + p.size].reshape(p.shape)
            k += p.size

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        new = Mlp.__new__(Mlp)
        new.dims = list(self.dims)
        new.W = [w.copy() for w in self.W]
        new.b = [b.copy() for b in self.b]
        return new


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grads(grads, max_norm: float):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        grads = [g * s for g in grads]
    return grads, norm


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with -inf on masked entries."""
    if not np.all(mask.any(axis=-1)):
        raise AssertionError("all-masked categorical head")
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    return np.where(mask, z - zmax - np.log(e.sum(axis=-1, keepdims=True)), -np.inf)


class HeadLayout:
    """Slices of the concatenated logit vector for each categorical head."""

    def __init__(self, names, sizes):
        self.names = tuple(names)
        self.sizes = tuple(int(s) for s in sizes)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.total = int(self.offsets[-1])

    def sl(self, k: int) -> slice:
        return slice(self.offsets[k], self.offsets[k + 1])


def heads_logp_entropy(logits: np.ndarray, masks: np.ndarray, actions: np.ndarray,
                       persist: np.ndarray, layout: HeadLayout):
    """Joint log-prob and entropy over the non-frozen heads.

    ``logits`` and ``masks`` are (B, total); ``actions`` and ``persist`` are
    (B, H). Returns (logp, entropy, per-head probabilities list)."""
    B = logits.shape[0]
    logp = np.zeros(B)
    ent = np.zeros(B)
    probs = []
    rows = np.arange(B)
    for k in range(len(layout.sizes)):
        s = layout.sl(k)
        lp = masked_log_softmax(logits[:, s], masks[:, s])
        p = np.exp(lp)
        probs.append(p)
        w = persist[:, k]
        logp += w * np.where(w > 0, lp[rows, actions[:, k]], 0.0)
        plogp = p * np.where(p > 0, lp, 0.0)
        ent += w * -plogp.sum(axis=1)
    return logp, ent, probs


def heads_logit_grad(probs, actions, persist, layout: HeadLayout, d_logp, d_ent):
    """Gradient w.r.t. logits of sum(d_logp * logp + d_ent * entropy)."""
    B = actions.shape[0]
    g = np.zeros((B, layout.total))
    rows = np.arange(B)
    for k in range(len(layout.sizes)):
        s = layout.sl(k)
        p = probs[k]
        w = persist[:, k]
        onehot = np.zeros_like(p)
        onehot[rows, actions[:, k]] = 1.0
        gk = (w * d_logp)[:, None] * (onehot - p)
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
        h = -(p * lp).sum(axis=1, keepdims=True)
        gk += (w * d_ent)[:, None] * (-p * (lp + h))
        g[:, s] = gk
    return g
