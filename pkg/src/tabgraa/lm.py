"""Tiny causal transformer with hand-written reverse-mode gradients.

Everything is float64 numpy. Parameters live in one flat vector so that
gradients, optimizer state and checkpoints are plain arrays.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_CKPT_MAGIC = b"TGRAACK1"
CKPT_VERSION = 1


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 48
    n_layers: int = 2
    n_heads: int = 3
    ff_mult: int = 2
    context_limit: int = 96
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.d_model, self.n_heads, self.ff_mult, self.context_limit) < 1:
            raise ValueError("model dimensions must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")

    def param_shapes(self):
        D, V, C, F = self.d_model, self.vocab_size, self.context_limit, self.d_model * self.ff_mult
        shapes = [("wte", (V, D)), ("wpe", (C, D))]
        for i in range(self.n_layers):
            shapes += [
                (f"h{i}.ln1_g", (D,)), (f"h{i}.ln1_b", (D,)),
                (f"h{i}.w_qkv", (D, 3 * D)), (f"h{i}.b_qkv", (3 * D,)),
                (f"h{i}.w_o", (D, D)), (f"h{i}.b_o", (D,)),
                (f"h{i}.ln2_g", (D,)), (f"h{i}.ln2_b", (D,)),
                (f"h{i}.w_fc", (D, F)), (f"h{i}.b_fc", (F,)),
                (f"h{i}.w_proj", (F, D)), (f"h{i}.b_proj", (D,)),
            ]
        shapes += [("lnf_g", (D,)), ("lnf_b", (D,)), ("w_head", (D, V)), ("b_head", (V,))]
        return shapes

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for _, s in self.param_shapes())


def unpack(config, flat):
    """Dict of named views into ``flat`` (writes go through)."""
    out, off = {}, 0
    for name, shape in config.param_shapes():
        size = int(np.prod(shape))
        out[name] = flat[off:off + size].reshape(shape)
        off += size
    return out


class PolicyModel:
    """Trainable parameters ``params`` (flat float64 vector) plus config."""

    def __init__(self, config: ModelConfig, params=None):
        self.config = config
        if params is None:
            params = np.zeros(config.n_params)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (config.n_params,):
            raise ValueError(f"expected {config.n_params} parameters, got {params.shape}")
        self.params = params

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        model = cls(config)
        for name, view in unpack(config, model.params).items():
            short = name.split(".")[-1]
            if short.endswith("_g"):
                view[...] = 1.0
            elif short.startswith("b") or short.endswith("_b"):
                view[...] = 0.0
            else:
                view[...] = rng.normal(0.0, config.init_std, size=view.shape)
        return model

    def copy(self):
        return PolicyModel(self.config, self.params.copy())


class ReferenceSnapshot:
    """Frozen copy of a policy; its log-probabilities are memoized."""

    def __init__(self, model: PolicyModel):
        self.config = model.config
        params = model.params.copy()
        params.setflags(write=False)
        self.params = params
        self._memo: dict = {}

    def log_probs(self, seqs):
        seqs = [tuple(s) for s in seqs]
        missing = list(dict.fromkeys(s for s in seqs if s not in self._memo))
        if missing:
            for s, lp in zip(missing, batch_log_probs(self, missing)):
                self._memo[s] = float(lp)
        return np.array([self._memo[s] for s in seqs])


# --------------------------------------------------------------------- layers

def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd)


def _ln_bwd(dy, g, cache):
    xh, rstd = cache
    dg = (dy * xh).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(dy, x, t):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _mm_grad(a, d):
    """Weight gradient of ``a @ W`` given upstream ``d`` (batch dims flattened)."""
    return a.reshape(-1, a.shape[-1]).T @ d.reshape(-1, d.shape[-1])


def _pad(seqs, config):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.max() > config.context_limit:
        raise SequenceTooLong(f"sequence of {lengths.max()} tokens exceeds context "
                              f"limit {config.context_limit}")
    X = np.zeros((len(seqs), int(lengths.max())), dtype=np.int64)
    for i, s in enumerate(seqs):
        X[i, :len(s)] = s
    return X, lengths


def forward(model, X, keep=True):
    """Logits ``(N, T, V)`` for token array ``X``; ``cache`` is None unless ``keep``."""
    cfg = model.config
    P = unpack(cfg, model.params)
    N, T = X.shape
    D, H = cfg.d_model, cfg.n_heads
    dh = D // H
    scale = 1.0 / math.sqrt(dh)
    causal = np.tril(np.ones((T, T), dtype=bool))

    h = P["wte"][X] + P["wpe"][:T][None]
    layers = []
    for i in range(cfg.n_layers):
        p = lambda k: P[f"h{i}.{k}"]  # noqa: E731
        a, ln1 = _ln_fwd(h, p("ln1_g"), p("ln1_b"))
        qkv = a @ p("w_qkv") + p("b_qkv")
        q, k, v = (qkv[..., j * D:(j + 1) * D].reshape(N, T, H, dh).transpose(0, 2, 1, 3)
                   for j in range(3))
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = np.where(causal, s, -np.inf)
        s = s - s.max(-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(-1, keepdims=True)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(N, T, D)
        h1 = h + o @ p("w_o") + p("b_o")
        m, ln2 = _ln_fwd(h1, p("ln2_g"), p("ln2_b"))
        u = m @ p("w_fc") + p("b_fc")
        gl, tanh_u = _gelu(u)
        h2 = h1 + gl @ p("w_proj") + p("b_proj")
        if keep:
            layers.append((a, ln1, q, k, v, att, o, m, ln2, u, gl, tanh_u))
        h = h2
    z, lnf = _ln_fwd(h, P["lnf_g"], P["lnf_b"])
    logits = z @ P["w_head"] + P["b_head"]
    cache = (X, layers, z, lnf) if keep else None
    return logits, cache


def backward(model, cache, dlogits):
    """Flat gradient of ``sum(dlogits * logits)`` w.r.t. parameters."""
    cfg = model.config
    P = unpack(cfg, model.params)
    grad = np.zeros_like(model.params)
    G = unpack(cfg, grad)
    X, layers, z, lnf = cache
    N, T = X.shape
    D, H = cfg.d_model, cfg.n_heads
    dh = D // H
    scale = 1.0 / math.sqrt(dh)

    G["w_head"][...] = _mm_grad(z, dlogits)
    G["b_head"][...] = dlogits.sum(axis=(0, 1))
    dz = dlogits @ P["w_head"].T
    dh_, G["lnf_g"][...], G["lnf_b"][...] = _ln_bwd(dz, P["lnf_g"], lnf)

    for i in reversed(range(cfg.n_layers)):
        a, ln1, q, k, v, att, o, m, ln2, u, gl, tanh_u = layers[i]
        p = lambda k_: P[f"h{i}.{k_}"]  # noqa: E731
        g = lambda k_: G[f"h{i}.{k_}"]  # noqa: E731
        # feed-forward branch
        g("w_proj")[...] = _mm_grad(gl, dh_)
        g("b_proj")[...] = dh_.sum(axis=(0, 1))
        du = _gelu_bwd(dh_ @ p("w_proj").T, u, tanh_u)
        g("w_fc")[...] = _mm_grad(m, du)
        g("b_fc")[...] = du.sum(axis=(0, 1))
        dm = du @ p("w_fc").T
        dx, g("ln2_g")[...], g("ln2_b")[...] = _ln_bwd(dm, p("ln2_g"), ln2)
        dh1 = dh_ + dx
        # attention branch
        g("w_o")[...] = _mm_grad(o, dh1)
        g("b_o")[...] = dh1.sum(axis=(0, 1))
        do = (dh1 @ p("w_o").T).reshape(N, T, H, dh).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([t.transpose(0, 2, 1, 3).reshape(N, T, D) for t in (dq, dk, dv)],
                              axis=-1)
        g("w_qkv")[...] = _mm_grad(a, dqkv)
        g("b_qkv")[...] = dqkv.sum(axis=(0, 1))
        da = dqkv @ p("w_qkv").T
        dx, g("ln1_g")[...], g("ln1_b")[...] = _ln_bwd(da, p("ln1_g"), ln1)
        dh_ = dh1 + dx

    np.add.at(G["wte"], X, dh_)
    G["wpe"][:T] += dh_.sum(axis=0)
    return grad


def _log_softmax(logits):
    mx = logits.max(-1, keepdims=True)
    sh = logits - mx
    return sh - np.log(np.exp(sh).sum(-1, keepdims=True))


class LogProbPass:
    """One forward pass over a batch of sequences, reusable for gradients.

    ``logps[i]`` is the sequence log-probability (all tokens after BOS,
    EOS included). ``grad(w)`` returns the gradient of ``sum_i w[i] logps[i]``.
    """

    def __init__(self, model, seqs):
        self.model = model
        self.seqs = [tuple(s) for s in seqs]
        X, lengths = _pad(self.seqs, model.config)
        self.X, self.lengths = X, lengths
        logits, self.cache = forward(model, X, keep=True)
        self.logits = logits
        self.logsm = _log_softmax(logits)
        T = X.shape[1]
        # mask[i, t] marks positions predicting a real next token
        self.mask = np.arange(T)[None, :] < (lengths[:, None] - 1)
        tgt = np.zeros_like(X)
        tgt[:, :-1] = X[:, 1:]
        self.targets = tgt
        tok_lp = np.take_along_axis(self.logsm, tgt[..., None], axis=-1)[..., 0]
        self.token_logps = np.where(self.mask, tok_lp, 0.0)
        self.logps = self.token_logps.sum(axis=1)

    def dlogits_for(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        probs = np.exp(self.logsm)
        d = -probs
        np.put_along_axis(d, self.targets[..., None],
                          np.take_along_axis(d, self.targets[..., None], axis=-1) + 1.0, axis=-1)
        return d * (self.mask * w[:, None])[..., None]

    def grad(self, weights):
        return backward(self.model, self.cache, self.dlogits_for(weights))

    def grad_from_dlogits(self, dlogits):
        return backward(self.model, self.cache, dlogits)


def batch_log_probs(model, seqs, chunk=256):
    """Sequence log-probabilities without keeping activations."""
    seqs = [tuple(s) for s in seqs]
    out = np.empty(len(seqs))
    for start in range(0, len(seqs), chunk):
        part = seqs[start:start + chunk]
        X, lengths = _pad(part, model.config)
        logits, _ = forward(model, X, keep=False)
        lsm = _log_softmax(logits)
        T = X.shape[1]
        mask = np.arange(T)[None, :] < (lengths[:, None] - 1)
        tgt = np.zeros_like(X)
        tgt[:, :-1] = X[:, 1:]
        tok = np.take_along_axis(lsm, tgt[..., None], axis=-1)[..., 0]
        out[start:start + len(part)] = np.where(mask, tok, 0.0).sum(axis=1)
    return out


def log_prob(model, seq):
    """Sum of next-token log-probabilities after BOS (nats)."""
    return float(batch_log_probs(model, [seq])[0])


def log_prob_grad(model, seq):
    lp = LogProbPass(model, [seq])
    return float(lp.logps[0]), lp.grad([1.0])


def conditional_log_probs(model, seq):
    """Per-position log-softmax rows ``(len(seq) - 1, V)`` for a single sequence."""
    X, _ = _pad([tuple(seq)], model.config)
    logits, _ = forward(model, X, keep=False)
    return _log_softmax(logits)[0, :len(seq) - 1]


# ------------------------------------------------------------------- sampling

def sample_batch(model, n, rng, max_len=None, temperature=1.0, bos=0, eos=1):
    """Ancestral sampling of ``n`` sequences starting at ``bos``.

    Sampling stops per sequence at ``eos`` or ``max_len`` tokens; truncated
    sequences are returned as-is. Each sequence consumes its own row of a
    pre-drawn uniform matrix, so sequence ``i`` depends only on the model and
    on ``rng``'s state (not on when other sequences finish); two similar
    models sampled under the same seed therefore give coupled draws.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    cfg = model.config
    max_len = cfg.context_limit if max_len is None else min(max_len, cfg.context_limit)
    X = np.full((n, max_len), eos, dtype=np.int64)
    X[:, 0] = bos
    length = np.ones(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    U = rng.random((n, max_len))
    for t in range(1, max_len):
        active = np.nonzero(~done)[0]
        if active.size == 0:
            break
        logits, _ = forward(model, X[active, :t], keep=False)
        last = logits[:, -1, :] / temperature
        last = last - last.max(-1, keepdims=True)
        p = np.exp(last)
        p /= p.sum(-1, keepdims=True)
        tok = (p.cumsum(-1) < U[active, t, None]).sum(-1)
        tok = np.minimum(tok, cfg.vocab_size - 1)
        X[active, t] = tok
        length[active] = t + 1
        done[active[tok == eos]] = True
    return [tuple(int(v) for v in X[i, :length[i]]) for i in range(n)]


def sample(model, seed, max_len=None, temperature=1.0, bos=0, eos=1):
    return sample_batch(model, 1, np.random.default_rng(seed), max_len, temperature, bos, eos)[0]


# ------------------------------------------------------------------ optimizer

class AdamW:
    """Decoupled weight decay Adam (decay applied before the moment update)."""

    def __init__(self, n_params, lr=1e-3, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, model, grad, lr=None):
        grad = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient; update skipped")
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        model.params *= (1 - lr * self.weight_decay)
        model.params -= lr * mhat / (np.sqrt(vhat) + self.eps)
        return model

    def state_dict(self):
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}


# ----------------------------------------------------------------- checkpoint

def save_checkpoint(path, model, meta=None):
    """Deterministic binary container: magic, header JSON, raw float64 params."""
    header = json.dumps({"version": CKPT_VERSION, "config": asdict(model.config),
                         "meta": meta or {}}, sort_keys=True).encode("utf-8")
    body = np.ascontiguousarray(model.params, dtype="<f8").tobytes()
    Path(path).write_bytes(_CKPT_MAGIC + struct.pack("<Q", len(header)) + header + body)


def load_checkpoint(path):
    """Return ``(model, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header["version"] != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    config = ModelConfig(**header["config"])
    params = np.frombuffer(raw[16 + hlen:], dtype="<f8").astype(np.float64)
    return PolicyModel(config, params), header["meta"]
