"""Single-block, single-head causal transformer policy with manual backprop.

Layout (pre-norm):

    x0 = tok_emb[t] + pos_emb[:T]
    x1 = x0 + attn(ln1(x0))
    x2 = x1 + mlp(ln2(x1))
    logits = x2 @ head

The parameter tags (Mlp / Attention / Norm / Embedding / Head) are what the
hybrid update rule keys on.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Entry, GradSet, LayerTag, ParamSet, StructureError

EOS = 0
MASK_VALUE = -1e30
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 32
    d_ff: int = 64
    max_seq_len: int = 32
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.d_model < 2:
            raise ValueError("d_model must be >= 2")
        if self.d_ff < 1:
            raise ValueError("d_ff must be >= 1")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if not self.ln_eps > 0:
            raise ValueError("ln_eps must be > 0")


def param_layout(cfg: ModelConfig) -> list[tuple[str, LayerTag, tuple[int, ...]]]:
    V, D, F, L = cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len
    return [
        ("tok_emb", LayerTag.EMBEDDING, (V, D)),
        ("pos_emb", LayerTag.EMBEDDING, (L, D)),
        ("ln1.gain", LayerTag.NORM, (D,)),
        ("ln1.bias", LayerTag.NORM, (D,)),
        ("attn.wq", LayerTag.ATTENTION, (D, D)),
        ("attn.wk", LayerTag.ATTENTION, (D, D)),
        ("attn.wv", LayerTag.ATTENTION, (D, D)),
        ("attn.wo", LayerTag.ATTENTION, (D, D)),
        ("ln2.gain", LayerTag.NORM, (D,)),
        ("ln2.bias", LayerTag.NORM, (D,)),
        ("mlp.w1", LayerTag.MLP, (D, F)),
        ("mlp.b1", LayerTag.MLP, (F,)),
        ("mlp.w2", LayerTag.MLP, (F, D)),
        ("mlp.b2", LayerTag.MLP, (D,)),
        ("head", LayerTag.HEAD, (D, V)),
    ]


def init_params(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> ParamSet:
    """N(0, std^2) matrices, zero biases, unit norm gains."""
    entries = []
    for name, tag, shape in param_layout(cfg):
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, std, size=shape)
        entries.append(Entry(name, tag, value))
    return ParamSet(entries)


def check_params(params: ParamSet, cfg: ModelConfig) -> None:
    expected = tuple((n, t, s) for n, t, s in param_layout(cfg))
    if params.signature() != expected:
        raise StructureError("parameters do not match the model configuration")


def _rowwise_mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` where each output row depends only on its own input row.

    BLAS picks kernels by shape, so a plain matmul on a prefix can differ in
    the last bits from the same rows inside a longer sequence; einsum's own
    loops do not depend on the number of rows.
    """
    return np.einsum("td,de->te", x, w)


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _ln(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd


def _ln_backward(dy, xhat, rstd, gain):
    D = xhat.shape[-1]
    dxhat = dy * gain
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dx = (rstd / D) * (
        D * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


@dataclass
class ForwardCache:
    tokens: np.ndarray
    x0: np.ndarray
    a: np.ndarray
    ln1_xhat: np.ndarray
    ln1_rstd: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    att: np.ndarray
    o: np.ndarray
    x1: np.ndarray
    m: np.ndarray
    ln2_xhat: np.ndarray
    ln2_rstd: np.ndarray
    h: np.ndarray
    h_tanh: np.ndarray
    u: np.ndarray
    x2: np.ndarray
    logits: np.ndarray


def _check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if t.size < 1:
        raise ValueError("need at least one token")
    if t.size > cfg.max_seq_len:
        raise ValueError(f"sequence length {t.size} exceeds max_seq_len {cfg.max_seq_len}")
    if (t < 0).any() or (t >= cfg.vocab_size).any():
        raise ValueError("token id out of range")
    return t


def forward(params: ParamSet, tokens: Sequence[int], cfg: ModelConfig) -> tuple[np.ndarray, ForwardCache]:
    """Per-position next-token log-probabilities, shape (T, vocab), plus the cache."""
    t = _check_tokens(tokens, cfg)
    T, D = t.size, cfg.d_model
    x0 = params["tok_emb"][t] + params["pos_emb"][:T]
    a, xh1, rs1 = _ln(x0, params["ln1.gain"], params["ln1.bias"], cfg.ln_eps)
    q = _rowwise_mm(a, params["attn.wq"])
    k = _rowwise_mm(a, params["attn.wk"])
    v = _rowwise_mm(a, params["attn.wv"])
    s = _rowwise_mm(q, k.T) / math.sqrt(D)
    s = np.where(np.tri(T, dtype=bool), s, MASK_VALUE)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    # sequential row sums: trailing masked zeros must not regroup the sum
    att = e / np.cumsum(e, axis=-1)[:, -1:]
    o = _rowwise_mm(att, v)
    x1 = x0 + _rowwise_mm(o, params["attn.wo"])
    m, xh2, rs2 = _ln(x1, params["ln2.gain"], params["ln2.bias"], cfg.ln_eps)
    h = _rowwise_mm(m, params["mlp.w1"]) + params["mlp.b1"]
    u, th = _gelu(h)
    x2 = x1 + _rowwise_mm(u, params["mlp.w2"]) + params["mlp.b2"]
    logits = _rowwise_mm(x2, params["head"])
    cache = ForwardCache(t, x0, a, xh1, rs1, q, k, v, att, o, x1, m, xh2, rs2, h, th, u, x2, logits)
    return log_softmax(logits), cache


def backward(params: ParamSet, cache: ForwardCache, dlogits: np.ndarray, cfg: ModelConfig) -> GradSet:
    """Gradient of ``sum(dlogits * logits)`` with respect to every parameter."""
    dl = np.asarray(dlogits, dtype=np.float64)
    T = cache.tokens.size
    D = cfg.d_model
    if dl.shape != (T, cfg.vocab_size):
        raise StructureError(f"dlogits shape {dl.shape} != {(T, cfg.vocab_size)}")
    g: dict[str, np.ndarray] = {}

    g["head"] = cache.x2.T @ dl
    dx2 = dl @ params["head"].T

    g["mlp.b2"] = dx2.sum(axis=0)
    g["mlp.w2"] = cache.u.T @ dx2
    du = dx2 @ params["mlp.w2"].T
    dh = du * _gelu_grad(cache.h, cache.h_tanh)
    g["mlp.b1"] = dh.sum(axis=0)
    g["mlp.w1"] = cache.m.T @ dh
    dm = dh @ params["mlp.w1"].T
    dx1_ln, g["ln2.gain"], g["ln2.bias"] = _ln_backward(dm, cache.ln2_xhat, cache.ln2_rstd, params["ln2.gain"])
    dx1 = dx2 + dx1_ln

    g["attn.wo"] = cache.o.T @ dx1
    do = dx1 @ params["attn.wo"].T
    datt = do @ cache.v.T
    dv = cache.att.T @ do
    ds = cache.att * (datt - (datt * cache.att).sum(axis=-1, keepdims=True))
    ds = ds / math.sqrt(D)
    dq = ds @ cache.k
    dk = ds.T @ cache.q
    g["attn.wq"] = cache.a.T @ dq
    g["attn.wk"] = cache.a.T @ dk
    g["attn.wv"] = cache.a.T @ dv
    da = dq @ params["attn.wq"].T + dk @ params["attn.wk"].T + dv @ params["attn.wv"].T
    dx0_ln, g["ln1.gain"], g["ln1.bias"] = _ln_backward(da, cache.ln1_xhat, cache.ln1_rstd, params["ln1.gain"])
    dx0 = dx1 + dx0_ln

    dtok = np.zeros_like(params["tok_emb"])
    np.add.at(dtok, cache.tokens, dx0)
    g["tok_emb"] = dtok
    dpos = np.zeros_like(params["pos_emb"])
    dpos[:T] = dx0
    g["pos_emb"] = dpos

    return GradSet(Entry(e.name, e.tag, g[e.name]) for e in params.entries)


def sample_response(
    params: ParamSet,
    query: Sequence[int],
    max_new: int,
    rng: np.random.Generator,
    cfg: ModelConfig,
) -> tuple[list[int], list[float]]:
    """Autoregressive sampling by inverse CDF; stops after ``max_new`` tokens or at EOS.

    Returns the response tokens (EOS included when drawn) and their log-probs.
    """
    q = list(int(x) for x in query)
    if len(q) < 1 or len(q) + max_new > cfg.max_seq_len:
        raise ValueError("query does not leave room for max_new tokens")
    seq = list(q)
    out, lps = [], []
    for _ in range(max_new):
        logp, _ = forward(params, seq, cfg)
        row = logp[-1]
        cdf = np.cumsum(np.exp(row))
        tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        tok = min(tok, cfg.vocab_size - 1)
        out.append(tok)
        lps.append(float(row[tok]))
        seq.append(tok)
        if tok == EOS:
            break
    return out, lps


def greedy_response(params: ParamSet, query: Sequence[int], max_new: int, cfg: ModelConfig) -> list[int]:
    seq = list(int(x) for x in query)
    out = []
    for _ in range(max_new):
        logp, _ = forward(params, seq, cfg)
        tok = int(np.argmax(logp[-1]))
        out.append(tok)
        seq.append(tok)
        if tok == EOS:
            break
    return out


def nll(params: ParamSet, tokens: Sequence[int], cfg: ModelConfig) -> float:
    """Mean negative log-likelihood of tokens[1:] given their prefixes."""
    t = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if t.size < 2:
        raise ValueError("nll needs at least two tokens")
    logp, _ = forward(params, t, cfg)
    picked = logp[np.arange(t.size - 1), t[1:]]
    return float(-picked.mean())


# -- checkpoints ---------------------------------------------------------------

_CKPT_MAGIC = "pcr-lab-checkpoint v1"


def save_checkpoint(path: str | Path, params: ParamSet, cfg: ModelConfig) -> None:
    """Text dump: config header, then one line per tensor with hex floats (exact round-trip)."""
    check_params(params, cfg)
    lines = [f"{_CKPT_MAGIC} {json.dumps(asdict(cfg), sort_keys=True)}"]
    for e in params.entries:
        shape = "x".join(str(s) for s in e.shape)
        vals = " ".join(float(x).hex() for x in e.value.reshape(-1))
        lines.append(f"{e.name} {e.tag.value} {shape} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ParamSet, ModelConfig]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    cfg = ModelConfig(**json.loads(lines[0][len(_CKPT_MAGIC):]))
    entries = []
    for line in lines[1:]:
        if not line.strip():
            continue
        name, tag, shape, *vals = line.split(" ")
        dims = tuple(int(s) for s in shape.split("x"))
        arr = np.array([float.fromhex(v) for v in vals], dtype=np.float64).reshape(dims)
        entries.append(Entry(name, LayerTag(tag), arr))
    params = ParamSet(entries)
    check_params(params, cfg)
    return params, cfg
