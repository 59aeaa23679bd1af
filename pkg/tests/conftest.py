import numpy as np
import pytest

from pcr_lab import model as M
from pcr_lab.grpo import RolloutGroup
from pcr_lab.tensor import ParamSet

# Small model used by most unit tests: every tag present, cheap forward.
SMALL = M.ModelConfig(vocab_size=7, d_model=6, d_ff=5, max_seq_len=12)
# Model used by the gradient-correctness acceptance check: >= 200 coordinates per tag.
FD_CFG = M.ModelConfig(vocab_size=16, d_model=64, d_ff=32, max_seq_len=16)


def random_params(cfg: M.ModelConfig, seed: int, scale: float = 0.3) -> ParamSet:
    """Initialised params with an extra random perturbation on every entry (gains included)."""
    rng = np.random.default_rng(seed)
    p = M.init_params(cfg, rng, std=scale)
    return p.map(lambda v: v + scale * rng.standard_normal(v.shape))


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_fd(loss_fn, params: ParamSet, coords, rel_step=1e-5):
    """Central differences of loss_fn at the given flat coordinates; step 1e-5 * (1 + |theta_i|)."""
    flat = params.flat()
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        h = rel_step * (1.0 + abs(flat[i]))
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        out[j] = (loss_fn(params.with_flat(up)) - loss_fn(params.with_flat(dn))) / (2 * h)
    return out


def coords_by_tag(params: ParamSet, per_tag: int, rng: np.random.Generator) -> dict:
    """Random flat coordinates per tag (all of them when a tag has fewer than per_tag)."""
    spans: dict = {}
    off = 0
    for e in params.entries:
        spans.setdefault(e.tag, []).extend(range(off, off + e.size))
        off += e.size
    out = {}
    for tag, idx in spans.items():
        idx = np.asarray(idx)
        out[tag] = idx if idx.size <= per_tag else rng.choice(idx, size=per_tag, replace=False)
    return out


def make_groups(params, cfg, n_groups=2, n=3, q_len=3, max_new=3, seed=0, lp_noise=0.0):
    """Rollout groups sampled from ``params`` with random rewards; optionally perturbed old log-probs."""
    rng = np.random.default_rng(seed)
    groups = []
    for _ in range(n_groups):
        query = rng.integers(1, cfg.vocab_size, size=q_len)
        responses, lps = [], []
        for _ in range(n):
            toks, lp = M.sample_response(params, query, max_new, rng, cfg)
            if not toks:
                toks, lp = [1], [0.0]
            responses.append(toks)
            lps.append(np.asarray(lp) + lp_noise * rng.standard_normal(len(lp)))
        rewards = rng.random(n)
        groups.append(RolloutGroup(query, responses, rewards, lps))
    return groups


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_params():
    return random_params(SMALL, 0)
