"""Gibbs sampling of site-selection masks.

Two samplers share one noise/ordering protocol:

* an exact chain over {+1,-1}^n used for convergence checks and for
  drawing hard masks at evaluation time, and
* a relaxed, differentiable unrolled chain (tanh sites, sigmoid mask
  squashing) whose graph version carries gradients back to theta.

Both consume pre-drawn uniforms so the relaxed chain is a deterministic
function of (theta, noise) and the two variants can be compared on the
same draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .ising import IsingModel


class GibbsError(Exception):
    pass


@dataclass
class GibbsConfig:
    """Unrolled-chain shape: layer count and the two sharpness constants."""

    n_layers: int = 5
    state_sharpness: float = 3.0   # tanh scale inside each relaxed update
    mask_sharpness: float = 10.0   # sigmoid scale producing the final mask

    def __post_init__(self):
        if self.n_layers < 1:
            raise GibbsError("need at least one layer")
        if self.state_sharpness <= 0 or self.mask_sharpness <= 0:
            raise GibbsError("sharpness constants must be positive")


def _sigmoid(y):
    out = np.empty_like(y, dtype=np.float64)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    ez = np.exp(y[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fresh_noise(rng, n_sites, n_layers, batch=None):
    """Uniforms for init plus one sweep per layer.

    Shape (n_layers + 1, n_sites) or (n_layers + 1, batch, n_sites); slot 0
    seeds the initial state, slot i the i-th sweep.
    """
    shape = (n_layers + 1, n_sites) if batch is None else (n_layers + 1, batch, n_sites)
    return rng.random(shape)


def fresh_ordering(rng, n_sites):
    """Random site visiting order for one chain (fixed across its sweeps)."""
    return rng.permutation(n_sites)


def fresh_orderings(rng, n_sites, n_layers):
    """Independent per-layer visiting orders, shape (n_layers, n_sites).

    Fixed for the duration of one training run; reshuffled between runs.
    """
    return np.stack([rng.permutation(n_sites) for _ in range(n_layers)])


def _layer_orders(order, n_layers, n_sites):
    """Normalize an ordering argument to one permutation per layer.

    Accepts a single (n,) permutation shared by all layers or an
    (n_layers, n) stack of per-layer permutations.
    """
    order = np.asarray(order)
    if order.ndim == 1:
        order = np.tile(order, (n_layers, 1))
    if order.shape != (n_layers, n_sites):
        raise GibbsError(
            f"orderings have shape {order.shape}, expected ({n_layers}, {n_sites})")
    for row in order:
        if not np.array_equal(np.sort(row), np.arange(n_sites)):
            raise GibbsError("each ordering must be a permutation of 0..n-1")
    return order


def init_state(noise0):
    """x_j = +1 where u_j < 0.5, else -1."""
    return np.where(noise0 < 0.5, 1.0, -1.0)


def gibbs_sweep_exact(theta, x, noise, order):
    """One full sweep of single-site heat-bath updates, in ``order``.

    x has shape (n,) or (batch, n); noise matches.  Each visited site is
    resampled from its conditional given the current values of all others:
    p(x_j=+1 | rest) = sigma(2 (theta_jj + sum_k theta_jk x_k)).
    """
    x = np.array(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
        noise = np.asarray(noise)[None, :]
    n = x.shape[1]
    for j in order:
        inner = x @ theta[:, j] - theta[j, j] * x[:, j] + theta[j, j]
        p_plus = _sigmoid(2.0 * inner)
        y = p_plus - noise[:, j]
        x[:, j] = np.where(y > 0.0, 1.0, -1.0)
    return x[0] if squeeze else x


def run_chain(model, rng, n_sweeps, batch=1, keep_from=0, order=None):
    """Run ``batch`` parallel chains for ``n_sweeps`` full sweeps.

    Returns states of shape (kept_sweeps, batch, n) with sweeps
    ``keep_from`` .. ``n_sweeps-1`` retained.  All chains share one
    visiting order (drawn here unless given), as in a single run.
    """
    n = model.n
    if order is None:
        order = fresh_ordering(rng, n)
    x = init_state(rng.random((batch, n)))
    kept = []
    for i in range(n_sweeps):
        x = gibbs_sweep_exact(model.theta, x, rng.random((batch, n)), order)
        if i >= keep_from:
            kept.append(x.copy())
    if not kept:
        raise GibbsError("keep_from discards every sweep")
    return np.stack(kept)


def empirical_distribution(states, n):
    """Frequency of each of the 2^n states in a (…, n) spin array."""
    flat = states.reshape(-1, n)
    bits = (flat < 0).astype(np.int64)
    codes = bits @ (1 << np.arange(n, dtype=np.int64))
    counts = np.bincount(codes, minlength=1 << n)
    return counts / counts.sum()


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# -- relaxed chain (numpy) ----------------------------------------------

def relaxed_sweep(theta, x, noise, order, config):
    """Differentiable analogue of one exact sweep.

    Instead of thresholding, each site becomes
    tanh(s1 * (sigma(2 * inner) - u_j)) with the same inner product and
    noise slot the exact update would use.
    """
    x = np.array(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
        noise = np.asarray(noise)[None, :]
    for j in order:
        inner = x @ theta[:, j] - theta[j, j] * x[:, j] + theta[j, j]
        x[:, j] = np.tanh(config.state_sharpness * (_sigmoid(2.0 * inner) - noise[:, j]))
    return x[0] if squeeze else x


def relaxed_chain(theta, noise, order, config):
    """Full relaxed rollout from shared noise: returns (final_state, mask).

    noise comes from :func:`fresh_noise`; ``order`` is one shared
    permutation or an (n_layers, n) stack; the mask is the
    sigmoid-squashed final state, entries in (0, 1).
    """
    theta = np.asarray(theta, dtype=np.float64)
    if noise.shape[0] != config.n_layers + 1:
        raise GibbsError(
            f"noise has {noise.shape[0]} slots, config wants {config.n_layers + 1}"
        )
    orders = _layer_orders(order, config.n_layers, theta.shape[0])
    x = init_state(noise[0])
    for i in range(config.n_layers):
        x = relaxed_sweep(theta, x, noise[i + 1], orders[i], config)
    mask = _sigmoid(config.mask_sharpness * x)
    return x, mask


def sample_mask(model, rng, config=None, order=None):
    """Draw one soft mask (and the relaxed state behind it) from the model."""
    config = config or GibbsConfig()
    if order is None:
        order = fresh_orderings(rng, model.n, config.n_layers)
    noise = fresh_noise(rng, model.n, config.n_layers)
    return relaxed_chain(model.theta, noise, order, config)


def sample_hard_mask(model, rng, config=None, order=None):
    """Exact-chain draw thresholded to {0,1}, using the same protocol."""
    config = config or GibbsConfig()
    if order is None:
        order = fresh_orderings(rng, model.n, config.n_layers)
    orders = _layer_orders(order, config.n_layers, model.n)
    noise = fresh_noise(rng, model.n, config.n_layers)
    x = init_state(noise[0])
    for i in range(config.n_layers):
        x = gibbs_sweep_exact(model.theta, x, noise[i + 1], orders[i])
    return (x > 0).astype(np.float64)


def sample_hard_masks(model, rng, n_samples, config=None, block=256):
    """Vectorized hard-mask draws, shape (n_samples, n).

    Chains run in blocks; each block gets its own fresh per-layer
    orders so ordering effects average out over a large sample.
    """
    config = config or GibbsConfig()
    out = []
    for start in range(0, n_samples, block):
        b = min(block, n_samples - start)
        orders = fresh_orderings(rng, model.n, config.n_layers)
        noise = fresh_noise(rng, model.n, config.n_layers, batch=b)
        x = init_state(noise[0])
        for i in range(config.n_layers):
            x = gibbs_sweep_exact(model.theta, x, noise[i + 1], orders[i])
        out.append((x > 0).astype(np.float64))
    return np.concatenate(out, axis=0)


# -- relaxed chain (autodiff graph) -------------------------------------

def relaxed_chain_graph(theta_sym, noise, order, config):
    """Relaxed rollout as autodiff ops; gradients flow into ``theta_sym``.

    ``theta_sym`` is an (n, n) symmetric Tensor; ``noise`` a constant
    array shaped (n_layers + 1, batch, n); ``order`` one shared
    permutation or an (n_layers, n) stack.  Returns (state, mask) Tensors
    of shape (batch, n).  Matches :func:`relaxed_chain` numerically on
    identical inputs.
    """
    if not isinstance(theta_sym, ad.Tensor):
        raise GibbsError("theta_sym must be an autodiff Tensor")
    n = theta_sym.data.shape[0]
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 3 or noise.shape[0] != config.n_layers + 1 or noise.shape[2] != n:
        raise GibbsError(f"noise shape {noise.shape} unusable for n={n}")
    orders = _layer_orders(order, config.n_layers, n)
    x = ad.as_tensor(init_state(noise[0]))
    for i in range(config.n_layers):
        u = noise[i + 1]
        for j in orders[i]:
            col = theta_sym[:, j:j + 1]                             # (n, 1)
            diag_j = theta_sym[j, j]
            inner = (x @ col)[:, 0] - diag_j * x[:, j] + diag_j     # (batch,)
            xj = ad.tanh(
                config.state_sharpness * (ad.sigmoid(2.0 * inner) - ad.as_tensor(u[:, j]))
            )
            xj = xj.reshape((x.data.shape[0], 1))
            parts = []
            if j > 0:
                parts.append(x[:, 0:j])
            parts.append(xj)
            if j < n - 1:
                parts.append(x[:, j + 1:n])
            x = ad.concat(parts, axis=1)
    mask = ad.sigmoid(config.mask_sharpness * x)
    return x, mask


# -- mask CSV interchange ------------------------------------------------

def masks_to_csv(masks, names, path_or_buf):
    """Header of site names, then one mask per row."""
    masks = np.atleast_2d(np.asarray(masks, dtype=np.float64))
    if masks.shape[1] != len(names):
        raise GibbsError(f"{masks.shape[1]} mask entries for {len(names)} names")
    lines = [",".join(names)]
    for row in masks:
        lines.append(",".join(f"{v:.17g}" for v in row))
    text = "\n".join(lines) + "\n"
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        with open(path_or_buf, "w") as f:
            f.write(text)
    else:
        path_or_buf.write(text)


def masks_from_csv(path_or_buf):
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        with open(path_or_buf) as f:
            text = f.read()
    else:
        text = path_or_buf.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise GibbsError("mask file needs a header and at least one row")
    names = [s.strip() for s in lines[0].split(",")]
    try:
        masks = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    except ValueError as e:
        raise GibbsError(f"malformed mask value: {e}") from None
    if masks.shape[1] != len(names):
        raise GibbsError("mask rows do not match the header width")
    return names, masks
