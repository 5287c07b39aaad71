"""Fully-connected binary Ising model over telescope sites.

theta is an n x n symmetric matrix: the diagonal holds per-site activity
parameters, the off-diagonal entries pairwise couplings.  States are
vectors in {+1, -1}^n; +1 means the site participates.  Everything that
needs the full distribution (partition function, entropy, exact sampling,
conditioning checks) enumerates the 2^n states and is capped at n = 20.
"""

from __future__ import annotations

import numpy as np

ENUM_MAX_SITES = 20
_CHUNK = 1 << 16


class IsingError(Exception):
    pass


class IsingModel:
    """Symmetric parameter matrix plus optional site names."""

    def __init__(self, theta, names=None):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
            raise IsingError(f"theta must be square, got {theta.shape}")
        if theta.shape[0] < 1:
            raise IsingError("need at least one site")
        if not np.allclose(theta, theta.T, atol=1e-9):
            raise IsingError("theta must be symmetric")
        # mirror the upper triangle so symmetry is exact
        self.theta = np.triu(theta) + np.triu(theta, 1).T
        self.n = theta.shape[0]
        if names is not None:
            names = [str(x) for x in names]
            if len(names) != self.n:
                raise IsingError("one name per site required")
            if len(set(names)) != self.n:
                raise IsingError("site names must be unique")
        self.names = names

    @property
    def activities(self):
        return np.diag(self.theta).copy()

    def couplings(self):
        """Off-diagonal matrix (diagonal zeroed)."""
        c = self.theta.copy()
        np.fill_diagonal(c, 0.0)
        return c

    # -- free-parameter layout: n activities then upper-triangle couplings
    @classmethod
    def free_size(cls, n):
        return n * (n + 1) // 2

    @classmethod
    def from_free(cls, free, n, names=None):
        free = np.asarray(free, dtype=np.float64)
        if free.size != cls.free_size(n):
            raise IsingError(f"expected {cls.free_size(n)} free values, got {free.size}")
        theta = np.zeros((n, n))
        theta[np.diag_indices(n)] = free[:n]
        iu = np.triu_indices(n, 1)
        theta[iu] = free[n:]
        theta[(iu[1], iu[0])] = free[n:]
        return cls(theta, names)

    def to_free(self):
        iu = np.triu_indices(self.n, 1)
        return np.concatenate([np.diag(self.theta), self.theta[iu]])

    def __repr__(self):
        return f"IsingModel(n={self.n})"


def _check_state(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n,):
        raise IsingError(f"state length {x.shape} != site count {model.n}")
    return x


def hamiltonian(model, x):
    """Energy -sum_j theta_jj x_j - sum_{j<k} theta_jk x_j x_k.

    Accepts relaxed states in [-1, 1]^n as well (same bilinear formula);
    the diversity regularizer evaluates it on tanh outputs.
    """
    x = _check_state(model, x)
    field = np.diag(model.theta) @ x
    c = model.couplings()
    pair = 0.5 * x @ c @ x
    return float(-field - pair)


def _enumerate_states(n):
    """Yield (states, indices) chunks; states rows are in {+1,-1}^n.

    Bit j of the index gives site j: bit 0 -> +1, bit 1 -> -1.
    """
    total = 1 << n
    bits = np.arange(n)
    for start in range(0, total, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, total), dtype=np.int64)
        x = 1.0 - 2.0 * ((idx[:, None] >> bits) & 1)
        yield x, idx


def _energies(model, x):
    field = x @ np.diag(model.theta)
    c = model.couplings()
    pair = 0.5 * np.einsum("ij,ij->i", x @ c, x)
    return -field - pair


def _require_enumerable(model, op):
    if model.n > ENUM_MAX_SITES:
        raise IsingError(f"{op} enumerates 2^n states; n={model.n} exceeds {ENUM_MAX_SITES}")


def log_partition(model):
    """log Z via a streaming log-sum-exp over all states."""
    _require_enumerable(model, "log_partition")
    m = -np.inf
    acc = 0.0
    for x, _ in _enumerate_states(model.n):
        e = -_energies(model, x)
        cm = e.max()
        if cm > m:
            acc *= np.exp(m - cm)
            m = cm
        acc += np.exp(e - m).sum()
    return float(m + np.log(acc))


def partition_function(model):
    """Z = sum_X exp(-H(X)).  Enumeration oracle, n <= 20."""
    return float(np.exp(log_partition(model)))


def probability(model, x):
    """Boltzmann probability exp(-H(X)) / Z of a single state."""
    _require_enumerable(model, "probability")
    return float(np.exp(-hamiltonian(model, x) - log_partition(model)))


def all_probabilities(model):
    """Probability of every state, indexed by the enumeration bit code."""
    _require_enumerable(model, "all_probabilities")
    logz = log_partition(model)
    out = np.empty(1 << model.n)
    for x, idx in _enumerate_states(model.n):
        out[idx] = np.exp(-_energies(model, x) - logz)
    return out


def state_index(x):
    """Enumeration index of a spin state (inverse of the bit coding)."""
    x = np.asarray(x)
    bits = (x < 0).astype(np.int64)
    return int(bits @ (1 << np.arange(x.size, dtype=np.int64)))


def state_from_index(idx, n):
    bits = (np.asarray(idx, dtype=np.int64) >> np.arange(n)) & 1
    return 1.0 - 2.0 * bits


def entropy(model):
    """Shannon entropy -sum p log p of the Boltzmann distribution."""
    _require_enumerable(model, "entropy")
    logz = log_partition(model)
    s = 0.0
    for x, _ in _enumerate_states(model.n):
        logp = -_energies(model, x) - logz
        s -= float(np.exp(logp) @ logp)
    return s


def mean_energy(model):
    """E[H] under the Boltzmann distribution (enumeration)."""
    _require_enumerable(model, "mean_energy")
    logz = log_partition(model)
    acc = 0.0
    for x, _ in _enumerate_states(model.n):
        e = _energies(model, x)
        acc += float(np.exp(-e - logz) @ e)
    return acc


def entropy_via_identity(model):
    """E[H] + log Z; equals the entropy for the Boltzmann distribution."""
    return mean_energy(model) + log_partition(model)


def conditional_model(model, known):
    """Condition on a partial assignment; the result is again an Ising model.

    ``known`` maps site index -> +1/-1.  Activities of the remaining sites
    pick up sum_l theta_jl x_l over the known sites; couplings among the
    remaining sites are unchanged.  Returns (submodel, remaining_indices).
    """
    if not known:
        raise IsingError("known assignment is empty")
    for j, v in known.items():
        if not 0 <= j < model.n:
            raise IsingError(f"site index {j} out of range")
        if v not in (1, -1, 1.0, -1.0):
            raise IsingError(f"known values must be +1 or -1, got {v}")
    unknown = [j for j in range(model.n) if j not in known]
    if not unknown:
        raise IsingError("conditioning on every site leaves nothing to model")
    kidx = np.array(sorted(known), dtype=np.int64)
    kval = np.array([known[j] for j in kidx], dtype=np.float64)
    sub = model.theta[np.ix_(unknown, unknown)].copy()
    shift = model.theta[np.ix_(unknown, kidx)] @ kval
    sub[np.diag_indices(len(unknown))] += shift
    names = [model.names[j] for j in unknown] if model.names else None
    return IsingModel(sub, names), unknown


def exact_sample(model, rng, size=None):
    """Inverse-CDF draws from the enumerated Boltzmann distribution."""
    _require_enumerable(model, "exact_sample")
    probs = all_probabilities(model)
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    u = rng.random(size if size is not None else 1)
    idx = np.searchsorted(cdf, u, side="right")
    out = np.stack([state_from_index(i, model.n) for i in np.atleast_1d(idx)])
    return out if size is not None else out[0]


class CliqueReport:
    """Telescope triples whose pairwise couplings all exceed tau."""

    def __init__(self, tau, triples):
        self.tau = tau
        self.triples = triples  # list of ((j, k, l), score)

    def __len__(self):
        return len(self.triples)

    def __iter__(self):
        return iter(self.triples)


def find_three_cliques(model, tau):
    """All triples (j,k,l) with every pairwise coupling > tau.

    Scored by the coupling sum and sorted descending; ties break
    lexicographically on the index triple.
    """
    c = model.couplings()
    n = model.n
    triples = []
    for j in range(n):
        for k in range(j + 1, n):
            if c[j, k] <= tau:
                continue
            for l in range(k + 1, n):
                if c[j, l] > tau and c[k, l] > tau:
                    triples.append(((j, k, l), float(c[j, k] + c[k, l] + c[j, l])))
    triples.sort(key=lambda t: (-t[1], t[0]))
    return CliqueReport(tau, triples)


def estimate_marginals(samples):
    """Per-site selection frequency from spin states or [0,1] masks.

    Spin entries count as selected when +1; mask entries when > 0.5.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[0] == 0:
        raise IsingError("no samples given")
    return (arr > 0.5).mean(axis=0)


# -- CSV interchange ----------------------------------------------------

def theta_to_csv(model, path_or_buf):
    """Header row of site names, then n rows of n values."""
    names = model.names or [f"s{j}" for j in range(model.n)]
    lines = [",".join(names)]
    for row in model.theta:
        lines.append(",".join(f"{v:.17g}" for v in row))
    text = "\n".join(lines) + "\n"
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        with open(path_or_buf, "w") as f:
            f.write(text)
    else:
        path_or_buf.write(text)


def theta_from_csv(path_or_buf):
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        with open(path_or_buf) as f:
            text = f.read()
    else:
        text = path_or_buf.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise IsingError("empty theta file")
    names = [s.strip() for s in lines[0].split(",")]
    n = len(names)
    if len(lines) - 1 != n:
        raise IsingError(f"expected {n} value rows, found {len(lines) - 1}")
    try:
        theta = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    except ValueError as e:
        raise IsingError(f"malformed theta value: {e}") from None
    if theta.shape != (n, n):
        raise IsingError(f"theta grid is {theta.shape}, expected ({n}, {n})")
    return IsingModel(theta, names)
