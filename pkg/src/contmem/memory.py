"""Fixed-size continuous long-term memory.

The memory is a coefficient matrix over a Gaussian RBF basis.  Reads use
continuous attention: each head/query produces a Gaussian (mu, sigma^2)
over [0,1] and the context is the closed-form expectation of the value
signal under it.  Writes contract the current signal into [0, tau] and
refit together with the incoming rows placed in (tau, 1], so state size
never grows with how much has been written.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erf as _erf

from . import autodiff as ad
from .autodiff import Tensor
from .basis import BasisSpec, eval_psi, fit_signal, operator_for_positions, sequence_positions


class MemoryError_(Exception):
    """Invalid memory operation (uninitialized read, bad shapes, bad density)."""


@dataclass(frozen=True)
class MemoryState:
    """Coefficients plus basis: the whole long-term memory, fixed size forever."""

    coeffs: np.ndarray          # (N, e)
    spec: BasisSpec
    tau: float
    update_count: int = 0
    sample_count: int = 0       # M evaluation locations per update; 0 -> use N
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise MemoryError_(f"contraction factor must be in (0,1), got {self.tau}")
        if self.coeffs.shape[0] != self.spec.n:
            raise MemoryError_("coefficient rows must match basis count")

    @property
    def num_samples(self) -> int:
        return self.sample_count if self.sample_count > 0 else self.spec.n

    @property
    def width(self) -> int:
        return self.coeffs.shape[1]


def empty_memory(spec: BasisSpec, width: int, tau: float = 0.75,
                 sample_count: int = 0, lam: float = 0.5) -> MemoryState:
    return MemoryState(coeffs=np.zeros((spec.n, width)), spec=spec, tau=tau,
                       sample_count=sample_count, lam=lam)


def evaluate(mem: MemoryState, t) -> np.ndarray:
    """Signal value B^T psi(t): (e,) for scalar t, (len(t), e) for a vector."""
    psi = eval_psi(mem.spec, t)
    if psi.ndim == 1:
        return mem.coeffs.T @ psi
    return psi.T @ mem.coeffs


@dataclass(frozen=True)
class AttentionRecord:
    """Per-head, per-query Gaussian read locations from one step (detached)."""

    mus: np.ndarray       # (H, L)
    sigma2s: np.ndarray   # (H, L)

    def __post_init__(self):
        if self.mus.shape != self.sigma2s.shape:
            raise MemoryError_("mus and sigma2s must have matching shapes")


@dataclass
class LtmHeadParams:
    w_key: Tensor        # (d, d)
    w_value: Tensor      # (d, d)
    w_mu: Tensor         # (N, 1) affine map scores -> mean logit
    b_mu: Tensor         # (1, 1)
    w_sigma: Tensor      # (N, 1)
    b_sigma: Tensor      # (1, 1)


@dataclass
class LtmParams:
    heads: list          # list[LtmHeadParams]
    w_out: Tensor        # (e, e)


def expected_basis(mu, sigma2, spec: BasisSpec) -> np.ndarray:
    """E_{N(t; mu, sigma2)}[psi_j(t)] = N(mu; c_j, sigma2 + w_j^2), untruncated.

    mu scalar -> (N,);  mu vector (Q,) -> (Q, N).
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise MemoryError_("variance must be strictly positive")
    if mu.ndim == 0:
        var = sigma2 + spec.widths ** 2
        return np.exp(-0.5 * (mu - spec.centers) ** 2 / var) / np.sqrt(2.0 * np.pi * var)
    var = sigma2[:, None] + (spec.widths ** 2)[None, :]
    d = mu[:, None] - spec.centers[None, :]
    return np.exp(-0.5 * d * d / var) / np.sqrt(2.0 * np.pi * var)


def _expected_basis_t(mu: Tensor, sigma2: Tensor, spec: BasisSpec) -> Tensor:
    """Tracked version of expected_basis: mu, sigma2 (Q,1) -> (Q, N)."""
    centers = Tensor(spec.centers[None, :])
    w2 = Tensor((spec.widths ** 2)[None, :])
    var = sigma2 + w2
    d = mu - centers
    return ad.exp(d * d * (-0.5) / var) / ad.sqrt(var * (2.0 * np.pi))


def ltm_attend(mem: MemoryState, queries, params: LtmParams):
    """Continuous-attention read.

    queries: list of H Tensors (L, d), one per head.  Returns the (L, e)
    context, the detached AttentionRecord, and the tracked per-head variance
    tensors (for the variance regularizer).  Gradients reach the projection
    and affine parameters and the queries; the stored coefficients are a
    constant.
    """
    if mem.update_count < 1:
        raise MemoryError_("memory has never been written; nothing to attend to")
    heads = params.heads
    d = queries[0].shape[1]
    if mem.width != d * len(heads):
        raise MemoryError_(
            f"memory width {mem.width} incompatible with {len(heads)} heads of size {d}")
    inv_sqrt_d = 1.0 / math.sqrt(d)
    outs, mus, sig2s, tracked_sig2 = [], [], [], []
    for h, (q, hp) in enumerate(zip(queries, heads)):
        b_h = Tensor(mem.coeffs[:, h * d:(h + 1) * d])   # constant: stop-grad on B
        k = ad.matmul(b_h, hp.w_key)                     # (N, d)
        v = ad.matmul(b_h, hp.w_value)                   # (N, d)
        scores = ad.matmul(q, ad.transpose(k)) * inv_sqrt_d   # (L, N)
        mu = ad.sigmoid(ad.matmul(scores, hp.w_mu) + hp.b_mu)        # (L, 1)
        sig2 = ad.softplus(ad.matmul(scores, hp.w_sigma) + hp.b_sigma)
        epsi = _expected_basis_t(mu, sig2, mem.spec)     # (L, N)
        outs.append(ad.matmul(epsi, v))                  # (L, d)
        mus.append(mu.data[:, 0].copy())
        sig2s.append(sig2.data[:, 0].copy())
        tracked_sig2.append(sig2)
    z = ad.matmul(ad.concat(outs, axis=1), params.w_out)
    record = AttentionRecord(mus=np.stack(mus), sigma2s=np.stack(sig2s))
    return z, record, tracked_sig2


def gaussian_interval_mass(mu: float, sigma2: float, a: float, b: float) -> float:
    """P(a <= t <= b) under N(mu, sigma2), standardized before the erf."""
    if sigma2 <= 0:
        raise MemoryError_(f"variance must be positive, got {sigma2}")
    if a > b:
        raise MemoryError_(f"empty interval: a={a} > b={b}")
    s = math.sqrt(2.0 * sigma2)
    lo = -1.0 if a == -math.inf else math.erf((a - mu) / s)
    hi = 1.0 if b == math.inf else math.erf((b - mu) / s)
    return 0.5 * (hi - lo)


def sticky_locations(record: AttentionRecord, num_bins: int, num_samples: int,
                     rng: np.random.Generator):
    """Sample evaluation locations from the previous step's attention histogram.

    Returns (sorted positions in [0,1], fell_back flag).  The flag is set when
    the attention mass over [0,1] underflows and the locations degrade to a
    linear spacing.
    """
    if num_bins < 1 or num_samples < 1:
        raise MemoryError_("need at least one bin and one sample")
    mus = record.mus.ravel()
    sig = np.sqrt(record.sigma2s.ravel())
    if mus.size == 0:
        raise MemoryError_("empty attention record")
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    # CDF of each Gaussian at every bin edge, summed over heads and queries
    z = (edges[None, :] - mus[:, None]) / (sig[:, None] * np.sqrt(2.0))
    cdf = 0.5 * (1.0 + _erf(z))
    mass = (cdf[:, 1:] - cdf[:, :-1]).sum(axis=0)
    total = mass.sum()
    if total <= 0 or not np.isfinite(total):
        return sequence_positions(num_samples), True
    p = mass / total
    bins = rng.choice(num_bins, size=num_samples, p=p)
    pos = (bins + rng.random(num_samples)) / num_bins
    pos.sort()
    return pos, False


_OPERATOR_CACHE: dict = {}


def _cached_operator(spec: BasisSpec, positions: np.ndarray, lam: float):
    key = (spec.key(), positions.tobytes(), lam)
    op = _OPERATOR_CACHE.get(key)
    if op is None:
        op = operator_for_positions(spec, positions, lam)
        _OPERATOR_CACHE[key] = op
    return op


def update(mem: MemoryState, x_new: np.ndarray, mode: str = "linspace",
           record: AttentionRecord = None, rng: np.random.Generator = None,
           num_bins: int = 50) -> MemoryState:
    """Contract-and-append write; returns a new state of identical size.

    x_new must already be detached (plain array or a Tensor whose content is
    treated as constant).  mode "sticky" samples the evaluation locations from
    `record`; "linspace" spaces them evenly.
    """
    x_new = x_new.data if isinstance(x_new, Tensor) else np.asarray(x_new, dtype=np.float64)
    if x_new.ndim != 2 or x_new.shape[1] != mem.width:
        raise MemoryError_(
            f"new rows have shape {x_new.shape}, memory width is {mem.width}")
    if mode not in ("linspace", "sticky"):
        raise MemoryError_(f"unknown update mode {mode!r}")
    length = x_new.shape[0]

    if mem.update_count == 0:
        positions = sequence_positions(length)
        op = _cached_operator(mem.spec, positions, mem.lam)
        coeffs = fit_signal(x_new, op)
        return replace(mem, coeffs=coeffs, update_count=1)

    m = mem.num_samples
    if mode == "sticky":
        if record is None:
            raise MemoryError_("sticky update needs the previous step's attention record")
        if rng is None:
            rng = np.random.default_rng()
        locs, _ = sticky_locations(record, num_bins=num_bins, num_samples=m, rng=rng)
    else:
        locs = sequence_positions(m)
    x_past = evaluate(mem, locs)                               # (M, e)
    x_all = np.concatenate([x_past, x_new], axis=0)            # (M+L, e)
    past_pos = mem.tau * np.arange(1, m + 1) / m               # (0, tau]
    new_pos = mem.tau + (1.0 - mem.tau) * sequence_positions(length)   # (tau, 1]
    positions = np.concatenate([past_pos, new_pos])
    op = _cached_operator(mem.spec, positions, mem.lam)
    coeffs = fit_signal(x_all, op)
    return replace(mem, coeffs=coeffs, update_count=mem.update_count + 1)


def state_num_bytes(mem: MemoryState) -> int:
    """Exact payload size of the persistent state; constant in update_count."""
    return (mem.coeffs.nbytes + mem.spec.centers.nbytes + mem.spec.widths.nbytes
            + 8 + 8 + 8 + 8)  # tau, lam, update_count, sample_count
