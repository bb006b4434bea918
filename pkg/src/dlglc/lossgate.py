"""Dynamic loss gate: two-component GMM on log per-sample losses.

Component 1 is always the low-loss (reliable) one. The gate threshold is the
log-loss at which both weighted component densities are equal, mapped back to
the raw loss domain.
"""
import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

SIGMA_FLOOR = 1e-3
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class InsufficientLossHistory(ValueError):
    pass


class DegenerateLossDistribution(ValueError):
    pass


def gaussian_pdf(x, mu, sigma):
    if not np.all(np.asarray(sigma) > 0):
        raise ValueError("sigma must be positive")
    z = (np.asarray(x, dtype=np.float64) - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * math.sqrt(2 * math.pi))


def _log_weighted_pdf(x, lam, mu, sigma):
    z = (x - mu) / sigma
    return math.log(lam) - math.log(sigma) - _LOG_SQRT_2PI - 0.5 * z * z


@dataclass(frozen=True)
class GmmParams:
    lambda1: float
    mu1: float
    sigma1: float
    lambda2: float
    mu2: float
    sigma2: float
    n_iter: int = 0
    log_likelihood: float = float("nan")  # mean per-sample

    def component_logpdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (_log_weighted_pdf(x, self.lambda1, self.mu1, self.sigma1),
                _log_weighted_pdf(x, self.lambda2, self.mu2, self.sigma2))

    def responsibility1(self, x):
        a, b = self.component_logpdf(x)
        return 1.0 / (1.0 + np.exp(b - a))


@dataclass
class LossLedger:
    epoch: int
    entries: dict = field(default_factory=dict)

    def record(self, ids, losses):
        for i, l in zip(np.asarray(ids).tolist(), np.asarray(losses, dtype=np.float64).tolist()):
            if not (math.isfinite(l) and l > 0):
                raise ValueError(f"loss for utterance {i} must be finite and positive, got {l}")
            self.entries[int(i)] = l

    def losses(self):
        return np.array([self.entries[k] for k in sorted(self.entries)], dtype=np.float64)

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class GateState:
    tau: float
    tau_log: float
    gmm: GmmParams
    epoch: int
    fallback: bool = False


def fit_gmm2(log_losses, max_iters=200, tol=1e-8, rng=None, history=None):
    """EM for a 1-D two-component Gaussian mixture.

    Deterministic initialization (quartiles, pooled std, equal weights), so
    `rng` is accepted for interface symmetry but unused. If `history` is a
    list, the mean log-likelihood after each M-step is appended to it; EM
    guarantees it never decreases and that is asserted here.
    """
    x = np.asarray(log_losses, dtype=np.float64)
    if x.ndim != 1 or len(x) < 10:
        raise InsufficientLossHistory("insufficient loss history")
    if not np.all(np.isfinite(x)):
        raise ValueError("log losses must be finite")
    if np.all(x == x[0]):
        raise DegenerateLossDistribution("degenerate loss distribution")

    mu = np.array([np.percentile(x, 25), np.percentile(x, 75)])
    sigma = np.full(2, max(x.std(), SIGMA_FLOOR))
    lam = np.array([0.5, 0.5])

    def loglik_terms(mu, sigma, lam):
        z = (x[:, None] - mu) / sigma
        return np.log(lam) - np.log(sigma) - _LOG_SQRT_2PI - 0.5 * z * z

    terms = loglik_terms(mu, sigma, lam)
    top = terms.max(axis=1, keepdims=True)
    ll = float(np.mean(top[:, 0] + np.log(np.exp(terms - top).sum(axis=1))))
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        # E step
        resp = np.exp(terms - top)
        resp /= resp.sum(axis=1, keepdims=True)
        # M step; a component that lost all mass keeps its previous moments
        nk = resp.sum(axis=0)
        safe = nk > 1e-300
        new_mu = np.where(safe, (resp * x[:, None]).sum(axis=0) / np.where(safe, nk, 1.0), mu)
        var = (resp * (x[:, None] - new_mu) ** 2).sum(axis=0) / np.where(safe, nk, 1.0)
        sigma = np.where(safe, np.maximum(np.sqrt(var), SIGMA_FLOOR), sigma)
        mu = new_mu
        lam = np.clip(nk / len(x), 1e-300, None)
        lam = lam / lam.sum()

        terms = loglik_terms(mu, sigma, lam)
        top = terms.max(axis=1, keepdims=True)
        new_ll = float(np.mean(top[:, 0] + np.log(np.exp(terms - top).sum(axis=1))))
        if new_ll < ll - 1e-10:
            raise AssertionError(f"EM log-likelihood decreased: {ll!r} -> {new_ll!r}")
        if history is not None:
            history.append(new_ll)
        converged = abs(new_ll - ll) < tol
        ll = new_ll
        if converged:
            break

    if mu[0] > mu[1]:
        mu, sigma, lam = mu[::-1], sigma[::-1], lam[::-1]
    # weights must stay strictly inside (0, 1)
    l1 = float(min(max(lam[0], 1e-12), 1 - 1e-12))
    return GmmParams(l1, float(mu[0]), float(sigma[0]), 1.0 - l1, float(mu[1]), float(sigma[1]),
                     n_iter=n_iter, log_likelihood=ll)


def intersection_roots(gmm):
    """Real roots of log(l1 N1(x)) = log(l2 N2(x)), sorted ascending."""
    s1, s2 = gmm.sigma1, gmm.sigma2
    a = 0.5 / s2**2 - 0.5 / s1**2
    b = gmm.mu1 / s1**2 - gmm.mu2 / s2**2
    c = (math.log(gmm.lambda1 * s2 / (gmm.lambda2 * s1))
         - gmm.mu1**2 / (2 * s1**2) + gmm.mu2**2 / (2 * s2**2))
    scale = max(abs(b), abs(c), 1e-300)
    if abs(a) <= 1e-14 * scale:
        if b == 0:
            return []
        return [-c / b]
    disc = b * b - 4 * a * c
    if disc < 0:
        return []
    # cancellation-free quadratic formula
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    roots = [q / a]
    if q != 0:
        roots.append(c / q)
    return sorted(roots)


def _polish(gmm, x, lo, hi):
    # Newton steps on f(x) = log p1 - log p2, kept inside [lo, hi]
    for _ in range(3):
        a, b = gmm.component_logpdf(x)
        f = float(a - b)
        df = -(x - gmm.mu1) / gmm.sigma1**2 + (x - gmm.mu2) / gmm.sigma2**2
        if f == 0 or df == 0:
            break
        nx = x - f / df
        if not lo <= nx <= hi:
            break
        x = nx
    return x


def solve_threshold(gmm):
    """Return (tau_log, fallback_flag).

    Picks the intersection inside [mu1, mu2]; when both roots qualify, the
    one whose component-1 responsibility is closest to 0.5. Without such a
    root, falls back to the midpoint of the means.
    """
    lo, hi = gmm.mu1, gmm.mu2
    inside = [r for r in intersection_roots(gmm) if lo <= r <= hi]
    if not inside:
        warnings.warn("no GMM intersection between the component means; using their midpoint")
        return 0.5 * (lo + hi), True
    inside = [_polish(gmm, r, lo, hi) for r in inside]
    best = min(inside, key=lambda r: (abs(float(gmm.responsibility1(r)) - 0.5), abs(r - 0.5 * (lo + hi))))
    return float(best), False


def refresh_gate(ledger, rng=None):
    losses = ledger.losses()
    gmm = fit_gmm2(np.log(losses), rng=rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tau_log, fallback = solve_threshold(gmm)
    return GateState(tau=math.exp(tau_log), tau_log=tau_log, gmm=gmm, epoch=ledger.epoch, fallback=fallback)


def write_ledger_csv(path, ledger, append=False):
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f)
        if not append or f.tell() == 0:
            w.writerow(["epoch", "utterance_id", "loss"])
        for i in sorted(ledger.entries):
            w.writerow([ledger.epoch, i, repr(ledger.entries[i])])


def read_ledger_csv(path, epoch=None):
    """Read a ledger export; with several epochs present, keeps `epoch` (default: last)."""
    rows = {}
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            rows.setdefault(int(r["epoch"]), {})[int(r["utterance_id"])] = float(r["loss"])
    if not rows:
        raise ValueError(f"{path}: empty ledger")
    ep = max(rows) if epoch is None else epoch
    return LossLedger(epoch=ep, entries=rows[ep])


GATE_FIELDS = ["epoch", "tau", "tau_log", "lambda1", "mu1", "sigma1", "lambda2", "mu2", "sigma2",
               "fallback_flag"]


def gate_row(g):
    m = g.gmm
    return [g.epoch, repr(g.tau), repr(g.tau_log), repr(m.lambda1), repr(m.mu1), repr(m.sigma1),
            repr(m.lambda2), repr(m.mu2), repr(m.sigma2), int(g.fallback)]


def write_gate_csv(path, gates):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(GATE_FIELDS)
        for g in gates:
            w.writerow(gate_row(g))


def loss_histogram(ledger, bins=80, gmm=None, n_curve=400):
    """Histogram of log losses plus the fitted weighted component densities.

    Returns (hist_rows, curve_rows). Histogram rows are
    (bin_left, bin_right, count, density); curve rows are
    (x, lambda1*N1(x), lambda2*N2(x), mixture(x)) on a uniform grid.
    """
    x = np.log(ledger.losses())
    if gmm is None:
        gmm = fit_gmm2(x)
    counts, edges = np.histogram(x, bins=bins)
    density = counts / (len(x) * np.diff(edges))
    hist = list(zip(edges[:-1], edges[1:], counts, density))
    grid = np.linspace(edges[0], edges[-1], n_curve)
    p1 = gmm.lambda1 * gaussian_pdf(grid, gmm.mu1, gmm.sigma1)
    p2 = gmm.lambda2 * gaussian_pdf(grid, gmm.mu2, gmm.sigma2)
    curve = list(zip(grid, p1, p2, p1 + p2))
    return hist, curve, gmm
