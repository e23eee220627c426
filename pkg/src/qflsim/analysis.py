"""Runtime diagnostics: stealth-set membership, perturbation and deviation
bounds, margin statistics and accuracy drop."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

BOUND_TOL = 1e-9
RECURSION_TOL = 1e-8


# ---------------------------------------------------------------------------
# stealth set


@dataclass(frozen=True)
class StealthSetParams:
    center: np.ndarray
    radius: float
    kappa: float

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if not -1.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [-1, 1]")


def robust_center(deltas: np.ndarray) -> np.ndarray:
    """Coordinate-wise median of benign deltas (rows)."""
    return np.median(np.atleast_2d(deltas), axis=0)


def stealth_membership(u: np.ndarray, params: StealthSetParams) -> tuple[bool, dict]:
    u = np.asarray(u, dtype=float)
    norm = float(np.linalg.norm(u))
    c_norm = float(np.linalg.norm(params.center))
    if c_norm == 0.0 or norm == 0.0:
        if c_norm == 0.0:
            log.info("stealth_membership: zero center, cosine clause passes vacuously")
        cosine = float("nan")
        cos_ok = True
    else:
        cosine = float(u @ params.center) / (norm * c_norm)
        cos_ok = cosine >= params.kappa
    member = norm <= params.radius and cos_ok
    return member, {"norm": norm, "cosine": cosine, "norm_ok": norm <= params.radius, "cosine_ok": cos_ok}


# ---------------------------------------------------------------------------
# perturbation bound and deviation recursion


def clip_to(v: np.ndarray, radius: float) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    return v * (radius / norm) if norm > radius else np.asarray(v, dtype=float)


def lemma1_check(
    malicious_deltas: Sequence[np.ndarray],
    r_t: float,
    q: float,
    weights: Sequence[float] | None = None,
) -> tuple[float, float, bool]:
    """``(||b||, q * r_t, passed)`` for ``b = sum_a w_a clip(delta_a, r_t)``.

    ``weights`` default to ``q / m`` each, i.e. uniform ``1/K`` weights with ``q = m/K``.
    """
    deltas = [np.asarray(d, dtype=float) for d in malicious_deltas]
    bound = q * r_t
    if not deltas:
        return 0.0, bound, True
    w = [q / len(deltas)] * len(deltas) if weights is None else list(weights)
    b = sum(wa * clip_to(d, r_t) for wa, d in zip(w, deltas))
    b_norm = float(np.linalg.norm(b))
    return b_norm, bound, b_norm <= bound + BOUND_TOL


@dataclass(frozen=True)
class RecursionReport:
    residuals: np.ndarray  # lhs - rhs per round; <= tol means the step holds
    max_residual: float
    violations: int
    unrolled_ok: bool


def proposition1_check(
    deviations: Sequence[float] | None,
    b_norms: Sequence[float] | None,
    L: float,
    beta: float,
    tol: float = RECURSION_TOL,
) -> RecursionReport | None:
    """Check ``dev[t+1] <= (1 + beta L) dev[t] + beta |b_t|`` for every round.

    ``deviations`` has ``T + 1`` entries (including ``dev[0]``), ``b_norms`` has ``T``.
    Returns ``None`` (with a warning) when the shadow data is missing.
    """
    if deviations is None or b_norms is None:
        log.warning("proposition1_check: no shadow trajectory, diagnostic skipped")
        return None
    dev = np.asarray(deviations, dtype=float)
    b = np.asarray(b_norms, dtype=float)
    if dev.size != b.size + 1:
        raise ValueError(f"need len(deviations) == len(b_norms) + 1, got {dev.size} and {b.size}")
    growth = 1.0 + beta * L
    rhs = growth * dev[:-1] + beta * b
    residuals = dev[1:] - rhs
    unrolled = unrolled_bound(b, L, beta, dev[0])
    return RecursionReport(
        residuals,
        float(residuals.max()) if residuals.size else 0.0,
        int(np.sum(residuals > tol)),
        bool(np.all(dev[1:] <= unrolled[1:] + tol * (1 + np.arange(b.size)))),
    )


def unrolled_bound(b_norms: Sequence[float], L: float, beta: float, dev0: float = 0.0) -> np.ndarray:
    """Bound sequence obtained by iterating the recursion with equality."""
    out = [float(dev0)]
    for bt in b_norms:
        out.append((1.0 + beta * L) * out[-1] + beta * float(bt))
    return np.array(out)


class QuadraticFederation:
    """Federated least squares ``F(theta) = 1/2 sum_k w_k ||A_k theta - c_k||^2``.

    Clients take ``local_steps`` gradient steps of size ``lr``. The attacked run
    replaces the malicious clients' updates with arbitrary vectors clipped to
    ``clip``; the twin has the malicious clients send zero, so both runs share
    the benign update map. ``L`` is the largest eigenvalue of ``sum_k w_k A_k^T A_k``.
    """

    def __init__(self, n_clients: int = 4, dim: int = 6, n_malicious: int = 1, seed: int = 0,
                 lr: float = 0.1, local_steps: int = 1, beta: float = 1.0, rows: int = 8):
        rng = np.random.default_rng([seed, 0x51])
        self.n_clients, self.dim, self.beta = n_clients, dim, beta
        self.lr, self.local_steps = lr, local_steps
        self.A = rng.normal(size=(n_clients, rows, dim)) / np.sqrt(rows)
        self.c = rng.normal(size=(n_clients, rows))
        self.w = np.full(n_clients, 1.0 / n_clients)
        self.malicious = tuple(range(n_malicious))
        self.rng = rng

    @property
    def L(self) -> float:
        H = sum(wk * Ak.T @ Ak for wk, Ak in zip(self.w, self.A))
        return float(np.linalg.eigvalsh(H).max())

    def local_update(self, k: int, theta: np.ndarray) -> np.ndarray:
        x = theta.copy()
        for _ in range(self.local_steps):
            x = x - self.lr * self.A[k].T @ (self.A[k] @ x - self.c[k])
        return x - theta

    def benign_aggregate(self, theta: np.ndarray) -> np.ndarray:
        return sum(
            (self.w[k] * self.local_update(k, theta) for k in range(self.n_clients) if k not in self.malicious),
            np.zeros(self.dim),
        )

    def run(self, rounds: int = 50, clip: float = 1.0, attack_scale: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(deviations (T+1,), b_norms (T,))``."""
        theta = self.rng.normal(size=self.dim)
        twin = theta.copy()
        devs, bs = [0.0], []
        for _ in range(rounds):
            b = np.zeros(self.dim)
            for a in self.malicious:
                raw = -attack_scale * self.local_update(a, theta) + self.rng.normal(size=self.dim)
                b += self.w[a] * clip_to(raw, clip)
            theta = theta + self.beta * (self.benign_aggregate(theta) + b)
            twin = twin + self.beta * self.benign_aggregate(twin)
            devs.append(float(np.linalg.norm(theta - twin)))
            bs.append(float(np.linalg.norm(b)))
        return np.array(devs), np.array(bs)


# ---------------------------------------------------------------------------
# margins


@dataclass(frozen=True)
class MarginStats:
    margins: np.ndarray
    lipschitz: float = 0.0
    drift: float = 0.0
    band_fraction: float = 0.0
    flip_fraction: float = 0.0


def margins(logits: np.ndarray) -> np.ndarray:
    """Top logit minus runner-up, per row."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    if logits.shape[1] < 2:
        raise ValueError("margins need at least two classes")
    top2 = np.sort(logits, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def margin_distribution(logits_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray) -> MarginStats:
    return MarginStats(margins(logits_fn(theta)))


def band_fraction(clean_margins: np.ndarray, lipschitz: float, drift: float) -> float:
    clean_margins = np.asarray(clean_margins, dtype=float)
    if drift == 0.0:
        return float(np.mean(clean_margins == 0.0))
    return float(np.mean(clean_margins <= 2.0 * lipschitz * drift))


def flip_fraction(clean_logits: np.ndarray, attacked_logits: np.ndarray) -> float:
    return float(np.mean(np.argmax(clean_logits, axis=1) != np.argmax(attacked_logits, axis=1)))


def estimate_output_lipschitz(
    logits_fn: Callable[[np.ndarray], np.ndarray],
    clean_traj: Sequence[np.ndarray],
    attacked_traj: Sequence[np.ndarray],
    n_pairs: int = 20,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over sampled round-aligned pairs of ``max_x ||f(x) - f'(x)||_inf / ||theta - theta'||``."""
    rng = np.random.default_rng(0) if rng is None else rng
    usable = [t for t in range(min(len(clean_traj), len(attacked_traj)))
              if np.linalg.norm(clean_traj[t] - attacked_traj[t]) > 0]
    if not usable:
        return 0.0
    picks = usable if len(usable) <= n_pairs else sorted(rng.choice(usable, n_pairs, replace=False))
    best = 0.0
    for t in picks:
        gap = np.abs(logits_fn(clean_traj[t]) - logits_fn(attacked_traj[t])).max()
        best = max(best, float(gap / np.linalg.norm(clean_traj[t] - attacked_traj[t])))
    return best


def theorem1_statistics(
    logits_fn: Callable[[np.ndarray], np.ndarray],
    clean_traj: Sequence[np.ndarray],
    attacked_traj: Sequence[np.ndarray],
    n_pairs: int = 20,
    rng: np.random.Generator | None = None,
) -> MarginStats:
    """Margin band statistics between the final clean and attacked models.

    Both the band fraction and the observed flip fraction are reported; the
    band is a sufficient condition, so no ordering between them is enforced.
    """
    clean, attacked = np.asarray(clean_traj[-1]), np.asarray(attacked_traj[-1])
    clean_logits, attacked_logits = logits_fn(clean), logits_fn(attacked)
    drift = float(np.linalg.norm(attacked - clean))
    lf = estimate_output_lipschitz(logits_fn, clean_traj, attacked_traj, n_pairs, rng)
    m = margins(clean_logits)
    return MarginStats(m, lf, drift, band_fraction(m, lf, drift), flip_fraction(clean_logits, attacked_logits))


def accuracy_drop(baseline_acc: float, attacked_acc: float) -> float:
    """Signed ``baseline - attacked`` in percentage points."""
    for v in (baseline_acc, attacked_acc):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"accuracy {v} outside [0, 100]")
    return float(baseline_acc) - float(attacked_acc)
