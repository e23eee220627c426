"""Post-training update crafting for malicious clients.

Pipeline: nearest history anchor -> drop top principal directions of the
centered history -> adaptive intensity from the norm anomaly score -> rescale
to a sampled benign-looking norm plus small noise -> magnitude sparsification.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .model import ShapeError

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class CraftingConfig:
    enabled: bool = True
    window: int = 10
    top_k: int = 3
    eps_min: float = 0.05
    eps_max: float = 1.0
    noise_sigma: float | None = None  # None -> 1e-3 * mu
    noise_rel: float = 1e-3
    sparsity: float = 0.5
    target_norm_rule: str = "sample_gaussian"
    fixed_norm: float | None = None  # for target_norm_rule="fixed"; None -> mu
    norm_floor_rel: float = 0.1

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")
        if not (0 <= self.eps_min <= self.eps_max):
            raise ValueError("need 0 <= eps_min <= eps_max")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity quantile must be in [0, 1)")
        if self.target_norm_rule not in ("sample_gaussian", "fixed"):
            raise ValueError("target_norm_rule must be 'sample_gaussian' or 'fixed'")


class HistoryBuffer:
    """FIFO window of flattened honest-like updates with cached norm statistics."""

    def __init__(self, window: int, dim: int | None = None):
        self.window = int(window)
        self.dim = dim
        self.entries: deque[np.ndarray] = deque(maxlen=self.window)
        self.mu = 0.0
        self.sigma = SIGMA_FLOOR

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, h: np.ndarray) -> "HistoryBuffer":
        h = np.array(h, dtype=float).ravel()
        if self.dim is None:
            self.dim = h.size
        elif h.size != self.dim:
            raise ShapeError(f"history entry has dimension {h.size}, expected {self.dim}")
        self.entries.append(h)
        norms = np.array([np.linalg.norm(e) for e in self.entries])
        self.mu = float(norms.mean())
        self.sigma = max(float(norms.std()), SIGMA_FLOOR)
        return self

    def matrix(self) -> np.ndarray:
        return np.stack(list(self.entries))


def push_history(buf: HistoryBuffer, h: np.ndarray) -> HistoryBuffer:
    return buf.push(h)


def nearest_reference(buf: HistoryBuffer, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closest entry ``h*`` (lowest insertion index on ties) and ``u = r - h*``."""
    if not len(buf):
        raise ValueError("history buffer is empty")
    dists = np.linalg.norm(buf.matrix() - r, axis=1)
    h_star = buf.entries[int(np.argmin(dists))].copy()
    return h_star, r - h_star


def principal_directions(buf: HistoryBuffer, top_k: int) -> np.ndarray:
    """Top ``top_k`` right singular vectors of the row-centered history, as rows."""
    if top_k == 0:
        return np.zeros((0, buf.dim or 0))
    if len(buf) < 2:
        raise ValueError("need at least two history entries to remove principal components")
    hist = buf.matrix()
    centered = hist - hist.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    # directions with zero singular value are not principal components
    rank = int(np.sum(svals > svals.max() * 1e-12)) if svals.size and svals.max() > 0 else 0
    return vt[: min(top_k, rank)]


def null_space_component(u: np.ndarray, buf: HistoryBuffer, top_k: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if top_k == 0:
        return u.copy()
    v = principal_directions(buf, top_k)
    return u - v.T @ (v @ u)


def adaptive_intensity(buf: HistoryBuffer, r: np.ndarray, cfg: CraftingConfig) -> tuple[float, float]:
    sigma = max(buf.sigma, SIGMA_FLOOR)
    s = abs(float(np.linalg.norm(r)) - buf.mu) / sigma
    eps = max(cfg.eps_min, cfg.eps_max / (1.0 + s))
    return s, eps


def sample_target_norm(buf: HistoryBuffer, cfg: CraftingConfig, rng: np.random.Generator) -> float:
    if cfg.target_norm_rule == "fixed":
        return float(buf.mu if cfg.fixed_norm is None else cfg.fixed_norm)
    return max(float(rng.normal(buf.mu, buf.sigma)), cfg.norm_floor_rel * buf.mu)


def camouflage(
    p: np.ndarray,
    buf: HistoryBuffer,
    cfg: CraftingConfig,
    rng: np.random.Generator,
    target_norm: float | None = None,
    trace: dict | None = None,
) -> np.ndarray:
    """Rescale ``p`` to a sampled target norm, then add isotropic Gaussian noise."""
    p = np.asarray(p, dtype=float)
    norm = float(np.linalg.norm(p))
    if norm == 0.0:
        log.warning("camouflage: zero crafted direction, substituting the nearest history entry")
        return p.copy() if not len(buf) else buf.entries[-1].copy()
    r_t = sample_target_norm(buf, cfg, rng) if target_norm is None else float(target_norm)
    p_hat = p * (r_t / norm)
    sigma = cfg.noise_rel * buf.mu if cfg.noise_sigma is None else cfg.noise_sigma
    noise = rng.normal(0.0, 1.0, p.shape) * sigma if sigma > 0 else np.zeros_like(p)
    if trace is not None:
        trace.update(target_norm=r_t, p_hat=p_hat, noise_sigma=sigma)
    return p_hat + noise


def sparsify(p_cam: np.ndarray, quantile: float) -> np.ndarray:
    """Zero every coordinate whose magnitude is below the ``quantile`` of ``|p_cam|``.

    The threshold is the linearly interpolated empirical quantile
    (``numpy.quantile(..., method="linear")``).
    """
    p_cam = np.asarray(p_cam, dtype=float)
    if quantile <= 0.0:
        return p_cam.copy()
    mags = np.abs(p_cam)
    tau = np.quantile(mags, quantile, method="linear")
    return np.where(mags >= tau, p_cam, 0.0)


def craft(
    raw: np.ndarray,
    buf: HistoryBuffer,
    cfg: CraftingConfig,
    rng: np.random.Generator,
    trace: dict | None = None,
) -> np.ndarray:
    """Full crafting pipeline. With an empty history the raw update passes through."""
    raw = np.asarray(raw, dtype=float)
    if not len(buf):
        log.info("craft: empty history, sending raw update")
        if trace is not None:
            trace["bypassed"] = True
        return raw.copy()
    h_star, u = nearest_reference(buf, raw)
    k = cfg.top_k if len(buf) >= 2 else 0
    u_perp = null_space_component(u, buf, k)
    s_t, eps_t = adaptive_intensity(buf, raw, cfg)
    p = h_star + eps_t * u_perp
    if float(np.linalg.norm(p)) == 0.0:
        log.warning("craft: zero crafted direction, substituting the nearest history entry")
        p = h_star
    p_cam = camouflage(p, buf, cfg, rng, trace=trace)
    out = sparsify(p_cam, cfg.sparsity)
    if trace is not None:
        trace.update(bypassed=False, h_star=h_star, u=u, u_perp=u_perp, anomaly=s_t, intensity=eps_t, p=p,
                     removed=principal_directions(buf, k) if k else np.zeros((0, raw.size)))
    return out
