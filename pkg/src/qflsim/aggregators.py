"""Server-side aggregation rules.

Every rule sees only ``ClientUpdate`` values (id, round, delta, weight); no
rule can tell which clients are malicious. Ties are broken by ``client_id`` so
outputs do not depend on the order updates arrive in.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFENSES = ("fedavg", "krum", "mkrum", "foolsgold", "mudhog", "flguardian")

# approximations of defenses whose internals are not published alongside this
# threat model carry a -proxy suffix in every output record
RECORD_NAMES = {
    "fedavg": "fedavg",
    "krum": "krum",
    "mkrum": "mkrum",
    "foolsgold": "foolsgold",
    "mudhog": "mudhog-proxy",
    "flguardian": "flguardian-proxy",
}


class ProtocolError(ValueError):
    pass


class AggregatorConfigError(ValueError):
    pass


@dataclass
class ClientUpdate:
    client_id: int
    round: int
    delta: np.ndarray
    weight: float = 1.0


def normalize_weights(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    """Sort by client id and rescale weights to sum to one."""
    if not updates:
        raise ProtocolError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = float(sum(u.weight for u in ordered))
    if total <= 0:
        raise ProtocolError("client weights must be positive")
    return [ClientUpdate(u.client_id, u.round, np.asarray(u.delta, dtype=float), u.weight / total) for u in ordered]


def _stack(updates: Sequence[ClientUpdate]) -> np.ndarray:
    return np.stack([u.delta for u in updates])


def fedavg(updates: Sequence[ClientUpdate]) -> np.ndarray:
    ups = normalize_weights(updates)
    weights = np.array([u.weight for u in ups])
    return weights @ _stack(ups)


# ---------------------------------------------------------------------------
# Krum family


def krum_scores(deltas: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances from each row to its ``n - f - 2`` nearest other rows."""
    n = deltas.shape[0]
    if n < f + 3:
        raise AggregatorConfigError(f"Krum needs n >= f + 3 (n={n}, f={f})")
    m = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        # direct differences: the Gram expansion loses ties and small gaps to cancellation
        dist = np.sum((deltas - deltas[i]) ** 2, axis=1)
        scores[i] = sum(np.sort(np.delete(dist, i))[:m].tolist())
    return scores


def _krum_order(updates: Sequence[ClientUpdate], f: int) -> tuple[list[ClientUpdate], np.ndarray]:
    ups = normalize_weights(updates)
    scores = krum_scores(_stack(ups), f)
    order = sorted(range(len(ups)), key=lambda i: (scores[i], ups[i].client_id))
    return [ups[i] for i in order], scores[order]


def krum(updates: Sequence[ClientUpdate], f: int) -> np.ndarray:
    ranked, _ = _krum_order(updates, f)
    return ranked[0].delta.copy()


def multi_krum(updates: Sequence[ClientUpdate], f: int, m_select: int | None = None) -> np.ndarray:
    n = len(updates)
    m_select = n - f - 2 if m_select is None else m_select
    if not 1 <= m_select <= n - f - 2:
        raise AggregatorConfigError(f"m_select must be in [1, {n - f - 2}], got {m_select}")
    ranked, _ = _krum_order(updates, f)
    return np.mean([u.delta for u in ranked[:m_select]], axis=0)


def krum_selection(updates: Sequence[ClientUpdate], f: int, m_select: int = 1) -> list[int]:
    ranked, _ = _krum_order(updates, f)
    return [u.client_id for u in ranked[:m_select]]


# ---------------------------------------------------------------------------
# history-based rules


@dataclass
class AggregatorState:
    """Per-client cumulative update history, shared by FoolsGold and the Mud-HoG proxy."""

    history: dict[int, np.ndarray] = field(default_factory=dict)
    rounds_seen: int = 0

    def accumulate(self, updates: Sequence[ClientUpdate]) -> None:
        for u in updates:
            prev = self.history.get(u.client_id)
            if prev is not None and prev.shape != u.delta.shape:
                raise ProtocolError(f"client {u.client_id}: history dimension changed")
            self.history[u.client_id] = u.delta.copy() if prev is None else prev + u.delta
        self.rounds_seen += 1


def _cosine_matrix(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = rows / safe[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def foolsgold_weights(histories: np.ndarray, confidence: float = 1.0) -> np.ndarray:
    """FoolsGold client weights from stacked cumulative histories.

    Pairwise cosine similarity, pardoning of honest clients that merely resemble
    a sybil, ``1 - max similarity``, rescale to max 1, logit sharpening, clip to
    [0, 1].
    """
    n = histories.shape[0]
    if n == 1:
        return np.ones(1)
    cs = _cosine_matrix(histories)
    np.fill_diagonal(cs, 0.0)  # exact zero; rounding here would poison the pardoning ratio
    maxcs = np.max(cs, axis=1)
    for i in range(n):
        for j in range(n):
            if i != j and maxcs[i] < maxcs[j]:
                cs[i, j] = cs[i, j] * maxcs[i] / maxcs[j]
    wv = 1.0 - np.max(cs, axis=1)
    wv = np.clip(wv, 0.0, 1.0)
    top = np.max(wv)
    if top <= 0:
        return np.zeros(n)
    wv = wv / top
    wv[wv == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        wv = confidence * (np.log(wv / (1.0 - wv)) + 0.5)
    wv = np.clip(wv, 0.0, 1.0)
    return wv


def foolsgold(updates: Sequence[ClientUpdate], state: AggregatorState, confidence: float = 1.0) -> np.ndarray:
    ups = normalize_weights(updates)
    state.accumulate(ups)
    if len(ups) == 1:
        return ups[0].delta.copy()
    hist = np.stack([state.history[u.client_id] for u in ups])
    if not np.any(np.linalg.norm(hist, axis=1) > 0):
        return fedavg(ups)
    wv = foolsgold_weights(hist, confidence) * np.array([u.weight for u in ups])
    if wv.sum() <= 0:
        log.info("foolsgold: every client weighted zero, falling back to fedavg")
        return fedavg(ups)
    return (wv / wv.sum()) @ _stack(ups)


def _two_means_cosine(unit: np.ndarray, iters: int = 50) -> np.ndarray:
    """Deterministic 2-means on unit vectors under cosine distance; returns labels."""
    n = unit.shape[0]
    sim = unit @ unit.T
    i, j = np.unravel_index(np.argmin(sim + np.tril(np.full((n, n), np.inf))), sim.shape)
    centers = np.stack([unit[i], unit[j]])
    labels = np.full(n, -1)
    for _ in range(iters):
        c_sim = unit @ centers.T
        new = np.where(c_sim[:, 1] > c_sim[:, 0], 1, 0)
        if np.array_equal(new, labels):
            break
        labels = new
        for c in (0, 1):
            members = unit[labels == c]
            if len(members):
                mean = members.sum(axis=0)
                norm = np.linalg.norm(mean)
                centers[c] = mean / norm if norm > 0 else centers[c]
    return labels


def mudhog_select(updates: Sequence[ClientUpdate], state: AggregatorState, min_separation: float = 0.5) -> list[int]:
    """Client ids kept by the Mud-HoG proxy (after accumulating this round)."""
    ups = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ups]
    sig = np.stack([state.history[i] for i in ids])
    norms = np.linalg.norm(sig, axis=1)
    if len(ups) < 3 or np.any(norms == 0):
        return ids
    unit = sig / norms[:, None]
    if np.max(1.0 - unit @ unit.T) < 1e-12:
        return ids
    labels = _two_means_cosine(unit)
    centers = []
    for c in (0, 1):
        mean = unit[labels == c].sum(axis=0)
        centers.append(mean / np.linalg.norm(mean))
    if 1.0 - float(centers[0] @ centers[1]) < min_separation:
        return ids
    sizes = [int(np.sum(labels == c)) for c in (0, 1)]
    if sizes[0] == sizes[1]:
        return ids
    keep = 0 if sizes[0] > sizes[1] else 1
    return [i for i, lab in zip(ids, labels) if lab == keep]


def mudhog(updates: Sequence[ClientUpdate], state: AggregatorState, min_separation: float = 0.5) -> np.ndarray:
    """Long-term-signature clustering proxy for Mud-HoG.

    Each client's signature is its cumulative update. Signatures are split into
    two clusters by cosine 2-means; the larger cluster is averaged. Equal-size
    clusters, near-identical directions, or centroids closer than
    ``min_separation`` in cosine distance keep every client.
    """
    ups = normalize_weights(updates)
    state.accumulate(ups)
    kept = set(mudhog_select(ups, state, min_separation))
    return fedavg([u for u in ups if u.client_id in kept])


def flguardian_screen(updates: Sequence[ClientUpdate], z_max: float = 2.5) -> np.ndarray:
    """Screening proxy: median center, drop norm outliers and anti-aligned clients."""
    ups = normalize_weights(updates)
    if len(ups) < 3:
        raise AggregatorConfigError("flguardian screening needs at least 3 updates")
    deltas = _stack(ups)
    center = np.median(deltas, axis=0)
    norms = np.linalg.norm(deltas, axis=1)
    spread = norms.std()
    z = (norms - norms.mean()) / spread if spread > 0 else np.zeros_like(norms)
    c_norm = np.linalg.norm(center)
    if c_norm > 0:
        cos = deltas @ center / (np.where(norms > 0, norms, 1.0) * c_norm)
    else:
        cos = np.ones(len(ups))
    keep = (z <= z_max) & (cos >= 0)
    if not keep.any():
        log.info("flguardian: every update screened out, returning the median")
        return center
    return fedavg([u for u, k in zip(ups, keep) if k])


def server_apply(theta: np.ndarray, aggregate: np.ndarray, beta: float) -> tuple[np.ndarray, bool]:
    """``theta + beta * aggregate``; a non-finite aggregate leaves ``theta`` unchanged."""
    theta = np.asarray(theta, dtype=float)
    aggregate = np.asarray(aggregate, dtype=float)
    if aggregate.shape != theta.shape:
        raise ProtocolError(f"aggregate shape {aggregate.shape} != parameter shape {theta.shape}")
    if not np.all(np.isfinite(aggregate)):
        log.warning("server_apply: non-finite aggregate, round rejected")
        return theta.copy(), False
    return theta + beta * aggregate, True


@dataclass
class Aggregator:
    """Stateful wrapper selected by defense id."""

    defense: str = "fedavg"
    f: int = 0
    m_select: int | None = None
    foolsgold_confidence: float = 1.0
    mudhog_separation: float = 0.5
    flguardian_z: float = 2.5
    state: AggregatorState = field(default_factory=AggregatorState)

    def __post_init__(self) -> None:
        if self.defense not in DEFENSES:
            raise AggregatorConfigError(f"unknown defense {self.defense!r}; expected one of {DEFENSES}")

    @property
    def record_name(self) -> str:
        return RECORD_NAMES[self.defense]

    def __call__(self, updates: Sequence[ClientUpdate]) -> np.ndarray:
        rule: Callable[[], np.ndarray] = {
            "fedavg": lambda: fedavg(updates),
            "krum": lambda: krum(updates, self.f),
            "mkrum": lambda: multi_krum(updates, self.f, self.m_select),
            "foolsgold": lambda: foolsgold(updates, self.state, self.foolsgold_confidence),
            "mudhog": lambda: mudhog(updates, self.state, self.mudhog_separation),
            "flguardian": lambda: flguardian_screen(updates, self.flguardian_z),
        }[self.defense]
        return rule()


def default_krum_f(q: float, n_clients: int) -> int:
    return int(math.ceil(q * n_clients - 1e-12))
