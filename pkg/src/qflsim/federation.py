"""Synchronous federated rounds with in-training and post-training attack surfaces.

Each round: broadcast, per-client local training (malicious clients may swap
in an attacked circuit and amplify their loss, then craft the update), server
aggregation, server step, evaluation. An optional attack-free twin runs in
lockstep on the same random streams to measure parameter deviation.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .aggregators import Aggregator, ClientUpdate, default_krum_f, server_apply
from .analysis import MarginStats, lemma1_check, theorem1_statistics
from .attacks import AttackConfig, PoisonSchedule, build_attack_circuit, effective_loss_scale
from .crafting import CraftingConfig, HistoryBuffer, craft
from .data import DatasetSpec, load_dataset
from .model import (
    AdamWHyper,
    Batch,
    ModelArchitecture,
    ModelParams,
    NumericFault,
    TrainSettings,
    clean_template,
    evaluate,
    forward,
    local_train,
)
from .qsim import CircuitTemplate, ConfigurationError

log = logging.getLogger(__name__)

SHADOW_MODES = ("off", "honest", "silent")

# stream tags keep per-purpose generators disjoint
TAG_TRAIN = 0x7431
TAG_CRAFT = 0x4352
TAG_PARTITION = 0xD1
TAG_INIT = 0x1417
TAG_ROLES = 0x4D41
TAG_MARGIN = 0x4D47

_SEED_MASK = 0xFFFFFFFFFFFFFFFF


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & _SEED_MASK, *(int(k) for k in keys)])


def dirichlet_partition(labels: np.ndarray, n_clients: int, alpha: float, rng: np.random.Generator,
                        max_tries: int = 100) -> list[np.ndarray]:
    """Split sample indices so each class is shared across clients by a Dirichlet(alpha) draw.

    Draws are repeated until every client holds at least one sample.
    """
    labels = np.asarray(labels)
    if n_clients < 1:
        raise ConfigurationError("need at least one client")
    if alpha <= 0:
        raise ConfigurationError("dirichlet alpha must be > 0")
    if labels.size < n_clients:
        raise ConfigurationError(f"{labels.size} samples cannot cover {n_clients} clients")
    classes = np.unique(labels)
    for _ in range(max_tries):
        parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for c in classes:
            idx = rng.permutation(np.nonzero(labels == c)[0])
            shares = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(shares)[:-1] * idx.size).astype(int)
            for k, chunk in enumerate(np.split(idx, cuts)):
                parts[k].append(chunk)
        out = [np.sort(np.concatenate(p)) for p in parts]
        if min(p.size for p in out) >= 1:
            return out
    raise ConfigurationError(f"no partition with non-empty clients after {max_tries} draws (alpha={alpha})")


def malicious_count(q: float, n_clients: int) -> int:
    # round half up; Python's round() would send 2.5 -> 2
    return int(math.floor(q * n_clients + 0.5 + 1e-12))


def malicious_ids(seed: int, q: float, n_clients: int) -> tuple[int, ...]:
    """First ``m = round(qK)`` ids of a seeded permutation, sorted."""
    m = malicious_count(q, n_clients)
    perm = stream(seed, TAG_ROLES).permutation(n_clients)
    return tuple(sorted(int(k) for k in perm[:m]))


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 5
    q: float = 0.0
    rounds: int = 20
    local_epochs: int = 1
    lr: float = 1e-3
    server_lr: float = 1.0
    dirichlet_alpha: float = 0.9
    seed: int = 0
    batch_size: int = 32
    weight_decay: float = 0.01
    attack: AttackConfig = field(default_factory=AttackConfig)
    crafting: CraftingConfig = field(default_factory=CraftingConfig)
    defense: str = "fedavg"
    krum_f: int | None = None
    mkrum_select: int | None = None
    foolsgold_confidence: float = 1.0
    mudhog_separation: float = 0.5
    flguardian_z: float = 2.5
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    n_data_wires: int = 4
    entangling_depth: int = 6
    weighting: str = "uniform"
    shadow: str = "off"
    audit_clip: bool = False
    shots: int | None = None

    def __post_init__(self) -> None:
        if self.n_clients < 1:
            raise ConfigurationError("n_clients must be >= 1")
        if not 0.0 <= self.q <= 1.0:
            raise ConfigurationError("q must lie in [0, 1]")
        if self.q > 0.5:
            log.warning("q=%.3f exceeds 0.5: attackers form a majority", self.q)
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("rounds >= 0, local_epochs >= 1 and batch_size >= 1 required")
        if self.dirichlet_alpha <= 0:
            raise ConfigurationError("dirichlet_alpha must be > 0")
        if self.weighting not in ("uniform", "samples"):
            raise ConfigurationError("weighting must be 'uniform' or 'samples'")
        if self.shadow not in SHADOW_MODES:
            raise ConfigurationError(f"shadow must be one of {SHADOW_MODES}")

    @property
    def m(self) -> int:
        return malicious_count(self.q, self.n_clients)

    def architecture(self, input_dim: int, n_classes: int) -> ModelArchitecture:
        return ModelArchitecture(self.n_data_wires, 1, self.entangling_depth, n_classes, input_dim)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(self.local_epochs, self.batch_size, AdamWHyper(lr=self.lr, weight_decay=self.weight_decay),
                             self.shots)

    def make_aggregator(self) -> Aggregator:
        f = default_krum_f(self.q, self.n_clients) if self.krum_f is None else self.krum_f
        return Aggregator(self.defense, f, self.mkrum_select, self.foolsgold_confidence,
                          self.mudhog_separation, self.flguardian_z)


@dataclass
class ClientState:
    client_id: int
    data: Batch
    malicious: bool = False
    history: HistoryBuffer | None = None


@dataclass
class RoundRecord:
    round: int
    benign_aggregate: np.ndarray
    perturbation: np.ndarray
    applied: np.ndarray
    delta_norms: dict[int, float]
    poisoned: dict[int, int]
    accuracy: float
    loss: float
    deviation: float | None = None
    b_norm: float = 0.0
    clip_radius: float | None = None
    benign_norm_mean: float = 0.0
    benign_norm_std: float = 0.0
    skipped: tuple[int, ...] = ()
    accepted: bool = True
    craft_traces: dict[int, dict] = field(default_factory=dict)
    lemma1: tuple[float, float, bool] | None = None  # (|b| after clipping at r, q r, passed)

    def stealth_ok(self, width: float = 4.0) -> dict[int, bool]:
        """Per poisoned client: transmitted norm within ``width`` benign std of the benign mean."""
        lo = self.benign_norm_mean - width * self.benign_norm_std
        hi = self.benign_norm_mean + width * self.benign_norm_std
        return {k: lo <= self.delta_norms[k] <= hi for k, b in self.poisoned.items() if b and k in self.delta_norms}


@dataclass
class Simulation:
    """Everything a round needs besides the global parameters."""

    cfg: FederationConfig
    arch: ModelArchitecture
    circuit: CircuitTemplate
    clients: list[ClientState]
    test: Batch
    aggregator: Aggregator
    schedule: PoisonSchedule
    adversarial: bool = True
    twin_mode: str = "honest"
    debug: bool = False

    @property
    def malicious(self) -> tuple[int, ...]:
        return tuple(c.client_id for c in self.clients if c.malicious)

    def weights(self, ids: list[int]) -> dict[int, float]:
        if self.cfg.weighting == "uniform":
            raw = {k: 1.0 for k in ids}
        else:
            raw = {k: float(len(self.clients[k].data)) for k in ids}
        total = sum(raw.values())
        return {k: v / total for k, v in raw.items()}


def build_clients(train: Batch, cfg: FederationConfig) -> list[ClientState]:
    parts = dirichlet_partition(train.labels, cfg.n_clients, cfg.dirichlet_alpha, stream(cfg.seed, TAG_PARTITION))
    bad = set(malicious_ids(cfg.seed, cfg.q, cfg.n_clients))
    return [
        ClientState(k, train.subset(idx), k in bad, HistoryBuffer(cfg.crafting.window) if k in bad else None)
        for k, idx in enumerate(parts)
    ]


def _clip(v: np.ndarray, radius: float) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    return v * (radius / norm) if norm > radius else v


def run_round(theta: ModelParams, sim: Simulation, round_t: int, prev_global: np.ndarray | None = None
              ) -> tuple[ModelParams, RoundRecord]:
    cfg = sim.cfg
    if round_t >= cfg.rounds:
        raise ConfigurationError(f"round {round_t} outside 0..{cfg.rounds - 1}")
    settings = cfg.train_settings()
    transmitted: dict[int, np.ndarray] = {}
    poisoned: dict[int, int] = {}
    traces: dict[int, dict] = {}
    skipped: list[int] = []
    for client in sim.clients:
        k = client.client_id
        acting = client.malicious and sim.adversarial
        if acting and prev_global is not None:
            client.history.push(prev_global)
        b = sim.schedule.draw(k, round_t) if acting else 0
        circuit = build_attack_circuit(sim.circuit, cfg.attack, round_t, sim.arch.n_data_wires) if b else sim.circuit
        scale = effective_loss_scale(b, cfg.attack.loss_scale)
        try:
            raw = local_train(theta, client.data, circuit, stream(cfg.seed, k, round_t, TAG_TRAIN), settings, scale)
        except NumericFault as exc:
            log.warning("round %d: client %d skipped (%s)", round_t, k, exc)
            skipped.append(k)
            continue
        if client.malicious and not sim.adversarial and sim.twin_mode == "silent":
            raw = np.zeros_like(raw)
        if b and cfg.crafting.enabled:
            trace = {} if sim.debug else None
            sent = craft(raw, client.history, cfg.crafting, stream(cfg.seed, k, round_t, TAG_CRAFT), trace)
            if trace is not None:
                traces[k] = trace
        else:
            sent = raw
            if acting:
                client.history.push(raw)
        transmitted[k] = sent
        poisoned[k] = b
    if not transmitted:
        raise NumericFault(f"round {round_t}: every client faulted")
    ids = sorted(transmitted)
    bad = set(sim.malicious) if sim.adversarial else set()
    benign_norms = np.array([np.linalg.norm(transmitted[k]) for k in ids if k not in bad])
    mu_b = float(benign_norms.mean()) if benign_norms.size else 0.0
    sd_b = float(benign_norms.std()) if benign_norms.size else 0.0
    radius = None
    if cfg.audit_clip and bad:
        radius = mu_b + 3.0 * sd_b if benign_norms.size else 0.0
        for k in ids:
            if k in bad:
                transmitted[k] = _clip(transmitted[k], radius)
    w = sim.weights(ids)
    lemma = None
    if bad & set(ids):
        r_t = mu_b + 3.0 * sd_b
        mal_w = [w[k] for k in ids if k in bad]
        lemma = lemma1_check([transmitted[k] for k in ids if k in bad], r_t, sum(mal_w), mal_w)
        if not lemma[2]:
            log.error("round %d: perturbation bound violated (%.6g > %.6g)", round_t, lemma[0], lemma[1])
    g = sum((w[k] * transmitted[k] for k in ids if k not in bad), np.zeros(sim.arch.dim))
    b_vec = sum((w[k] * transmitted[k] for k in ids if k in bad), np.zeros(sim.arch.dim))
    updates = [ClientUpdate(k, round_t, transmitted[k], w[k]) for k in ids]
    applied = sim.aggregator(updates)
    new_flat, ok = server_apply(theta.flat, applied, cfg.server_lr)
    new_theta = ModelParams(new_flat, sim.arch)
    acc, loss = evaluate(sim.test, new_theta, sim.circuit)
    record = RoundRecord(
        round=round_t, benign_aggregate=g, perturbation=b_vec, applied=np.asarray(applied, dtype=float),
        delta_norms={k: float(np.linalg.norm(transmitted[k])) for k in ids}, poisoned=poisoned,
        accuracy=acc, loss=loss, b_norm=float(np.linalg.norm(b_vec)), clip_radius=radius,
        benign_norm_mean=mu_b, benign_norm_std=sd_b, skipped=tuple(skipped), accepted=ok, craft_traces=traces,
        lemma1=lemma,
    )
    return new_theta, record


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    initial_accuracy: float
    initial_loss: float
    malicious_ids: tuple[int, ...]
    data_source: str
    trajectory: list[np.ndarray]
    shadow_trajectory: list[np.ndarray] | None = None
    margin_stats: MarginStats | None = None

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].accuracy if self.records else self.initial_accuracy

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss if self.records else self.initial_loss

    @property
    def deviations(self) -> list[float]:
        return [r.deviation for r in self.records if r.deviation is not None]

    @property
    def lemma1_violations(self) -> int:
        return sum(1 for r in self.records if r.lemma1 is not None and not r.lemma1[2])


def prepare(cfg: FederationConfig, data: tuple[Batch, Batch, str] | None = None,
            adversarial: bool = True, twin_mode: str = "honest", debug: bool = False
            ) -> tuple[Simulation, ModelParams, str]:
    train, test, source = load_dataset(cfg.dataset, cfg.seed) if data is None else data
    arch = cfg.architecture(train.inputs.shape[1], max(train.n_classes, test.n_classes))
    sim = Simulation(
        cfg, arch, clean_template(arch), build_clients(train, cfg), test, cfg.make_aggregator(),
        PoisonSchedule(cfg.seed, cfg.attack.poison_prob), adversarial, twin_mode, debug,
    )
    theta0 = ModelParams.initialize(arch, stream(cfg.seed, TAG_INIT))
    return sim, theta0, source


def run_experiment(cfg: FederationConfig, data: tuple[Batch, Batch, str] | None = None,
                   debug: bool = False) -> ExperimentResult:
    """Run ``cfg.rounds`` rounds; with ``cfg.shadow != 'off'`` an attack-free twin runs alongside."""
    if data is None:
        data = load_dataset(cfg.dataset, cfg.seed)
    sim, theta, source = prepare(cfg, data, debug=debug)
    twin = twin_theta = None
    # without malicious clients the twin is the same run, so its deviation is 0 by construction
    trivial_twin = cfg.shadow != "off" and not sim.malicious
    if cfg.shadow != "off" and not trivial_twin:
        twin, twin_theta, _ = prepare(cfg, data, adversarial=False, twin_mode=cfg.shadow)
    acc0, loss0 = evaluate(sim.test, theta, sim.circuit)
    records: list[RoundRecord] = []
    traj = [theta.flat.copy()]
    shadow_traj = [twin_theta.flat.copy()] if twin is not None else ([theta.flat.copy()] if trivial_twin else None)
    prev_global = None
    for t in range(cfg.rounds):
        new_theta, rec = run_round(theta, sim, t, prev_global)
        prev_global = new_theta.flat - theta.flat
        theta = new_theta
        if twin is not None:
            twin_theta, _ = run_round(twin_theta, twin, t)
            rec.deviation = float(np.linalg.norm(theta.flat - twin_theta.flat))
            shadow_traj.append(twin_theta.flat.copy())
        elif trivial_twin:
            rec.deviation = 0.0
        records.append(rec)
        traj.append(theta.flat.copy())
        if trivial_twin:
            shadow_traj.append(theta.flat.copy())
        log.info("round %d: acc %.2f loss %.4f |b| %.3g", t, rec.accuracy, rec.loss, rec.b_norm)
    stats = None
    if twin is not None and records:
        def logits(flat: np.ndarray) -> np.ndarray:
            return forward(sim.test.inputs, ModelParams(flat, sim.arch), sim.circuit)[0]

        stats = theorem1_statistics(logits, shadow_traj, traj, rng=stream(cfg.seed, TAG_MARGIN))
    return ExperimentResult(records, acc0, loss0, sim.malicious, source, traj, shadow_traj, stats)


def shadow_benign_run(cfg: FederationConfig, data: tuple[Batch, Batch, str] | None = None,
                      mode: str = "honest") -> ExperimentResult:
    """Attacked run paired with an attack-free twin; records carry ``||theta - theta_ben||``."""
    if mode == "off":
        raise ConfigurationError("shadow_benign_run needs mode 'honest' or 'silent'")
    return run_experiment(dataclasses.replace(cfg, shadow=mode), data)
