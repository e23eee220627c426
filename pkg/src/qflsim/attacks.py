"""In-training circuit attacks (Grover, Pauli, bit-flip, sign-flip) and the
round-level poisoning switch with loss amplification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qsim import CircuitTemplate, ConfigurationError, Gate

ATTACK_KINDS = ("none", "grover", "pauli", "bitflip", "signflip")
INSERTION_POINTS = ("pre_encoding", "before_final_block", "post_circuit")

_ALIASES = {
    "none": "none", "None": "none", "grover": "grover", "Grover": "grover",
    "pauli": "pauli", "Pauli": "pauli", "bitflip": "bitflip", "BitFlip": "bitflip", "bit-flip": "bitflip",
    "signflip": "signflip", "SignFlip": "signflip", "sign-flip": "signflip",
}

DEFAULT_INSERTION = {
    "grover": "before_final_block",
    "pauli": "before_final_block",
    "signflip": "before_final_block",
    "bitflip": "post_circuit",
    "none": "post_circuit",
}


def normalize_kind(kind: str) -> str:
    try:
        return _ALIASES[kind]
    except KeyError:
        raise ConfigurationError(f"unknown attack kind {kind!r}; expected one of {ATTACK_KINDS}") from None


@dataclass(frozen=True)
class AttackConfig:
    """Attack constants. ``None`` fields take per-architecture defaults in ``resolve``."""

    kind: str = "none"
    omega: str | None = None
    wire_set: tuple[int, ...] | None = None
    alphas: tuple[float, ...] | None = None
    period: int = 3
    target_qubit: int = 0
    sign_qubit: int = 0
    phase: float = float(np.pi)
    poison_prob: float = 0.9
    loss_scale: float = 2.0
    insertion_point: str | None = None
    oracle_impl: str = "ancilla"

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        if not 0.0 <= self.poison_prob <= 1.0:
            raise ConfigurationError(f"poison_prob must be in [0, 1], got {self.poison_prob}")
        if self.loss_scale < 1.0:
            raise ConfigurationError(f"loss_scale must be >= 1, got {self.loss_scale}")
        if self.period < 1:
            raise ConfigurationError("period must be a positive integer")
        if self.insertion_point is not None and self.insertion_point not in INSERTION_POINTS:
            raise ConfigurationError(f"insertion_point must be one of {INSERTION_POINTS}")
        if self.oracle_impl not in ("ancilla", "direct"):
            raise ConfigurationError("oracle_impl must be 'ancilla' or 'direct'")
        if self.wire_set is not None:
            object.__setattr__(self, "wire_set", tuple(int(w) for w in self.wire_set))
        if self.alphas is not None:
            object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))

    def resolve(self, n_data_wires: int) -> "AttackConfig":
        """Fill defaults for ``n_data_wires`` and validate wires."""
        omega = self.omega if self.omega is not None else "1" * n_data_wires
        wires = self.wire_set if self.wire_set is not None else tuple(range(n_data_wires))
        alphas = self.alphas if self.alphas is not None else tuple(np.pi / 4 for _ in wires)
        point = self.insertion_point or DEFAULT_INSERTION[self.kind]
        if len(omega) != n_data_wires or set(omega) - {"0", "1"}:
            raise ConfigurationError(f"omega must be a {n_data_wires}-bit string, got {omega!r}")
        if len(alphas) != len(wires):
            raise ConfigurationError(f"{len(wires)} wires but {len(alphas)} alphas")
        for w in wires + (self.target_qubit, self.sign_qubit):
            if not 0 <= w < n_data_wires:
                raise ConfigurationError(f"attack wire {w} is not a data wire (0..{n_data_wires - 1})")
        return AttackConfig(
            self.kind, omega, wires, alphas, self.period, self.target_qubit, self.sign_qubit,
            self.phase, self.poison_prob, self.loss_scale, point, self.oracle_impl,
        )


def grover_oracle_via_ancilla(omega: str, data_wires: tuple[int, ...], ancilla: int) -> list[Gate]:
    """Phase oracle on ``data_wires`` built from one MCX and an ancilla in |->.

    Assumes the ancilla starts in |0> and returns it there. Acts on the data
    register as ``I - 2|omega><omega|``.
    """
    if len(omega) != len(data_wires) or set(omega) - {"0", "1"}:
        raise ConfigurationError(f"omega must be a {len(data_wires)}-bit string, got {omega!r}")
    if ancilla in data_wires:
        raise ConfigurationError("ancilla must not be a data wire")
    flips = [Gate("X", (w,)) for w, bit in zip(data_wires, omega) if bit == "0"]
    prepare = [Gate("X", (ancilla,)), Gate("H", (ancilla,))]
    unprepare = [Gate("H", (ancilla,)), Gate("X", (ancilla,))]
    mcx = Gate("MCX", tuple(data_wires) + (ancilla,))
    return flips + prepare + [mcx] + unprepare + flips


def attack_gates(cfg: AttackConfig, n_data_wires: int, ancilla: int | None, round_t: int) -> list[Gate]:
    cfg = cfg.resolve(n_data_wires)
    data = tuple(range(n_data_wires))
    if cfg.kind == "grover":
        if cfg.oracle_impl == "ancilla":
            if ancilla is None:
                raise ConfigurationError("ancilla-based oracle needs an ancilla wire")
            return grover_oracle_via_ancilla(cfg.omega, data, ancilla)
        return [Gate("PhaseOracle", data, oracle_state=cfg.omega)]
    if cfg.kind == "pauli":
        # exp(-i a X) == RX(2a) in the half-angle convention
        return [Gate("RX", (w,), angle=2.0 * a) for w, a in zip(cfg.wire_set, cfg.alphas)]
    if cfg.kind == "bitflip":
        return [Gate("X", (cfg.target_qubit,))] if round_t % cfg.period == 0 else []
    if cfg.kind == "signflip":
        return [Gate("PhaseGate", (cfg.sign_qubit,), angle=cfg.phase)]
    return []


def build_attack_circuit(clean: CircuitTemplate, cfg: AttackConfig, round_t: int, n_data_wires: int | None = None) -> CircuitTemplate:
    """Splice the attack block into ``clean`` at ``cfg.insertion_point``.

    ``n_data_wires`` defaults to all wires but the last (the ancilla).
    """
    if cfg.kind == "none":
        return clean
    n_data = clean.n_wires - 1 if n_data_wires is None else n_data_wires
    ancilla = n_data if clean.n_wires > n_data else None
    gates = attack_gates(cfg, n_data, ancilla, round_t)
    if not gates:
        return clean
    point = cfg.resolve(n_data).insertion_point
    return clean.insert(clean.mark(point), gates, name=f"{cfg.kind}@{point}")


def _poison_rng(seed: int, client: int, round_t: int) -> np.random.Generator:
    # tag 0x5049 keeps this stream disjoint from training streams with the same ids
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x5049, int(client), int(round_t)])


@dataclass(frozen=True)
class PoisonSchedule:
    """Round-level Bernoulli switch; a pure function of (seed, client, round)."""

    seed: int
    poison_prob: float

    def draw(self, client: int, round_t: int) -> int:
        return int(_poison_rng(self.seed, client, round_t).random() < self.poison_prob)


def gate_poison_round(schedule: PoisonSchedule, client: int, round_t: int) -> int:
    return schedule.draw(client, round_t)


def effective_loss_scale(b: int, loss_scale: float) -> float:
    if loss_scale < 1.0:
        raise ConfigurationError(f"loss_scale must be >= 1, got {loss_scale}")
    return float(loss_scale) if b else 1.0
