"""Dense statevector simulation of parameterized circuits.

Basis ordering: wire 0 is the most significant bit of the basis index, so
``|q0 q1 ... q_{n-1}>`` maps to ``int("q0q1...", 2)``.

Trainable rotations use the half-angle convention ``R_P(t) = exp(-i t P / 2)``.
All simulation is batched internally: a circuit is run over ``R`` rows at once,
each row carrying its own parameter and input-angle vectors. The single-state
helpers (``apply_gate``, ``apply_circuit``) are thin wrappers over that path.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _kernels

MAX_WIRES = 16
# numba path for circuits without dense (QFT) blocks; the numpy path is the reference
USE_KERNELS = True

SINGLE_WIRE_KINDS = frozenset({"RX", "RY", "RZ", "PhaseGate", "X", "Z", "H"})
ROTATION_KINDS = frozenset({"RX", "RY", "RZ"})
ANGLED_KINDS = frozenset({"RX", "RY", "RZ", "PhaseGate"})
DIAGONAL_KINDS = frozenset({"Z", "RZ", "PhaseGate", "PhaseOracle"})
GATE_KINDS = SINGLE_WIRE_KINDS | {"CNOT", "MCX", "QFT", "IQFT", "PhaseOracle"}


class ConfigurationError(ValueError):
    """Invalid sizes or constants supplied by the caller."""


class CircuitError(ValueError):
    """Malformed gate, circuit, or missing parameter/angle."""


class UnsupportedTemplateError(CircuitError):
    pass


@dataclass(frozen=True)
class Gate:
    kind: str
    wires: tuple[int, ...]
    angle: float | None = None
    param_slot: int | None = None
    input_slot: int | None = None
    oracle_state: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "wires", tuple(int(w) for w in self.wires))
        if self.kind not in GATE_KINDS:
            raise CircuitError(f"unknown gate kind {self.kind!r}")
        if len(set(self.wires)) != len(self.wires):
            raise CircuitError(f"{self.kind}: wire collision in {self.wires}")
        if any(w < 0 for w in self.wires):
            raise CircuitError(f"{self.kind}: negative wire in {self.wires}")
        arity = len(self.wires)
        if self.kind in SINGLE_WIRE_KINDS and arity != 1:
            raise CircuitError(f"{self.kind} acts on exactly one wire")
        if self.kind == "CNOT" and arity != 2:
            raise CircuitError("CNOT acts on exactly two wires")
        if self.kind == "MCX" and arity < 2:
            raise CircuitError("MCX needs at least one control and a target")
        if self.kind in ("QFT", "IQFT", "PhaseOracle") and arity < 1:
            raise CircuitError(f"{self.kind} needs at least one wire")
        if self.param_slot is not None and self.input_slot is not None:
            raise CircuitError("a gate is either trainable or input-encoded, not both")
        if (self.param_slot is not None or self.input_slot is not None) and self.kind not in ANGLED_KINDS:
            raise CircuitError(f"{self.kind} takes no angle")
        if self.kind == "PhaseOracle":
            omega = self.oracle_state
            if omega is None or len(omega) != arity or set(omega) - {"0", "1"}:
                raise CircuitError(f"PhaseOracle needs a {arity}-bit oracle_state, got {omega!r}")

    @property
    def trainable(self) -> bool:
        return self.param_slot is not None


@dataclass(frozen=True)
class Observable:
    """Tensor product of Pauli-Z factors on ``wires`` (identity elsewhere)."""

    wires: tuple[int, ...]

    @classmethod
    def z(cls, wire: int) -> "Observable":
        return cls((int(wire),))


@dataclass
class Statevector:
    n_wires: int
    amps: np.ndarray

    def __post_init__(self) -> None:
        self.amps = np.asarray(self.amps, dtype=np.complex128)
        if self.amps.shape != (2**self.n_wires,):
            raise ConfigurationError(
                f"expected {2**self.n_wires} amplitudes, got shape {self.amps.shape}"
            )

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amps) ** 2

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.probabilities())))

    def copy(self) -> "Statevector":
        return Statevector(self.n_wires, self.amps.copy())


@dataclass(frozen=True)
class CircuitTemplate:
    """Ordered gate program over ``n_wires``.

    ``marks`` names gate indices usable as splice points (for example
    ``"final_block"``); the index of a mark is where inserted gates land.
    """

    n_wires: int
    gates: tuple[Gate, ...] = ()
    marks: tuple[tuple[str, int], ...] = ()
    name: str = "circuit"

    def __post_init__(self) -> None:
        object.__setattr__(self, "gates", tuple(self.gates))
        _check_n_wires(self.n_wires)
        for g in self.gates:
            if max(g.wires) >= self.n_wires:
                raise CircuitError(f"{g.kind} wire out of range for {self.n_wires} wires: {g.wires}")

    @property
    def n_params(self) -> int:
        slots = [g.param_slot for g in self.gates if g.param_slot is not None]
        return max(slots) + 1 if slots else 0

    @property
    def n_inputs(self) -> int:
        slots = [g.input_slot for g in self.gates if g.input_slot is not None]
        return max(slots) + 1 if slots else 0

    def mark(self, name: str) -> int:
        for key, idx in self.marks:
            if key == name:
                return idx
        raise CircuitError(f"circuit {self.name!r} has no mark {name!r}")

    def insert(self, index: int, new_gates: Sequence[Gate], name: str | None = None) -> "CircuitTemplate":
        """Return a copy with ``new_gates`` spliced in before gate ``index``."""
        if not 0 <= index <= len(self.gates):
            raise CircuitError(f"insertion index {index} outside [0, {len(self.gates)}]")
        gates = self.gates[:index] + tuple(new_gates) + self.gates[index:]
        shift = len(new_gates)
        marks = tuple((k, i + shift if i > index else i) for k, i in self.marks)
        return CircuitTemplate(self.n_wires, gates, marks, name or self.name)

    def append(self, new_gates: Sequence[Gate]) -> "CircuitTemplate":
        return self.insert(len(self.gates), new_gates)


def _check_n_wires(n_wires: int) -> None:
    if not isinstance(n_wires, (int, np.integer)) or not 1 <= n_wires <= MAX_WIRES:
        raise ConfigurationError(f"n_wires must be an integer in [1, {MAX_WIRES}], got {n_wires!r}")


def new_state(n_wires: int) -> Statevector:
    _check_n_wires(n_wires)
    amps = np.zeros(2**n_wires, dtype=np.complex128)
    amps[0] = 1.0
    return Statevector(int(n_wires), amps)


# ---------------------------------------------------------------------------
# batched kernels; psi has shape (R, 2**n)


def _bit_of(n_wires: int, wire: int) -> np.ndarray:
    idx = np.arange(2**n_wires)
    return (idx >> (n_wires - 1 - wire)) & 1


@functools.lru_cache(maxsize=None)
def _mcx_perm(n_wires: int, wires: tuple[int, ...]) -> np.ndarray:
    *controls, target = wires
    idx = np.arange(2**n_wires)
    fire = np.ones_like(idx, dtype=bool)
    for c in controls:
        fire &= _bit_of(n_wires, c) == 1
    return np.where(fire, idx ^ (1 << (n_wires - 1 - target)), idx)


@functools.lru_cache(maxsize=None)
def _oracle_diag(n_wires: int, wires: tuple[int, ...], omega: str) -> np.ndarray:
    hit = np.ones(2**n_wires, dtype=bool)
    for w, b in zip(wires, omega):
        hit &= _bit_of(n_wires, w) == int(b)
    return np.where(hit, -1.0, 1.0).astype(np.complex128)


@functools.lru_cache(maxsize=None)
def _qft_matrix(k: int, inverse: bool) -> np.ndarray:
    dim = 2**k
    j = np.arange(dim)
    sign = -1.0 if inverse else 1.0
    return np.exp(sign * 2j * np.pi * np.outer(j, j) / dim) / np.sqrt(dim)


def _one_wire_entries(kind: str, angle):
    """(m00, m01, m10, m11); angle may be a scalar or a (R,) array."""
    if kind == "X":
        return 0.0, 1.0, 1.0, 0.0
    if kind == "Z":
        return 1.0, 0.0, 0.0, -1.0
    if kind == "H":
        s = 1.0 / np.sqrt(2.0)
        return s, s, s, -s
    c = np.cos(np.asarray(angle) / 2.0)
    s = np.sin(np.asarray(angle) / 2.0)
    if kind == "RX":
        return c, -1j * s, -1j * s, c
    if kind == "RY":
        return c, -s, s, c
    if kind == "RZ":
        half = np.exp(-0.5j * np.asarray(angle))
        return half, 0.0, 0.0, np.conj(half)
    if kind == "PhaseGate":
        return 1.0, 0.0, 0.0, np.exp(1j * np.asarray(angle))
    raise CircuitError(f"{kind} is not a single-wire gate")


def _apply_one_wire(psi: np.ndarray, n_wires: int, wire: int, entries) -> np.ndarray:
    rows = psi.shape[0]
    view = psi.reshape(rows, 2**wire, 2, 2 ** (n_wires - wire - 1))
    a0 = view[:, :, 0, :]
    a1 = view[:, :, 1, :]
    m00, m01, m10, m11 = (
        np.asarray(m).reshape(-1, 1, 1) if np.ndim(m) else m for m in entries
    )
    out = np.empty_like(view)
    out[:, :, 0, :] = m00 * a0 + m01 * a1
    out[:, :, 1, :] = m10 * a0 + m11 * a1
    return out.reshape(rows, -1)


def _apply_dense(psi: np.ndarray, n_wires: int, wires: tuple[int, ...], matrix: np.ndarray) -> np.ndarray:
    rows = psi.shape[0]
    k = len(wires)
    t = psi.reshape((rows,) + (2,) * n_wires)
    src = [1 + w for w in wires]
    dst = list(range(n_wires + 1 - k, n_wires + 1))
    t = np.moveaxis(t, src, dst)
    shape = t.shape
    t = t.reshape(-1, 2**k) @ matrix.T
    t = np.moveaxis(t.reshape(shape), dst, src)
    return np.ascontiguousarray(t).reshape(rows, -1)


def _apply_batched(psi: np.ndarray, n_wires: int, gate: Gate, angle) -> np.ndarray:
    kind = gate.kind
    if kind in SINGLE_WIRE_KINDS:
        return _apply_one_wire(psi, n_wires, gate.wires[0], _one_wire_entries(kind, angle))
    if kind in ("CNOT", "MCX"):
        return psi[:, _mcx_perm(n_wires, gate.wires)]
    if kind == "PhaseOracle":
        return psi * _oracle_diag(n_wires, gate.wires, gate.oracle_state)
    if kind in ("QFT", "IQFT"):
        return _apply_dense(psi, n_wires, gate.wires, _qft_matrix(len(gate.wires), kind == "IQFT"))
    raise CircuitError(f"unhandled gate kind {kind}")  # pragma: no cover


def _resolve_angle(gate: Gate, params: np.ndarray | None, inputs: np.ndarray | None):
    if gate.param_slot is not None:
        if params is None or params.shape[-1] <= gate.param_slot:
            raise CircuitError(f"missing quantum parameter for slot {gate.param_slot}")
        return params[..., gate.param_slot]
    if gate.input_slot is not None:
        if inputs is None or inputs.shape[-1] <= gate.input_slot:
            raise CircuitError(f"missing input angle for encoder slot {gate.input_slot}")
        return inputs[..., gate.input_slot]
    if gate.kind in ANGLED_KINDS:
        if gate.angle is None:
            raise CircuitError(f"{gate.kind} has neither a fixed angle nor a slot")
        return gate.angle
    return None


def _compiled(circuit: CircuitTemplate):
    """Table form for the numba path, or None if the circuit needs the numpy path."""
    if not USE_KERNELS:
        return None
    cached = circuit.__dict__.get("_compiled_tables")
    if cached is not None:
        return cached or None
    n = circuit.n_wires
    if any(g.kind in ("QFT", "IQFT") for g in circuit.gates):
        object.__setattr__(circuit, "_compiled_tables", False)
        return None
    count = len(circuit.gates)
    code = np.zeros(count, np.int64)
    sub = np.zeros(count, np.int64)
    wire = np.zeros(count, np.int64)
    src = np.zeros(count, np.int64)
    slot = np.zeros(count, np.int64)
    const = np.zeros(count)
    tidx = np.zeros(count, np.int64)
    perms = [np.arange(2**n)]
    diags = [np.ones(2**n, np.complex128)]
    for i, g in enumerate(circuit.gates):
        if g.kind in SINGLE_WIRE_KINDS:
            code[i] = _kernels.ONE_WIRE
            sub[i] = _kernels.SUB[g.kind]
            wire[i] = g.wires[0]
        elif g.kind in ("CNOT", "MCX"):
            code[i] = _kernels.PERMUTE
            tidx[i] = len(perms)
            perms.append(_mcx_perm(n, g.wires))
        else:
            code[i] = _kernels.DIAGONAL
            tidx[i] = len(diags)
            diags.append(_oracle_diag(n, g.wires, g.oracle_state))
        if g.param_slot is not None:
            src[i], slot[i] = _kernels.PARAM, g.param_slot
        elif g.input_slot is not None:
            src[i], slot[i] = _kernels.INPUT, g.input_slot
        elif g.angle is not None:
            const[i] = g.angle
        elif g.kind in ANGLED_KINDS:
            raise CircuitError(f"{g.kind} has neither a fixed angle nor a slot")
    tables = (n, code, sub, wire, src, slot, const, tidx, np.stack(perms), np.stack(diags))
    object.__setattr__(circuit, "_compiled_tables", tables)
    return tables


def _check_slots(circuit: CircuitTemplate, params: np.ndarray | None, inputs: np.ndarray | None) -> None:
    n_p = 0 if params is None else params.shape[-1]
    n_i = 0 if inputs is None else inputs.shape[-1]
    if circuit.n_params > n_p:
        raise CircuitError(f"circuit needs {circuit.n_params} quantum parameters, got {n_p}")
    if circuit.n_inputs > n_i:
        raise CircuitError(f"circuit needs {circuit.n_inputs} input angles, got {n_i}")


def run_batch(
    circuit: CircuitTemplate,
    params: np.ndarray | None,
    inputs: np.ndarray | None,
    rows: int | None = None,
    initial: np.ndarray | None = None,
) -> np.ndarray:
    """Simulate ``circuit`` for many rows at once.

    ``params`` is ``(P,)`` (shared) or ``(R, P)``; ``inputs`` likewise with the
    encoder-slot count. Returns amplitudes of shape ``(R, 2**n)``.
    """
    n = circuit.n_wires
    params = None if params is None else np.asarray(params, dtype=float)
    inputs = None if inputs is None else np.asarray(inputs, dtype=float)
    if rows is None:
        rows = 1
        for arr in (params, inputs, initial):
            if arr is not None and arr.ndim == 2:
                rows = arr.shape[0]
    _check_slots(circuit, params, inputs)
    tables = _compiled(circuit)
    if tables is not None and initial is None:
        p = np.zeros((rows, 0)) if params is None else np.broadcast_to(np.atleast_2d(params), (rows, params.shape[-1]))
        x = np.zeros((rows, 0)) if inputs is None else np.broadcast_to(np.atleast_2d(inputs), (rows, inputs.shape[-1]))
        return _kernels.simulate_rows(*tables, np.ascontiguousarray(p), np.ascontiguousarray(x))
    if initial is None:
        psi = np.zeros((rows, 2**n), dtype=np.complex128)
        psi[:, 0] = 1.0
    else:
        psi = np.array(np.broadcast_to(initial, (rows, 2**n)), dtype=np.complex128)
    for gate in circuit.gates:
        psi = _apply_batched(psi, n, gate, _resolve_angle(gate, params, inputs))
    return psi


def apply_gate(state: Statevector, gate: Gate, quantum_params=None, input_angles=None) -> Statevector:
    if max(gate.wires) >= state.n_wires:
        raise CircuitError(f"{gate.kind} wire out of range for {state.n_wires} wires: {gate.wires}")
    params = None if quantum_params is None else np.asarray(quantum_params, dtype=float)
    inputs = None if input_angles is None else np.asarray(input_angles, dtype=float)
    psi = _apply_batched(state.amps[None, :], state.n_wires, gate, _resolve_angle(gate, params, inputs))
    return Statevector(state.n_wires, psi[0])


def apply_circuit(state: Statevector, circuit: CircuitTemplate, quantum_params=(), input_angles=()) -> Statevector:
    if circuit.n_wires != state.n_wires:
        raise CircuitError(f"circuit has {circuit.n_wires} wires, state has {state.n_wires}")
    psi = run_batch(circuit, np.asarray(quantum_params, float), np.asarray(input_angles, float),
                    rows=1, initial=state.amps)
    return Statevector(state.n_wires, psi[0])


def unitary(circuit: CircuitTemplate, quantum_params=(), input_angles=()) -> np.ndarray:
    """Full ``2**n x 2**n`` matrix of ``circuit`` (column j = image of basis state j)."""
    dim = 2**circuit.n_wires
    psi = run_batch(circuit, np.asarray(quantum_params, float), np.asarray(input_angles, float),
                    rows=dim, initial=np.eye(dim, dtype=np.complex128))
    return psi.T


# ---------------------------------------------------------------------------
# measurement


def _z_signs(n_wires: int, wires: Iterable[int]) -> np.ndarray:
    sign = np.ones(2**n_wires)
    for w in wires:
        if not 0 <= w < n_wires:
            raise CircuitError(f"observable wire {w} out of range for {n_wires} wires")
        sign = sign * (1 - 2 * _bit_of(n_wires, w))
    return sign


def z_expectations(
    amps: np.ndarray,
    n_wires: int,
    observables: Sequence[Observable],
    shots: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Expectations for every row of ``amps`` (shape ``(R, 2**n)``) -> ``(R, n_obs)``.

    With ``shots`` set, each row's distribution is replaced by the empirical
    frequencies of ``shots`` samples.
    """
    probs = np.abs(amps) ** 2
    if shots is not None:
        if rng is None:
            raise ConfigurationError("shot sampling needs an rng")
        probs = probs / probs.sum(axis=1, keepdims=True)
        probs = rng.multinomial(int(shots), probs) / float(shots)
    signs = np.stack([_z_signs(n_wires, o.wires) for o in observables], axis=1)
    return probs @ signs


def expectation(state: Statevector, obs: Observable) -> float:
    value = z_expectations(state.amps[None, :], state.n_wires, [obs])[0, 0]
    return float(np.clip(value, -1.0, 1.0))


def sample_bitstrings(state: Statevector, shots: int, rng: np.random.Generator) -> dict[str, int]:
    if shots < 1:
        raise ConfigurationError("shots must be >= 1")
    probs = state.probabilities()
    counts = rng.multinomial(int(shots), probs / probs.sum())
    return {
        format(i, f"0{state.n_wires}b"): int(c) for i, c in enumerate(counts) if c
    }


# ---------------------------------------------------------------------------
# gradients

SHIFT = np.pi / 2


def _check_shiftable(circuit: CircuitTemplate) -> None:
    seen_params: set[int] = set()
    seen_inputs: set[int] = set()
    for g in circuit.gates:
        if g.param_slot is not None:
            if g.kind not in ROTATION_KINDS:
                raise UnsupportedTemplateError(f"trainable {g.kind} gate: only RX/RY/RZ may be trainable")
            if g.param_slot in seen_params:
                raise UnsupportedTemplateError(f"parameter slot {g.param_slot} is shared by several gates")
            seen_params.add(g.param_slot)
        if g.input_slot is not None:
            if g.kind not in ROTATION_KINDS:
                raise UnsupportedTemplateError(f"encoder slot on {g.kind}: only RX/RY/RZ may encode inputs")
            if g.input_slot in seen_inputs:
                raise UnsupportedTemplateError(f"encoder slot {g.input_slot} is shared by several gates")
            seen_inputs.add(g.input_slot)


def shift_jacobians(
    circuit: CircuitTemplate,
    quantum_params: np.ndarray,
    input_angles: np.ndarray,
    observables: Sequence[Observable],
    wrt_inputs: bool = True,
    shots: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Values and parameter-shift Jacobians for a batch of input-angle rows.

    Returns ``(values (B, O), d/dparams (B, O, P), d/dinputs (B, O, I) or None)``.
    All shifted evaluations are stacked into one batched simulation.
    """
    _check_shiftable(circuit)
    theta = np.asarray(quantum_params, dtype=float)
    x = np.atleast_2d(np.asarray(input_angles, dtype=float))
    _check_slots(circuit, theta, x)
    batch = x.shape[0]
    n_p = theta.shape[0]
    n_i = x.shape[1] if wrt_inputs else 0
    tables = _compiled(circuit)
    if tables is not None and shots is None:
        signs = np.stack([_z_signs(circuit.n_wires, o.wires) for o in observables])
        values, pp, mp, pi, mi = _kernels.shift_rows(
            *tables, np.ascontiguousarray(theta), np.ascontiguousarray(x), signs, SHIFT, n_i
        )
        return values, (pp - mp) / 2.0, ((pi - mi) / 2.0 if wrt_inputs else None)
    variants = 1 + 2 * n_p + 2 * n_i

    p_rows = np.broadcast_to(theta, (variants, n_p)).copy()
    i_off = np.zeros((variants, x.shape[1]))
    for k in range(n_p):
        p_rows[1 + 2 * k, k] += SHIFT
        p_rows[2 + 2 * k, k] -= SHIFT
    base = 1 + 2 * n_p
    for k in range(n_i):
        i_off[base + 2 * k, k] = SHIFT
        i_off[base + 2 * k + 1, k] = -SHIFT

    params = np.tile(p_rows, (batch, 1))
    inputs = (x[:, None, :] + i_off[None, :, :]).reshape(batch * variants, -1)
    amps = run_batch(circuit, params, inputs)
    vals = z_expectations(amps, circuit.n_wires, observables, shots=shots, rng=rng)
    vals = vals.reshape(batch, variants, len(observables))

    values = vals[:, 0, :]
    plus = vals[:, 1:base:2, :]
    minus = vals[:, 2:base:2, :]
    jac_p = np.transpose((plus - minus) / 2.0, (0, 2, 1))
    jac_i = None
    if wrt_inputs:
        plus = vals[:, base::2, :]
        minus = vals[:, base + 1::2, :]
        jac_i = np.transpose((plus - minus) / 2.0, (0, 2, 1))
    return values, jac_p, jac_i


def parameter_shift_jacobian(
    circuit: CircuitTemplate,
    quantum_params,
    input_angles,
    observables: Sequence[Observable],
) -> np.ndarray:
    """``(n_obs, n_params)`` Jacobian of the expectations w.r.t. trainable angles."""
    _, jac, _ = shift_jacobians(circuit, quantum_params, np.atleast_1d(np.asarray(input_angles, float)),
                                observables, wrt_inputs=False)
    return jac[0]
