"""Hybrid classifier: affine+tanh angle encoder -> PQC features -> affine head.

Gradients are exact: the head and encoder are differentiated analytically and
the quantum block (trainable rotations and encoder rotations alike) by the
parameter-shift rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .qsim import CircuitTemplate, Gate, Observable, run_batch, shift_jacobians, z_expectations


class ShapeError(ValueError):
    pass


class DataError(ValueError):
    pass


class NumericFault(FloatingPointError):
    """Non-finite gradient or update; the client's round is aborted."""


@dataclass(frozen=True)
class ModelArchitecture:
    n_data_wires: int
    n_ancilla: int = 1
    entangling_depth: int = 6
    n_classes: int = 10
    input_dim: int = 64

    @property
    def n_wires(self) -> int:
        return self.n_data_wires + self.n_ancilla

    @property
    def ancilla(self) -> int:
        return self.n_data_wires

    @property
    def n_quantum(self) -> int:
        return 2 * self.n_data_wires * self.entangling_depth

    @classmethod
    def mnist(cls, input_dim: int = 64) -> "ModelArchitecture":
        return cls(n_data_wires=4, n_ancilla=1, entangling_depth=6, n_classes=10, input_dim=input_dim)

    @classmethod
    def cifar(cls, entangling_depth: int = 6) -> "ModelArchitecture":
        return cls(n_data_wires=8, n_ancilla=1, entangling_depth=entangling_depth, n_classes=10, input_dim=3072)

    def manifest(self) -> list[tuple[str, int]]:
        n, c = self.n_data_wires, self.n_classes
        return [
            ("encoder", self.input_dim * n + n),
            ("quantum", self.n_quantum),
            ("head", n * c + c),
        ]

    @property
    def dim(self) -> int:
        return sum(size for _, size in self.manifest())


def clean_template(arch: ModelArchitecture) -> CircuitTemplate:
    """Angle encoding, then ``depth`` x [RX, RY per data wire; CNOT ring].

    Marks: ``pre_encoding`` (0), ``before_final_block`` (start of the last
    repetition) and ``post_circuit`` (end). The ancilla stays idle.
    """
    n = arch.n_data_wires
    gates: list[Gate] = [Gate("RX", (w,), input_slot=w) for w in range(n)]
    slot = 0
    final_block = len(gates)
    for _ in range(arch.entangling_depth):
        final_block = len(gates)
        for w in range(n):
            gates.append(Gate("RX", (w,), param_slot=slot))
            gates.append(Gate("RY", (w,), param_slot=slot + 1))
            slot += 2
        if n > 1:
            ring = [(w, (w + 1) % n) for w in range(n)] if n > 2 else [(0, 1)]
            gates.extend(Gate("CNOT", pair) for pair in ring)
    marks = (("pre_encoding", 0), ("before_final_block", final_block), ("post_circuit", len(gates)))
    return CircuitTemplate(arch.n_wires, tuple(gates), marks, name="clean")


def feature_observables(arch: ModelArchitecture) -> list[Observable]:
    return [Observable.z(w) for w in range(arch.n_data_wires)]


@dataclass
class ModelParams:
    flat: np.ndarray
    arch: ModelArchitecture

    def __post_init__(self) -> None:
        self.flat = np.asarray(self.flat, dtype=float)
        if self.flat.shape != (self.arch.dim,):
            raise ShapeError(f"expected {self.arch.dim} parameters, got shape {self.flat.shape}")

    def _block(self, name: str) -> np.ndarray:
        start = 0
        for key, size in self.arch.manifest():
            if key == name:
                return self.flat[start:start + size]
            start += size
        raise KeyError(name)

    @property
    def encoder_w(self) -> np.ndarray:
        n, d = self.arch.n_data_wires, self.arch.input_dim
        return self._block("encoder")[: n * d].reshape(n, d)

    @property
    def encoder_b(self) -> np.ndarray:
        n, d = self.arch.n_data_wires, self.arch.input_dim
        return self._block("encoder")[n * d:]

    @property
    def quantum(self) -> np.ndarray:
        return self._block("quantum")

    @property
    def head_w(self) -> np.ndarray:
        n, c = self.arch.n_data_wires, self.arch.n_classes
        return self._block("head")[: n * c].reshape(c, n)

    @property
    def head_b(self) -> np.ndarray:
        n, c = self.arch.n_data_wires, self.arch.n_classes
        return self._block("head")[n * c:]

    def copy(self) -> "ModelParams":
        return ModelParams(self.flat.copy(), self.arch)

    @classmethod
    def from_blocks(cls, arch, encoder_w, encoder_b, quantum, head_w, head_b) -> "ModelParams":
        flat = np.concatenate([
            np.ravel(encoder_w), np.ravel(encoder_b), np.ravel(quantum), np.ravel(head_w), np.ravel(head_b)
        ])
        return cls(flat, arch)

    @classmethod
    def initialize(cls, arch: ModelArchitecture, rng: np.random.Generator) -> "ModelParams":
        # torch.nn.Linear-style bounds for the classical maps, uniform [0, 2pi) rotations
        n, d, c = arch.n_data_wires, arch.input_dim, arch.n_classes
        enc_bound = 1.0 / np.sqrt(d)
        head_bound = 1.0 / np.sqrt(n)
        return cls.from_blocks(
            arch,
            rng.uniform(-enc_bound, enc_bound, (n, d)),
            rng.uniform(-enc_bound, enc_bound, n),
            rng.uniform(0.0, 2 * np.pi, arch.n_quantum),
            rng.uniform(-head_bound, head_bound, (c, n)),
            rng.uniform(-head_bound, head_bound, c),
        )


def flatten(params: ModelParams) -> np.ndarray:
    return params.flat.copy()


def unflatten(flat: np.ndarray, arch: ModelArchitecture) -> ModelParams:
    return ModelParams(np.array(flat, dtype=float), arch)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int = 10

    def __post_init__(self) -> None:
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.labels = np.atleast_1d(np.asarray(self.labels)).astype(np.int64)
        if self.inputs.shape[0] < 1:
            raise DataError("batch must hold at least one sample")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx], self.n_classes)


# ---------------------------------------------------------------------------
# forward / loss


def _preactivation(inputs: np.ndarray, params: ModelParams) -> np.ndarray:
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    if x.shape[1] != params.arch.input_dim:
        raise ShapeError(f"input dimension {x.shape[1]} != architecture input_dim {params.arch.input_dim}")
    return x @ params.encoder_w.T + params.encoder_b


def encode(inputs: np.ndarray, params: ModelParams) -> np.ndarray:
    """Angles ``pi * tanh(W x + c)``, one per data wire; accepts a vector or a batch."""
    angles = np.pi * np.tanh(_preactivation(inputs, params))
    return angles[0] if np.ndim(inputs) == 1 else angles


def forward(
    inputs: np.ndarray,
    params: ModelParams,
    circuit: CircuitTemplate,
    shots: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, features)``; 1-D input gives 1-D outputs."""
    angles = np.atleast_2d(encode(inputs, params))
    amps = run_batch(circuit, params.quantum, angles)
    feats = z_expectations(amps, circuit.n_wires, feature_observables(params.arch), shots=shots, rng=rng)
    logits = feats @ params.head_w.T + params.head_b
    if np.ndim(inputs) == 1:
        return logits[0], feats[0]
    return logits, feats


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss(logits: np.ndarray, label: int, scale: float = 1.0) -> float:
    """Cross-entropy of one sample, multiplied by ``scale`` (loss amplification hook)."""
    logits = np.asarray(logits, dtype=float)
    if not 0 <= int(label) < logits.shape[-1]:
        raise DataError(f"label {label} outside [0, {logits.shape[-1]})")
    return float(-scale * _log_softmax(logits)[int(label)])


def mean_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = _log_softmax(np.atleast_2d(logits))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def backward(
    batch: Batch,
    params: ModelParams,
    circuit: CircuitTemplate,
    loss_scale: float = 1.0,
    shots: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Gradient of ``loss_scale * mean cross-entropy`` over ``batch`` w.r.t. ``params.flat``."""
    if loss_scale <= 0:
        raise ValueError("loss_scale must be positive")
    arch = params.arch
    x = batch.inputs
    pre = _preactivation(x, params)
    t = np.tanh(pre)
    angles = np.pi * t
    feats, jac_q, jac_in = shift_jacobians(
        circuit, params.quantum, angles, feature_observables(arch), wrt_inputs=True, shots=shots, rng=rng
    )
    logits = feats @ params.head_w.T + params.head_b

    n_rows = len(batch)
    probs = np.exp(_log_softmax(logits))
    probs[np.arange(n_rows), batch.labels] -= 1.0
    d_logits = probs * (loss_scale / n_rows)

    g_head_w = d_logits.T @ feats
    g_head_b = d_logits.sum(axis=0)
    d_feats = d_logits @ params.head_w
    g_quantum = np.einsum("bj,bjk->k", d_feats, jac_q)
    d_angles = np.einsum("bj,bji->bi", d_feats, jac_in[:, :, : arch.n_data_wires])
    d_pre = d_angles * np.pi * (1.0 - t**2)
    g_enc_w = d_pre.T @ x
    g_enc_b = d_pre.sum(axis=0)
    return np.concatenate([g_enc_w.ravel(), g_enc_b, g_quantum, g_head_w.ravel(), g_head_b])


# ---------------------------------------------------------------------------
# optimizer and local training


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "AdamWState":
        return cls(np.zeros(dim), np.zeros(dim), 0)


def optimizer_step(
    params: ModelParams, gradient: np.ndarray, state: AdamWState, hyper: AdamWHyper
) -> tuple[ModelParams, AdamWState]:
    """One AdamW step (decoupled weight decay, bias-corrected moments)."""
    g = np.asarray(gradient, dtype=float)
    if g.shape != params.flat.shape or state.m.shape != g.shape:
        raise ShapeError("gradient / optimizer state dimension mismatch")
    if not np.all(np.isfinite(g)):
        raise NumericFault("non-finite gradient entries")
    step = state.step + 1
    m = hyper.beta1 * state.m + (1 - hyper.beta1) * g
    v = hyper.beta2 * state.v + (1 - hyper.beta2) * g * g
    m_hat = m / (1 - hyper.beta1**step)
    v_hat = v / (1 - hyper.beta2**step)
    theta = params.flat * (1 - hyper.lr * hyper.weight_decay)
    theta = theta - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return ModelParams(theta, params.arch), AdamWState(m, v, step)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 1
    batch_size: int = 32
    hyper: AdamWHyper = field(default_factory=AdamWHyper)
    shots: int | None = None


def local_train(
    params: ModelParams,
    data: Batch,
    circuit: CircuitTemplate,
    rng: np.random.Generator,
    settings: TrainSettings = TrainSettings(),
    loss_scale: float = 1.0,
) -> np.ndarray:
    """Train a private copy of ``params`` and return the delta ``theta_after - theta_before``.

    Minibatch order is reshuffled each epoch from ``rng``; the optimizer state
    starts fresh every call.
    """
    if settings.epochs < 1:
        raise ValueError("epochs must be >= 1")
    local = params.copy()
    state = AdamWState.zeros(local.flat.size)
    n = len(data)
    for _ in range(settings.epochs):
        order = rng.permutation(n)
        for start in range(0, n, settings.batch_size):
            mb = data.subset(order[start:start + settings.batch_size])
            grad = backward(mb, local, circuit, loss_scale, shots=settings.shots, rng=rng)
            local, state = optimizer_step(local, grad, state, settings.hyper)
    delta = local.flat - params.flat
    if not np.all(np.isfinite(delta)):
        raise NumericFault("non-finite local update")
    return delta


def predict(inputs: np.ndarray, params: ModelParams, circuit: CircuitTemplate, chunk: int = 2048) -> np.ndarray:
    out = [forward(inputs[i:i + chunk], params, circuit)[0] for i in range(0, len(inputs), chunk)]
    return np.concatenate(out, axis=0)


def evaluate(data: Batch, params: ModelParams, circuit: CircuitTemplate) -> tuple[float, float]:
    """``(accuracy in percent, mean cross-entropy)`` of ``params`` on ``data``."""
    logits = predict(data.inputs, params, circuit)
    acc = 100.0 * float(np.mean(np.argmax(logits, axis=1) == data.labels))
    return acc, mean_loss(logits, data.labels)
