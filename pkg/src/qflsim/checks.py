"""Quick invariant suite behind the ``check`` CLI verb.

Each check returns ``(name, passed, detail)``. The pytest suite covers the same
ground more thoroughly; this exists so an installed copy can self-test.
"""

from __future__ import annotations

import numpy as np

from . import qsim
from .aggregators import ClientUpdate, foolsgold_weights, krum_selection
from .analysis import QuadraticFederation, lemma1_check, proposition1_check
from .crafting import CraftingConfig, HistoryBuffer, adaptive_intensity, craft, principal_directions
from .qsim import CircuitTemplate, Gate


def random_circuit(n: int, depth: int, rng: np.random.Generator) -> CircuitTemplate:
    gates = []
    for _ in range(depth):
        for w in range(n):
            gates.append(Gate(str(rng.choice(["RX", "RY", "RZ"])), (w,), angle=float(rng.uniform(0, 2 * np.pi))))
        for w in range(n - 1):
            gates.append(Gate("CNOT", (w, w + 1)))
    return CircuitTemplate(n, tuple(gates))


def check_unitarity(cases: int, rng) -> tuple[str, bool, str]:
    worst = 0.0
    for _ in range(cases):
        u = qsim.unitary(random_circuit(int(rng.integers(1, 5)), 3, rng))
        worst = max(worst, float(np.abs(u.conj().T @ u - np.eye(u.shape[0])).max()))
    return "unitarity", worst <= 1e-10, f"max |U^dag U - I| = {worst:.2e}"


def check_x_conjugation(cases: int, rng) -> tuple[str, bool, str]:
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 6))
        circ = random_circuit(n, 2, rng)
        r = int(rng.integers(n))
        before = qsim.apply_circuit(qsim.new_state(n), circ)
        after = qsim.apply_gate(before, Gate("X", (r,)))
        for j in range(n):
            want = -1 if j == r else 1
            worst = max(worst, abs(qsim.expectation(after, qsim.Observable.z(j))
                                   - want * qsim.expectation(before, qsim.Observable.z(j))))
    return "x-conjugation", worst <= 1e-10, f"max error {worst:.2e}"


def check_qft_roundtrip(cases: int, rng) -> tuple[str, bool, str]:
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 6))
        state = qsim.apply_circuit(qsim.new_state(n), random_circuit(n, 2, rng))
        wires = tuple(range(n))
        back = qsim.apply_gate(qsim.apply_gate(state, Gate("QFT", wires)), Gate("IQFT", wires))
        worst = max(worst, float(np.abs(back.amps - state.amps).max()))
    return "qft-roundtrip", worst <= 1e-10, f"max error {worst:.2e}"


def check_krum(cases: int, rng) -> tuple[str, bool, str]:
    bad = 0
    for _ in range(cases):
        n = int(rng.integers(3, 9))
        f = int(rng.integers(0, n - 2))
        deltas = rng.normal(size=(n, 3))
        d2 = ((deltas[:, None] - deltas[None]) ** 2).sum(-1)
        scores = [sum(sorted(np.delete(d2[i], i))[: n - f - 2]) for i in range(n)]
        want = int(np.argmin(scores))
        got = krum_selection([ClientUpdate(i, 0, deltas[i]) for i in range(n)], f)[0]
        bad += got != want
    return "krum-bruteforce", bad == 0, f"{bad} mismatches in {cases}"


def check_foolsgold() -> tuple[str, bool, str]:
    h = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    w = foolsgold_weights(h)
    share = float((w[0] + w[1]) / max(w.sum(), 1e-300))
    return "foolsgold-duplicates", share < 0.01, f"duplicate share {share:.3g}"


def check_lemma1(cases: int, rng) -> tuple[str, bool, str]:
    bad = 0
    for _ in range(cases):
        k = int(rng.integers(2, 21))
        m = int(rng.integers(1, k // 2 + 1))
        r = float(rng.uniform(0.1, 3))
        deltas = [rng.normal(size=5) * rng.uniform(0.1, 10) for _ in range(m)]
        _, _, ok = lemma1_check(deltas, r, m / k, [1.0 / k] * m)
        bad += not ok
    return "lemma1-bound", bad == 0, f"{bad} violations in {cases}"


def check_recursion(seed: int) -> tuple[str, bool, str]:
    fed = QuadraticFederation(seed=seed)
    dev, b = fed.run(50)
    rep = proposition1_check(dev, b, fed.L, fed.beta)
    return "deviation-recursion", rep.violations == 0, f"max residual {rep.max_residual:.3e}"


def check_crafting(cases: int, rng) -> tuple[str, bool, str]:
    worst_orth, eps_bad, sparse_bad = 0.0, 0, 0
    cfg = CraftingConfig()
    for _ in range(cases):
        d = int(rng.integers(8, 40))
        buf = HistoryBuffer(cfg.window)
        for _ in range(int(rng.integers(2, 11))):
            buf.push(rng.normal(size=d))
        raw = rng.normal(size=d) * rng.uniform(0.1, 5)
        trace: dict = {}
        out = craft(raw, buf, cfg, rng, trace)
        v = principal_directions(buf, cfg.top_k)
        if v.size:
            worst_orth = max(worst_orth, float(np.abs(v @ trace["u_perp"]).max()))
        _, eps = adaptive_intensity(buf, raw, cfg)
        eps_bad += not cfg.eps_min <= eps <= cfg.eps_max
        sparse_bad += np.mean(out == 0) < cfg.sparsity - 1.0 / d
    ok = worst_orth <= 1e-8 and eps_bad == 0 and sparse_bad == 0
    return "crafting", ok, f"orthogonality {worst_orth:.1e}, eps violations {eps_bad}, sparsity violations {sparse_bad}"


def run_checks(cases: int = 100, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    return [
        check_unitarity(cases, rng),
        check_x_conjugation(cases, rng),
        check_qft_roundtrip(cases, rng),
        check_krum(cases, rng),
        check_foolsgold(),
        check_lemma1(cases, rng),
        check_recursion(seed),
        check_crafting(cases, rng),
    ]

