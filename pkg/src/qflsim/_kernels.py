"""numba kernels for per-row circuit simulation.

A circuit is compiled into flat integer/float tables so the whole gate list can
run inside one jitted loop. Each row's statevector stays small (<= 2**16) and is
processed start-to-finish before moving on, which keeps it in cache.
"""

from __future__ import annotations

import numba
import numpy as np

# op codes
ONE_WIRE = 0
PERMUTE = 1
DIAGONAL = 2

# one-wire subkinds
SUB = {"RX": 0, "RY": 1, "RZ": 2, "PhaseGate": 3, "X": 4, "Z": 5, "H": 6}

# angle sources
CONST, PARAM, INPUT = 0, 1, 2


@numba.njit(cache=True)
def _apply_op(psi, n, code, sub, wire, angle, tidx, perms, diags, scratch):
    dim = psi.shape[0]
    if code == ONE_WIRE:
        c = np.cos(angle / 2.0)
        s = np.sin(angle / 2.0)
        if sub == 0:
            m00 = complex(c, 0.0); m01 = complex(0.0, -s); m10 = complex(0.0, -s); m11 = complex(c, 0.0)
        elif sub == 1:
            m00 = complex(c, 0.0); m01 = complex(-s, 0.0); m10 = complex(s, 0.0); m11 = complex(c, 0.0)
        elif sub == 2:
            m00 = complex(c, -s); m01 = 0j; m10 = 0j; m11 = complex(c, s)
        elif sub == 3:
            m00 = 1 + 0j; m01 = 0j; m10 = 0j; m11 = complex(np.cos(angle), np.sin(angle))
        elif sub == 4:
            m00 = 0j; m01 = 1 + 0j; m10 = 1 + 0j; m11 = 0j
        elif sub == 5:
            m00 = 1 + 0j; m01 = 0j; m10 = 0j; m11 = -1 + 0j
        else:
            h = 1.0 / np.sqrt(2.0)
            m00 = complex(h, 0.0); m01 = complex(h, 0.0); m10 = complex(h, 0.0); m11 = complex(-h, 0.0)
        stride = 1 << (n - 1 - wire)
        for hi in range(0, dim, 2 * stride):
            for base in range(hi, hi + stride):
                a0 = psi[base]
                a1 = psi[base + stride]
                psi[base] = m00 * a0 + m01 * a1
                psi[base + stride] = m10 * a0 + m11 * a1
    elif code == PERMUTE:
        perm = perms[tidx]
        for i in range(dim):
            scratch[i] = psi[perm[i]]
        for i in range(dim):
            psi[i] = scratch[i]
    else:
        diag = diags[tidx]
        for i in range(dim):
            psi[i] = psi[i] * diag[i]


@numba.njit(cache=True)
def _angle(src, slot, const, params_row, inputs_row):
    if src == 1:
        return params_row[slot]
    if src == 2:
        return inputs_row[slot]
    return const


@numba.njit(cache=True)
def simulate_rows(n, code, sub, wire, src, slot, const, tidx, perms, diags, params, inputs):
    rows = params.shape[0]
    dim = 1 << n
    out = np.zeros((rows, dim), dtype=np.complex128)
    scratch = np.empty(dim, dtype=np.complex128)
    for r in range(rows):
        psi = out[r]
        psi[0] = 1.0
        for g in range(code.shape[0]):
            a = _angle(src[g], slot[g], const[g], params[r], inputs[r])
            _apply_op(psi, n, code[g], sub[g], wire[g], a, tidx[g], perms, diags, scratch)
    return out


@numba.njit(cache=True)
def _zvals(psi, signs, out_row):
    for j in range(signs.shape[0]):
        acc = 0.0
        for i in range(psi.shape[0]):
            p = psi[i].real * psi[i].real + psi[i].imag * psi[i].imag
            acc += p * signs[j, i]
        out_row[j] = acc


@numba.njit(cache=True)
def shift_rows(n, code, sub, wire, src, slot, const, tidx, perms, diags, params, inputs, signs, shift, n_inputs_wrt):
    """Expectations and +/-shift expectations for every shiftable gate.

    Returns ``(values (B, O), plus_p, minus_p (B, O, P), plus_i, minus_i (B, O, I))``.
    The prefix up to each shifted gate is shared with the unshifted run.
    """
    rows = inputs.shape[0]
    n_obs = signs.shape[0]
    n_p = params.shape[0]
    dim = 1 << n
    values = np.zeros((rows, n_obs))
    plus_p = np.zeros((rows, n_obs, n_p))
    minus_p = np.zeros((rows, n_obs, n_p))
    plus_i = np.zeros((rows, n_obs, n_inputs_wrt))
    minus_i = np.zeros((rows, n_obs, n_inputs_wrt))
    psi = np.empty(dim, dtype=np.complex128)
    branch = np.empty(dim, dtype=np.complex128)
    scratch = np.empty(dim, dtype=np.complex128)
    tmp = np.empty(n_obs)
    n_ops = code.shape[0]
    for r in range(rows):
        psi[:] = 0.0
        psi[0] = 1.0
        inp = inputs[r]
        for g in range(n_ops):
            a = _angle(src[g], slot[g], const[g], params, inp)
            shiftable = (src[g] == 1) or (src[g] == 2 and slot[g] < n_inputs_wrt)
            if shiftable:
                for sgn in range(2):
                    delta = shift if sgn == 0 else -shift
                    branch[:] = psi
                    _apply_op(branch, n, code[g], sub[g], wire[g], a + delta, tidx[g], perms, diags, scratch)
                    for h in range(g + 1, n_ops):
                        ah = _angle(src[h], slot[h], const[h], params, inp)
                        _apply_op(branch, n, code[h], sub[h], wire[h], ah, tidx[h], perms, diags, scratch)
                    _zvals(branch, signs, tmp)
                    for j in range(n_obs):
                        if src[g] == 1:
                            if sgn == 0:
                                plus_p[r, j, slot[g]] = tmp[j]
                            else:
                                minus_p[r, j, slot[g]] = tmp[j]
                        else:
                            if sgn == 0:
                                plus_i[r, j, slot[g]] = tmp[j]
                            else:
                                minus_i[r, j, slot[g]] = tmp[j]
            _apply_op(psi, n, code[g], sub[g], wire[g], a, tidx[g], perms, diags, scratch)
        _zvals(psi, signs, tmp)
        for j in range(n_obs):
            values[r, j] = tmp[j]
    return values, plus_p, minus_p, plus_i, minus_i
