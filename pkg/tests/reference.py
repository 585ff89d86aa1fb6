"""Independent brute-force reference for quantum behavior.

Deliberately implemented on a different route than the package: full 2^n x 2^n
matrices assembled with np.kron and explicit basis-permutation matrices, and
probability sums done with plain Python loops over basis indices.  Tests
compare the package's tensor/permute/apply path against this one; the two
implementations must never share code.
"""

from __future__ import annotations

from math import sqrt

import numpy as np

# Literal gate matrices, redefined here on purpose.
R = 1.0 / sqrt(2.0)
REF_GATES = {
    "I": np.array([[1, 0], [0, 1]], dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
    "H": np.array([[R, R], [R, -R]], dtype=complex),
    "S": np.array([[1, 0], [0, 1j]], dtype=complex),
    "T": np.array([[1, 0], [0, np.exp(1j * np.pi / 4)]], dtype=complex),
    "CNOT": np.array([[1, 0, 0, 0],
                      [0, 1, 0, 0],
                      [0, 0, 0, 1],
                      [0, 0, 1, 0]], dtype=complex),
    "SWAP": np.array([[1, 0, 0, 0],
                      [0, 0, 1, 0],
                      [0, 1, 0, 0],
                      [0, 0, 0, 1]], dtype=complex),
}


def ref_perm_matrix(width: int, order: list[int]) -> np.ndarray:
    """Permutation matrix sending wire order[i] of the input to wire i.

    Row index new basis, column index old basis; bit 0 is the most
    significant bit of an index.
    """
    dim = 2 ** width
    p = np.zeros((dim, dim), dtype=complex)
    for old in range(dim):
        bits = [(old >> (width - 1 - w)) & 1 for w in range(width)]
        new_bits = [bits[order[i]] for i in range(width)]
        new = 0
        for b in new_bits:
            new = (new << 1) | b
        p[new, old] = 1.0
    return p


def ref_lift(gate: np.ndarray, wires: tuple[int, ...], width: int) -> np.ndarray:
    """Embed a k-wire gate into a width-wire unitary via permutation conjugation."""
    k = len(wires)
    rest = [w for w in range(width) if w not in wires]
    order = list(wires) + rest
    perm = ref_perm_matrix(width, order)
    block = gate
    for _ in range(width - k):
        block = np.kron(block, REF_GATES["I"])
    return perm.conj().T @ block @ perm


def ref_unitary(width: int, gates: list[tuple[str, tuple[int, ...]]]) -> np.ndarray:
    u = np.eye(2 ** width, dtype=complex)
    for name, wires in gates:
        u = ref_lift(REF_GATES[name], tuple(wires), width) @ u
    return u


def ref_run(amps: np.ndarray, width: int,
            gates: list[tuple[str, tuple[int, ...]]]) -> np.ndarray:
    return ref_unitary(width, gates) @ np.asarray(amps, dtype=complex)


def ref_outcome_probs(amps: np.ndarray, width: int,
                      wires: tuple[int, ...]) -> list[float]:
    """Probability of each outcome bitstring, lexicographic order, loop-summed."""
    m = len(wires)
    probs = [0.0] * (2 ** m)
    for idx, amp in enumerate(amps):
        bits = [(idx >> (width - 1 - w)) & 1 for w in range(width)]
        out = 0
        for w in wires:
            out = (out << 1) | bits[w]
        probs[out] += abs(amp) ** 2
    return probs


def ref_project(amps: np.ndarray, width: int, wires: tuple[int, ...],
                outcome_bits: tuple[int, ...]) -> np.ndarray:
    """Post-measurement state over the unmeasured wires (original order)."""
    keep = [w for w in range(width) if w not in wires]
    want = dict(zip(wires, outcome_bits))
    residual = np.zeros(2 ** len(keep), dtype=complex)
    for idx, amp in enumerate(amps):
        bits = [(idx >> (width - 1 - w)) & 1 for w in range(width)]
        if any(bits[w] != b for w, b in want.items()):
            continue
        sub = 0
        for w in keep:
            sub = (sub << 1) | bits[w]
        residual[sub] += amp
    norm = sqrt(sum(abs(a) ** 2 for a in residual))
    return residual / norm


def ref_fidelity(a: np.ndarray, b: np.ndarray) -> float:
    return abs(np.vdot(np.asarray(a), np.asarray(b))) ** 2


def ref_bell() -> np.ndarray:
    return np.array([R, 0, 0, R], dtype=complex)


def outcome_sample(probs: list[float], outcome_index: int) -> float:
    """A prob_sample that lands in the middle of the given outcome's bin."""
    before = sum(probs[:outcome_index])
    return before + probs[outcome_index] / 2.0
