"""Ket-vector quantum math for small register sizes.

Conventions, fixed for the whole package:

* Wire 0 is the most significant bit of a basis index (big-endian), so the
  two-qubit basis order is |00>, |01>, |10>, |11> and tensoring appends less
  significant wires on the right.
* A ``Ket`` owns its keys: each qubit key appears in exactly one live ket.
  Entanglement is simply co-residence in a ket; no factorization is ever
  attempted, so once states merge they stay merged until measurement.
* Measurement outcomes are selected by lexicographic cumulative inversion of
  the outcome distribution against a caller-supplied uniform sample, never by
  an internal RNG.  That keeps forwarded execution (another process applying
  the circuit) bit-identical to local execution.

All amplitude arithmetic is numpy complex128; the exact same code path runs
locally and on the state server, which is what makes results reproducible at
the bit level across partitions.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from math import sqrt

import numpy as np

_H = 1.0 / sqrt(2.0)

GATES: dict[str, np.ndarray] = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
    "H": np.array([[_H, _H], [_H, -_H]], dtype=complex),
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

GATE_WIRES = {name: int(np.log2(m.shape[0])) for name, m in GATES.items()}

NORM_TOL = 1e-9


def bell_amps() -> np.ndarray:
    """Amplitudes of (|00> + |11>)/sqrt(2)."""
    return np.array([_H, 0, 0, _H], dtype=complex)


class NotNormalized(ValueError):
    """Amplitude vector norm differs from 1 by more than the tolerance."""


class Ket:
    """An amplitude vector over an ordered tuple of qubit keys.

    Attributes:
        keys: qubit keys, one per wire, order matching the amplitude index
            bits (keys[0] is the most significant bit).
        amps: complex128 vector of length 2**len(keys).
    """

    __slots__ = ("keys", "amps")

    def __init__(self, keys: tuple[str, ...], amps: np.ndarray) -> None:
        amps = np.asarray(amps, dtype=complex)
        if amps.shape != (2 ** len(keys),):
            raise ValueError(f"amplitude vector of shape {amps.shape} does not "
                             f"fit {len(keys)} qubit(s)")
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate keys in {keys}")
        norm = np.linalg.norm(amps)
        if abs(norm - 1.0) > NORM_TOL:
            raise NotNormalized(f"norm {norm!r} out of tolerance {NORM_TOL}")
        self.keys = tuple(keys)
        self.amps = amps

    @property
    def num_qubits(self) -> int:
        return len(self.keys)

    def copy(self) -> "Ket":
        return Ket(self.keys, self.amps.copy())

    def __repr__(self) -> str:
        return f"Ket(keys={self.keys}, dim={len(self.amps)})"


class Circuit:
    """A gate list over ``width`` wires plus an optional set of measured wires.

    Gates are (name, wires) pairs applied in order; measured wires are read
    out after all gates.  Instances are immutable and hashable by fingerprint
    so compiled unitaries can be cached.
    """

    __slots__ = ("width", "gates", "measured", "_fp")

    def __init__(self, width: int,
                 gates: list[tuple[str, tuple[int, ...]]] | None = None,
                 measured: tuple[int, ...] = ()) -> None:
        if width < 1:
            raise ValueError("circuit width must be >= 1")
        gates = [(name, tuple(wires)) for name, wires in (gates or [])]
        for name, wires in gates:
            if name not in GATES:
                raise ValueError(f"unknown gate {name!r}")
            if len(wires) != GATE_WIRES[name]:
                raise ValueError(f"gate {name} takes {GATE_WIRES[name]} wire(s), "
                                 f"got {wires}")
            if len(set(wires)) != len(wires):
                raise ValueError(f"gate {name} wires must be distinct: {wires}")
            if any(not 0 <= w < width for w in wires):
                raise ValueError(f"gate {name} wires {wires} out of range for "
                                 f"width {width}")
        measured = tuple(measured)
        if len(set(measured)) != len(measured):
            raise ValueError(f"measured wires must be distinct: {measured}")
        if any(not 0 <= w < width for w in measured):
            raise ValueError(f"measured wires {measured} out of range")
        self.width = width
        self.gates = tuple(gates)
        self.measured = measured
        self._fp = f"{width}|{self.gates!r}|{measured!r}"

    @property
    def fingerprint(self) -> str:
        return self._fp

    def as_dict(self) -> dict:
        return {"width": self.width,
                "gates": [[name, list(wires)] for name, wires in self.gates],
                "measured": list(self.measured)}

    @classmethod
    def from_dict(cls, data: dict) -> "Circuit":
        return cls(int(data["width"]),
                   [(g[0], tuple(g[1])) for g in data["gates"]],
                   tuple(data["measured"]))

    def __repr__(self) -> str:
        return f"Circuit(width={self.width}, gates={list(self.gates)}, measured={list(self.measured)})"


class UnitaryMemo:
    """LRU cache of compiled circuit unitaries, keyed by fingerprint.

    Thread-safe; cached arrays are marked read-only so a shared instance can
    be handed out without copies.  Presence or absence of the memo never
    changes results, only speed.
    """

    def __init__(self, capacity: int = 1024) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()
        self._entries: OrderedDict[str, np.ndarray] = OrderedDict()

    def get(self, circuit: Circuit) -> np.ndarray:
        fp = circuit.fingerprint
        with self._lock:
            cached = self._entries.get(fp)
            if cached is not None:
                self._entries.move_to_end(fp)
                self.hits += 1
                return cached
            self.misses += 1
        built = _build_unitary(circuit)
        built.flags.writeable = False
        with self._lock:
            self._entries[fp] = built
            self._entries.move_to_end(fp)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
        return built

    def __len__(self) -> int:
        return len(self._entries)


def _apply_gate_tensor(block: np.ndarray, gate: np.ndarray,
                       wires: tuple[int, ...], width: int) -> np.ndarray:
    """Apply a gate to the first ``width`` tensor axes of ``block``."""
    k = len(wires)
    gate_t = gate.reshape((2,) * (2 * k))
    moved = np.tensordot(gate_t, block, axes=(tuple(range(k, 2 * k)), wires))
    return np.moveaxis(moved, tuple(range(k)), wires)


def _build_unitary(circuit: Circuit) -> np.ndarray:
    w = circuit.width
    dim = 2 ** w
    u = np.eye(dim, dtype=complex).reshape((2,) * w + (dim,))
    for name, wires in circuit.gates:
        u = _apply_gate_tensor(u, GATES[name], wires, w)
    return np.ascontiguousarray(u.reshape(dim, dim))


def circuit_unitary(circuit: Circuit, memo: UnitaryMemo | None = None) -> np.ndarray:
    """The 2^w x 2^w unitary of the circuit's gate list (measurement excluded)."""
    if memo is not None:
        return memo.get(circuit)
    return _build_unitary(circuit)


def tensor(kets: list[Ket]) -> Ket:
    """Kronecker product of kets, keys concatenated left to right."""
    if not kets:
        raise ValueError("tensor of zero states")
    keys: list[str] = []
    for ket in kets:
        keys.extend(ket.keys)
    if len(set(keys)) != len(keys):
        raise ValueError("tensor operands share keys")
    amps = kets[0].amps
    for ket in kets[1:]:
        amps = np.kron(amps, ket.amps)
    return Ket(tuple(keys), amps)


def permute(ket: Ket, new_keys: tuple[str, ...]) -> Ket:
    """Reorder a ket's wires to the given key order."""
    if tuple(sorted(new_keys)) != tuple(sorted(ket.keys)):
        raise ValueError(f"{new_keys} is not a permutation of {ket.keys}")
    if tuple(new_keys) == ket.keys:
        return ket
    n = ket.num_qubits
    pos = {key: i for i, key in enumerate(ket.keys)}
    axes = tuple(pos[key] for key in new_keys)
    amps = ket.amps.reshape((2,) * n).transpose(axes).reshape(-1)
    return Ket(tuple(new_keys), np.ascontiguousarray(amps))


def measure(ket: Ket, wires: tuple[int, ...], prob_sample: float
            ) -> tuple[tuple[int, ...], list[Ket]]:
    """Project the given wires onto a computational-basis outcome.

    The outcome is chosen by walking outcome bitstrings in lexicographic
    order and picking the first whose cumulative probability exceeds
    ``prob_sample`` (bit i of the string belongs to wires[i]).

    Returns:
        (outcome bits, new states): one single-qubit basis ket per measured
        wire, in ``wires`` order, followed by the renormalized residual ket
        over the unmeasured keys (original order) if any remain.
    """
    if not wires:
        raise ValueError("measure needs at least one wire")
    if not 0.0 <= prob_sample < 1.0:
        raise ValueError(f"prob_sample must be in [0, 1), got {prob_sample!r}")
    n = ket.num_qubits
    m = len(wires)
    probs_t = (np.abs(ket.amps) ** 2).reshape((2,) * n)
    keep = tuple(i for i in range(n) if i not in wires)
    # Axis order: measured wires (in argument order) first, then the rest.
    probs = probs_t.transpose(wires + keep).reshape(2 ** m, -1).sum(axis=1)
    cumulative = np.cumsum(probs)
    outcome_index = int(np.searchsorted(cumulative, prob_sample, side="right"))
    outcome_index = min(outcome_index, 2 ** m - 1)
    bits = tuple((outcome_index >> (m - 1 - i)) & 1 for i in range(m))

    states = [Ket((ket.keys[w],),
                  np.array([1.0, 0.0], dtype=complex) if b == 0 else
                  np.array([0.0, 1.0], dtype=complex))
              for w, b in zip(wires, bits)]

    if keep:
        index: list[object] = [slice(None)] * n
        for w, b in zip(wires, bits):
            index[w] = b
        residual = ket.amps.reshape((2,) * n)[tuple(index)].reshape(-1)
        norm = np.linalg.norm(residual)
        if norm <= 0.0:
            raise ValueError("selected outcome has zero probability")
        residual = np.ascontiguousarray(residual / norm)
        states.append(Ket(tuple(ket.keys[i] for i in keep), residual))
    return bits, states


def apply(states: list[Ket], circuit: Circuit, keys: list[str],
          prob_sample: float | None = None, memo: UnitaryMemo | None = None
          ) -> tuple[str | None, list[Ket]]:
    """Run a circuit over the given keys, merging whatever states they span.

    ``keys[i]`` is wired to circuit wire ``i``.  All states containing those
    keys are tensored together (first-appearance order), permuted so circuit
    wires come first, transformed, and measured if the circuit measures.
    Entangled partners of the named keys ride along as spectators.

    Returns:
        (outcome, new states).  ``outcome`` is the measured bitstring (e.g.
        "01") or None for a measurement-free circuit.  New states are the
        measured single-qubit kets (circuit.measured order) followed by the
        residual joint ket, or just the transformed joint ket when nothing
        was measured.
    """
    if len(keys) != circuit.width:
        raise ValueError(f"{len(keys)} key(s) for a width-{circuit.width} circuit")
    if len(set(keys)) != len(keys):
        raise ValueError(f"duplicate keys: {keys}")
    if circuit.measured and prob_sample is None:
        raise ValueError("measuring circuit needs a prob_sample")

    by_key: dict[str, Ket] = {}
    for state in states:
        for key in state.keys:
            if key in by_key:
                raise ValueError(f"key {key!r} appears in more than one state")
            by_key[key] = state

    parents: list[Ket] = []
    seen: set[int] = set()
    for key in keys:
        state = by_key.get(key)
        if state is None:
            raise KeyError(f"no state holds key {key!r}")
        if id(state) not in seen:
            seen.add(id(state))
            parents.append(state)

    joint = parents[0] if len(parents) == 1 else tensor(parents)
    spectators = tuple(k for k in joint.keys if k not in set(keys))
    joint = permute(joint, tuple(keys) + spectators)

    w = circuit.width
    n = joint.num_qubits
    unitary = circuit_unitary(circuit, memo)
    if n == w:
        amps = unitary @ joint.amps
    else:
        block = joint.amps.reshape((2,) * w + (2 ** (n - w),))
        amps = np.tensordot(unitary.reshape((2,) * (2 * w)), block,
                            axes=(tuple(range(w, 2 * w)), tuple(range(w))))
        amps = amps.reshape(-1)
    transformed = Ket(joint.keys, np.ascontiguousarray(amps))

    if not circuit.measured:
        return None, [transformed]
    bits, new_states = measure(transformed, circuit.measured, prob_sample)
    return "".join(str(b) for b in bits), new_states
