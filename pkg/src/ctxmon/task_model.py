"""Gesture vocabularies, the per-gesture error rubric and task Markov chains."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

N_GESTURE_CLASSES = 15  # classifier output width; gesture ids index it directly

GESTURE_NAMES = {
    1: "Reaching for needle with right hand",
    2: "Positioning needle",
    3: "Pushing needle through the tissue",
    4: "Transferring needle from left to right",
    5: "Moving to center with needle in grip",
    6: "Pulling suture with left hand",
    8: "Orienting needle",
    9: "Using right hand to help tighten suture",
    10: "Loosening more suture",
    11: "Dropping suture and moving to end points",
    12: "Reaching for needle with left hand",
}


@dataclass(frozen=True)
class ErrorRubricEntry:
    gesture_id: int
    errors: tuple[str, ...]
    fault_variables: tuple[str, ...]


RUBRIC = {
    1: ErrorRubricEntry(1, ("More than one attempt to reach",), ("rotation",)),
    2: ErrorRubricEntry(2, ("More than one attempt to position",), ("rotation",)),
    3: ErrorRubricEntry(
        3,
        ("Driving with more than one movement", "Not removing the needle along its curve"),
        ("cartesian_position",),
    ),
    4: ErrorRubricEntry(
        4,
        ("Unintentional Needle Drop", "Needle held on needle holder not in view at all time"),
        ("cartesian_position",),
    ),
    5: ErrorRubricEntry(5, ("Unintentional Needle Drop",), ("grasper_angle",)),
    6: ErrorRubricEntry(
        6,
        ("Needle held on needle holder not in view at all times", "Unintentional Needle Drop"),
        ("cartesian_position",),
    ),
    8: ErrorRubricEntry(
        8,
        ("Uses tissue/ instrument for stability", "More than one attempt at orienting"),
        ("rotation",),
    ),
    9: ErrorRubricEntry(9, ("Knot left loose",), ("pressure",)),
    11: ErrorRubricEntry(11, ("Failure to dropoff",), ("grasper_angle",)),
    12: ErrorRubricEntry(12, ("More than one attempt to reach",), ("cartesian_position",)),
}


@dataclass(frozen=True)
class GestureVocabulary:
    ids: tuple[int, ...]
    name: str = ""

    def __contains__(self, gid):
        return gid in self.ids

    def __len__(self):
        return len(self.ids)

    def index(self, gid) -> int:
        return self.ids.index(gid)

    def describe(self, gid) -> str:
        return GESTURE_NAMES.get(gid, f"G{gid}")

    def rubric(self, gid) -> ErrorRubricEntry | None:
        return RUBRIC.get(gid)


SUTURING = GestureVocabulary((1, 2, 3, 4, 5, 6, 8, 9, 10, 11), "suturing")
BLOCK_TRANSFER_ORDER = (12, 2, 5, 6, 11)
BLOCK_TRANSFER = GestureVocabulary(BLOCK_TRANSFER_ORDER, "block_transfer")


class MarkovError(ValueError):
    pass


@dataclass
class MarkovChain:
    states: GestureVocabulary
    initial: np.ndarray
    transitions: np.ndarray

    def __post_init__(self):
        k = len(self.states)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        if self.initial.shape != (k,) or self.transitions.shape != (k, k):
            raise MarkovError("chain shapes do not match the vocabulary")
        if (self.transitions < 0).any() or (self.initial < 0).any():
            raise MarkovError("negative probability")
        if not np.allclose(self.transitions.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise MarkovError("transition rows must sum to 1")
        if not abs(self.initial.sum() - 1.0) <= 1e-9:
            raise MarkovError("initial distribution must sum to 1")

    def p(self, a: int, b: int) -> float:
        return float(self.transitions[self.states.index(a), self.states.index(b)])

    def is_terminal(self, gid: int) -> bool:
        i = self.states.index(gid)
        return self.transitions[i, i] == 1.0

    def to_dict(self):
        return {
            "states": list(self.states.ids),
            "name": self.states.name,
            "initial": self.initial.tolist(),
            "transitions": self.transitions.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(GestureVocabulary(tuple(d["states"]), d.get("name", "")), d["initial"], d["transitions"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def estimate_markov(sequences: Sequence[Sequence[int]], states: GestureVocabulary | None = None,
                    smoothing: float = 0.0) -> MarkovChain:
    """Maximum-likelihood (optionally additively smoothed) chain from gesture sequences.

    Rows with no observed outgoing transitions become self-absorbing when
    ``smoothing`` is 0.
    """
    sequences = [list(s) for s in sequences if len(s)]
    if not sequences:
        raise MarkovError("no gesture sequences to estimate from")
    if states is None:
        states = GestureVocabulary(tuple(sorted({g for s in sequences for g in s})))
    k = len(states)
    counts = np.zeros((k, k))
    first = np.zeros(k)
    for seq in sequences:
        for g in seq:
            if g not in states:
                raise MarkovError(f"gesture G{g} not in vocabulary")
        first[states.index(seq[0])] += 1
        for a, b in zip(seq[:-1], seq[1:]):
            counts[states.index(a), states.index(b)] += 1
    counts += smoothing
    trans = np.zeros((k, k))
    for i in range(k):
        total = counts[i].sum()
        if total > 0:
            trans[i] = counts[i] / total
        else:
            trans[i, i] = 1.0
    return MarkovChain(states, first / first.sum(), trans)


def sample_sequence(chain: MarkovChain, seed: int, max_len: int = 100) -> list[int]:
    rng = np.random.default_rng(seed)
    ids = chain.states.ids
    i = int(rng.choice(len(ids), p=chain.initial))
    out = [ids[i]]
    while len(out) < max_len and chain.transitions[i, i] != 1.0:
        i = int(rng.choice(len(ids), p=chain.transitions[i]))
        out.append(ids[i])
    return out


def block_transfer_chain(order: Sequence[int] = BLOCK_TRANSFER_ORDER) -> MarkovChain:
    vocab = GestureVocabulary(tuple(order), "block_transfer")
    k = len(order)
    trans = np.zeros((k, k))
    for i in range(k - 1):
        trans[i, i + 1] = 1.0
    trans[-1, -1] = 1.0
    initial = np.zeros(k)
    initial[0] = 1.0
    return MarkovChain(vocab, initial, trans)


# Only G4->G10 (0.13) and G6->G10 (0.01) are known; the other rows are a
# plausible dry-lab suturing flow ending in the absorbing G11.
_SUTURING_ROWS = {
    1: {5: 0.55, 2: 0.30, 8: 0.15},
    2: {3: 0.95, 8: 0.05},
    3: {6: 0.90, 2: 0.05, 8: 0.05},
    4: {2: 0.67, 8: 0.15, 10: 0.13, 11: 0.05},
    5: {8: 0.40, 2: 0.55, 3: 0.05},
    6: {4: 0.80, 9: 0.09, 11: 0.10, 10: 0.01},
    8: {2: 0.90, 3: 0.10},
    9: {4: 0.50, 6: 0.30, 11: 0.20},
    10: {4: 0.50, 11: 0.50},
    11: {11: 1.0},
}


def suturing_chain() -> MarkovChain:
    vocab = SUTURING
    k = len(vocab)
    trans = np.zeros((k, k))
    for a, row in _SUTURING_ROWS.items():
        for b, p in row.items():
            trans[vocab.index(a), vocab.index(b)] = p
    initial = np.zeros(k)
    initial[vocab.index(1)] = 1.0
    return MarkovChain(vocab, initial, trans)
