"""Category coverage along walks and a Monte-Carlo check of its drift identity.

Along one walk, coverage C_t is the number of distinct categories touched by
the visited items. Its expected one-step increment is sum_j P(j) * dC(j), so
E[C_T] - E[C_0] must equal the expected sum of those per-step predictions.
The verifier records both sides on instrumented walks and compares them.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataio import CategoryIndex
from .mrw import WalkEngine, WalkState, WalkStep

_STREAM = zlib.crc32(b"divtheory")


class DiversityInvariantError(AssertionError):
    """A realized coverage trace decreased; this is a bug, not noise."""


def covered_categories(path: Iterable[int], categories: CategoryIndex) -> set[int]:
    out: set[int] = set()
    for node in path:
        out.update(categories.categories_of(node))
    return out


def diversity_gain(candidate: int, path: Iterable[int], categories: CategoryIndex) -> int:
    """Number of categories of ``candidate`` not yet covered by ``path``."""
    return len(set(categories.categories_of(candidate)) - covered_categories(path, categories))


def expected_gain(probabilities: Sequence[float], gains: Sequence[float]) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    g = np.asarray(gains, dtype=np.float64)
    if p.size == 0:
        return 0.0
    return float(np.dot(p, g))


@dataclass
class Path:
    nodes: list[int]
    categories: CategoryIndex
    covered: set[int] = field(init=False)

    def __post_init__(self):
        self.covered = covered_categories(self.nodes, self.categories)

    def extend(self, node: int) -> int:
        gain = len(set(self.categories.categories_of(node)) - self.covered)
        self.nodes.append(node)
        self.covered.update(self.categories.categories_of(node))
        return gain

    @property
    def coverage(self) -> int:
        return len(self.covered)


@dataclass
class DiversityTrace:
    c_values: list[int]
    predicted: list[float]
    c_star: list[int]
    predicted_star: list[float]

    @property
    def realized_gain(self) -> int:
        return self.c_values[-1] - self.c_values[0]

    @property
    def predicted_gain(self) -> float:
        return float(sum(self.predicted))


class TraceRecorder:
    """Walk hook that turns step snapshots into a coverage trace.

    Two accountings run side by side: full category sets of visited items, and
    the representing category each item was drawn under (the cap's view).
    """

    def __init__(self, categories: CategoryIndex):
        self.categories = categories
        self.traces: list[DiversityTrace] = []
        self._path: Path | None = None
        self._star: set[int] = set()
        self._trace: DiversityTrace | None = None

    def __call__(self, step: WalkStep) -> None:
        if self._path is None or step.step == 0:
            self._open(step.path)
        path = self._path
        if tuple(path.nodes) != step.path:
            raise DiversityInvariantError("snapshot path diverged from recorded path")
        gains = [len(set(self.categories.categories_of(c.item)) - path.covered) for c in step.candidates]
        gains_star = [0 if c.category in self._star else 1 for c in step.candidates]
        self._trace.predicted.append(expected_gain(step.probabilities, gains))
        self._trace.predicted_star.append(expected_gain(step.probabilities, gains_star))
        if step.chosen is None:
            return
        chosen = next(c for c in step.candidates if c.item == step.chosen)
        before = path.coverage
        path.extend(step.chosen)
        self._star.add(chosen.category)
        if path.coverage < before:
            raise DiversityInvariantError("coverage decreased along a path")
        self._trace.c_values.append(path.coverage)
        self._trace.c_star.append(len(self._star))

    def _open(self, start: Sequence[int]) -> None:
        self._close()
        self._path = Path(list(start), self.categories)
        self._star = set(self._path.covered)
        c0 = self._path.coverage
        self._trace = DiversityTrace([c0], [], [c0], [])

    def _close(self) -> None:
        if self._trace is not None:
            self.traces.append(self._trace)
        self._trace = None
        self._path = None

    def finish(self) -> None:
        self._close()


@dataclass
class DiversityReport:
    trials: int
    mean_c0: float
    mean_ct: float
    mean_predicted_gain: float
    z_score: float
    passed: bool
    monotone: bool
    mean_ct_star: float = float("nan")
    mean_predicted_gain_star: float = float("nan")
    z_score_star: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "mean_c0": self.mean_c0,
            "mean_ct": self.mean_ct,
            "mean_predicted_gain": self.mean_predicted_gain,
            "z_score": self.z_score,
            "pass": self.passed,
            "monotone": self.monotone,
            "representing_category": {
                "mean_ct": self.mean_ct_star,
                "mean_predicted_gain": self.mean_predicted_gain_star,
                "z_score": self.z_score_star,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _z(diff: np.ndarray) -> float:
    if diff.size < 2:
        return 0.0
    sd = diff.std(ddof=1)
    mean = diff.mean()
    if sd == 0:
        return 0.0 if abs(mean) < 1e-12 else math.copysign(math.inf, mean)
    return float(mean / (sd / math.sqrt(diff.size)))


def run_trials(engine: WalkEngine, num_trials: int, seed: int = 0) -> list[DiversityTrace]:
    """One instrumented single-round walk per trial, users taken round-robin."""
    eligible = [u for u in range(engine.dataset.num_users) if engine.strong_items(u)[0].size]
    recorder = TraceRecorder(engine.categories)
    if not eligible:
        return []
    for k in range(num_trials):
        user = eligible[k % len(eligible)]
        rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM, k]))
        # max_walk_length >= 1 guarantees a step-0 snapshot, which opens the trace
        engine.walk_user(user, hook=recorder, state=WalkState(), rng=rng, rounds=1)
        recorder.finish()
    return recorder.traces


def verify_diversity_identities(engine: WalkEngine, num_trials: int = 10_000, seed: int = 0,
                                z_threshold: float = 3.0) -> DiversityReport:
    traces = run_trials(engine, num_trials, seed)
    monotone = all(all(b >= a for a, b in zip(t.c_values, t.c_values[1:])) for t in traces)
    if not monotone:
        raise DiversityInvariantError("coverage trace decreased")
    if not traces:
        return DiversityReport(0, 0.0, 0.0, 0.0, 0.0, True, True, 0.0, 0.0, 0.0)
    c0 = np.array([t.c_values[0] for t in traces], dtype=np.float64)
    ct = np.array([t.c_values[-1] for t in traces], dtype=np.float64)
    pred = np.array([t.predicted_gain for t in traces])
    ct_s = np.array([t.c_star[-1] for t in traces], dtype=np.float64)
    pred_s = np.array([sum(t.predicted_star) for t in traces])
    z = _z((ct - c0) - pred)
    z_s = _z((ct_s - c0) - pred_s)
    return DiversityReport(
        trials=len(traces),
        mean_c0=float(c0.mean()),
        mean_ct=float(ct.mean()),
        mean_predicted_gain=float(pred.mean()),
        z_score=z,
        passed=abs(z) <= z_threshold,
        monotone=monotone,
        mean_ct_star=float(ct_s.mean()),
        mean_predicted_gain_star=float(pred_s.mean()),
        z_score_star=z_s,
    )
