"""Gradient Episodic Memory: conflict detection against per-environment
memories and exact projection of the update direction.

The projection solves

    min_z ||g - z||^2   s.t.  <z, g_i> >= 0  for every memory gradient g_i

by enumerating active sets.  For an active set S the KKT conditions give
z = g + sum_{i in S} v_i g_i with (G_S G_S^T) v_S = -G_S g; the unique
optimum is the first S whose multipliers are nonnegative and whose z
satisfies every constraint.  With at most a handful of memories this is
exact and cheap.

The cone constraint only rules out first-order loss increases.  A projected
step runs along the boundary of the cone, so its second-order term raises
the memory losses a little every time.  ``gem_step`` can therefore guard the
underlying constraint directly: given reference losses, it halves the step
until no memory loss ends above both its slightly relaxed reference and its
current value.  If no halving passes, it descends instead on the memories
that already sit above their references.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from . import policy_net

K_MAX = 8
TOL = 1e-9
RIDGE = 1e-10
MAX_BACKTRACKS = 4
GUARD_TOLERANCE = 0.02


class DegenerateMemoryError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class MemorySection:
    """Exemplars of one environment.  ``references`` optionally holds each
    example's loss under the policy that finished training on it."""

    env_id: int
    examples: tuple
    references: tuple = ()

    def __post_init__(self):
        if len(self.examples) == 0:
            raise ValueError("memory sections must be non-empty")
        object.__setattr__(self, "examples", tuple(self.examples))
        object.__setattr__(self, "references", tuple(float(r) for r in self.references))
        if self.references and len(self.references) != len(self.examples):
            raise ValueError("one reference loss per example is required")

    def subset(self, keep: Sequence[int]) -> MemorySection:
        refs = tuple(self.references[i] for i in keep) if self.references else ()
        return MemorySection(self.env_id, tuple(self.examples[i] for i in keep), refs)

    @property
    def reference(self) -> float | None:
        """Mean stored loss, comparable with ``bc_loss`` on this section."""
        return float(np.mean(self.references)) if self.references else None

    def __len__(self) -> int:
        return len(self.examples)

    @cached_property
    def batch(self) -> tuple[np.ndarray, np.ndarray]:
        return policy_net._as_arrays(list(self.examples))


@dataclass(eq=False)
class EpisodicMemory:
    """Ordered per-environment exemplar sets."""

    sections: list[MemorySection] = field(default_factory=list)

    def __post_init__(self):
        ids = [s.env_id for s in self.sections]
        if any(a >= b for a, b in zip(ids, ids[1:])):
            raise ValueError("memory env ids must be strictly increasing")

    def __len__(self) -> int:
        return sum(len(s) for s in self.sections)

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.sections]


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    g_tilde: np.ndarray
    dual: np.ndarray
    projected: bool
    step: float | None = None  # step size actually taken by gem_step


def memory_gradients(params: np.ndarray, memory: EpisodicMemory) -> list[np.ndarray]:
    return [policy_net.grad(params, s.batch) for s in memory.sections]


def check_conflict(g: np.ndarray, gs: Sequence[np.ndarray]) -> list[int]:
    """Indices of memory gradients with a non-positive inner product."""
    return [i for i, gi in enumerate(gs) if float(np.dot(g, gi)) <= 0.0]


def project(
    g: np.ndarray,
    gs: Sequence[np.ndarray],
    tol: float = TOL,
    ridge: float = RIDGE,
    k_max: int = K_MAX,
) -> ProjectionResult:
    """Euclidean projection of ``g`` onto {z : <z, g_i> >= 0 for all i}.

    ``tol`` is relative to ||g|| ||g_i|| for constraints and to
    ||g|| / min ||g_i|| for multipliers.  Active sets whose smallest Gram
    eigenvalue falls below ``ridge`` times the mean Gram diagonal are treated
    as degenerate and skipped.
    """
    k = len(gs)
    if k == 0:
        return ProjectionResult(g, np.zeros(0), False)
    if k > k_max:
        raise ValueError(f"{k} constraints exceed k_max={k_max}")
    G = np.stack(gs)
    gram = G @ G.T
    Gg = G @ g
    norms = np.sqrt(np.diag(gram))
    g_norm = max(float(np.linalg.norm(g)), 1e-300)
    slack = tol * g_norm * np.maximum(norms, 1e-300)
    lam_slack = tol * g_norm / max(float(norms.min()), 1e-300)
    if np.all(Gg >= -slack):
        return ProjectionResult(g, np.zeros(k), False)

    degenerate = False
    for size in range(1, k + 1):
        for subset in itertools.combinations(range(k), size):
            S = list(subset)
            M = gram[np.ix_(S, S)]
            scale = float(np.trace(M)) / size
            if scale <= 0:
                degenerate = True
                continue
            eig_min = float(np.linalg.eigvalsh(M).min())
            if eig_min < ridge * scale:
                degenerate = True
                continue
            lam = np.linalg.solve(M, -Gg[S])
            if np.any(lam < -lam_slack):
                continue
            z = g + lam @ G[S]
            if np.all(G @ z >= -slack):
                dual = np.zeros(k)
                dual[S] = np.maximum(lam, 0.0)
                return ProjectionResult(z, dual, True)
    if degenerate:
        raise DegenerateMemoryError("degenerate memory gradients")
    raise np.linalg.LinAlgError("projection failed to find a KKT point")


def gem_step(
    params: np.ndarray,
    current_batch,
    memory: EpisodicMemory | None,
    alpha: float,
    references: Sequence[float] | None = None,
    tolerance: float = GUARD_TOLERANCE,
    max_backtracks: int = MAX_BACKTRACKS,
):
    """One constrained update; returns (new params, ProjectionResult or None).

    With ``references`` (one loss per memory section) the step is also held
    to the loss constraint itself: it is halved until no section loss ends
    above both ``(1 + tolerance)`` times its reference and its current
    value.  If no halving is acceptable, the step descends instead on the
    sections that sit above their references, and the result reports
    ``step == 0``.
    """
    g = policy_net.grad(params, current_batch)
    if memory is None or not memory.sections:
        return policy_net.sgd_step(params, g, alpha), None
    gs = memory_gradients(params, memory)
    result = project(g, gs) if check_conflict(g, gs) else ProjectionResult(g, np.zeros(len(gs)), False)
    if references is None:
        return policy_net.sgd_step(params, result.g_tilde, alpha), (result if result.projected else None)
    if len(references) != len(memory.sections):
        raise ValueError("one reference loss per memory section is required")
    current = [policy_net.bc_loss(params, s.batch) for s in memory.sections]
    bounds = [max(r * (1.0 + tolerance), c) for r, c in zip(references, current)]
    step = alpha
    for _ in range(max_backtracks + 1):
        new = policy_net.sgd_step(params, result.g_tilde, step)
        if all(policy_net.bc_loss(new, s.batch) <= b for s, b in zip(memory.sections, bounds)):
            return new, replace(result, step=step)
        step *= 0.5
    over = [gi for gi, c, r in zip(gs, current, references) if c > r]
    if over:
        params = policy_net.sgd_step(params, np.sum(over, axis=0), alpha)
    return params, replace(result, step=0.0)


def gem_update(params: np.ndarray, current_batch, memory: EpisodicMemory | None, alpha: float) -> np.ndarray:
    return gem_step(params, current_batch, memory, alpha)[0]
