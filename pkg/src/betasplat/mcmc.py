"""Kernel-agnostic MCMC densification.

Primitives whose opacity falls below a pruning threshold are "dead"; each is
respawned on a live primitive drawn by multinomial sampling over live
opacities.  When a primitive ends up cloned into N copies, only its opacity
changes, to ``1 - (1 - o)^(1/N)``: at the kernel peak the composite of the N
copies then matches the original exactly, and away from the peak the
mismatch is O(o^2) for any radial kernel and any N, which the opacity
regularizer keeps negligible.  Shapes, scales and appearance are copied
untouched.

:func:`preservation_error` is the brute-force oracle for that claim.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import beta_eval
from .primitive import logit

DEAD_THRESHOLD = 0.005
GROWTH_RATE = 0.05


class AllDeadError(RuntimeError):
    """Every primitive fell below the pruning threshold (training diverged)."""


def find_dead(prims, threshold=DEAD_THRESHOLD):
    """Indices of primitives with opacity below ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return np.nonzero(prims.opacities < threshold)[0]


@dataclass
class RelocationPlan:
    """Dead-to-live assignment with per-target clone multiplicities."""

    dead: np.ndarray  # (D,) indices being respawned
    targets: np.ndarray  # (D,) live index each dead primitive lands on
    multiplicity: dict  # live index -> N = 1 + number of relocated copies

    def __post_init__(self):
        spawned = sum(n - 1 for n in self.multiplicity.values())
        assert spawned == self.dead.size


def plan_relocation(prims, dead, rng, threshold=DEAD_THRESHOLD):
    """Draw a live target for every dead primitive, odds proportional to opacity."""
    dead = np.asarray(dead, dtype=np.int64)
    opacities = prims.opacities
    live_mask = opacities >= threshold
    live_mask[dead] = False
    live = np.nonzero(live_mask)[0]
    if live.size == 0:
        raise AllDeadError(
            f"no live primitives left ({dead.size} dead of {len(prims)})"
        )
    if dead.size == 0:
        return RelocationPlan(dead, np.zeros(0, dtype=np.int64), {})
    probs = opacities[live] / opacities[live].sum()
    targets = rng.choice(live, size=dead.size, replace=True, p=probs)
    unique, counts = np.unique(targets, return_counts=True)
    multiplicity = {int(t): int(c) + 1 for t, c in zip(unique, counts)}
    return RelocationPlan(dead, targets, multiplicity)


def new_opacity(o, n):
    """Opacity for each of ``n`` stacked copies: ``1 - (1 - o)^(1/n)``.

    Exact at the kernel peak by construction; for small ``o`` it approaches
    ``o / n`` with an O(o^2) remainder.
    """
    o = np.asarray(o, dtype=np.float64)
    if n == 1:
        return o if o.ndim else float(o)
    out = 1.0 - (1.0 - o) ** (1.0 / n)
    return out if out.ndim else float(out)


def apply_relocation(prims, plan, adam_state=None, floor=DEAD_THRESHOLD):
    """Overwrite dead primitives with their targets (opacity adjusted).

    Every touched primitive (dead and target alike) gets the N-th-root
    opacity and zeroed optimizer moments.  ``floor`` keeps respawned
    opacities at or above the pruning threshold: below the rasterizer's
    minimum sample weight a primitive receives no image gradient at all and
    could never recover (the floor only binds when one live primitive
    absorbs very many dead ones).
    """
    if plan.dead.size == 0:
        return prims
    params = prims.parameters()
    for t, n in plan.multiplicity.items():
        copies = plan.dead[plan.targets == t]
        for name, arr in params.items():
            if name != "opacity_raw":
                arr[copies] = arr[t]
        adjusted = logit(max(new_opacity(float(prims.opacities[t]), n), floor))
        prims.opacity_raw[copies] = adjusted
        prims.opacity_raw[t] = adjusted
    if adam_state is not None:
        touched = np.concatenate([plan.dead, np.fromiter(plan.multiplicity, np.int64)])
        adam_state.zero_rows(touched)
    return prims


def grow(prims, budget, rng, adam_state=None, rate=GROWTH_RATE,
         dead_threshold=DEAD_THRESHOLD):
    """Add up to ``rate`` new primitives (fraction of current) toward ``budget``.

    New primitives are sampled from live ones multinomially and stacked on
    their sources with the same opacity adjustment as relocation.  Returns
    the grown set; ``adam_state`` rows are extended and touched sources
    zeroed in place.
    """
    n = len(prims)
    if budget < n:
        raise ValueError(f"budget {budget} below current count {n}")
    n_add = min(int(rate * n), budget - n)
    if n_add <= 0:
        return prims
    opacities = prims.opacities
    live = np.nonzero(opacities >= dead_threshold)[0]
    if live.size == 0:
        raise AllDeadError("cannot grow: no live primitives")
    probs = opacities[live] / opacities[live].sum()
    sources = rng.choice(live, size=n_add, replace=True, p=probs)
    unique, counts = np.unique(sources, return_counts=True)

    new_rows = prims.take(sources)
    for t, c in zip(unique, counts):
        adjusted = logit(
            max(new_opacity(float(opacities[t]), int(c) + 1), dead_threshold)
        )
        prims.opacity_raw[t] = adjusted
        new_rows.opacity_raw[sources == t] = adjusted
    grown = prims.append(new_rows)
    if adam_state is not None:
        adam_state.zero_rows(unique)
        adam_state.append_rows(n_add)
    return grown


def preservation_error(shape, o, n, points=4096, kernel=None):
    """Max deviation between a primitive and its N-way opacity-split composite.

    Scans ``x in [0, 1]``: ``| o f(x) - (1 - (1 - o' f(x))^N) |`` with
    ``f`` the Beta kernel for ``shape`` (or any callable kernel) and ``o'``
    the adjusted opacity.  Zero at the peak by construction.
    """
    x = np.linspace(0.0, 1.0, points)
    f = kernel(x) if kernel is not None else beta_eval(x, shape)
    o_new = new_opacity(o, n)
    # n == 1 is the identity; the power form would only add rounding noise
    densified = o_new * f if n == 1 else 1.0 - (1.0 - o_new * f) ** n
    return float(np.max(np.abs(o * f - densified)))
