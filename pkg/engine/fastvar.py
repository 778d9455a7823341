"""
Cached-token pruning for large scale steps.

Pivotal token selection keeps the tokens that deviate most from the spatial
mean of a sublayer input. The sublayer runs on those tokens only; cached token
restoration then fills the pruned slots with that sublayer's output from the
caching step, upsampled to the current scale. Ratios are progressive across
the texture stage and a ratio of 1.0 skips a whole step.
"""

from __future__ import annotations

import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import numpy.typing as npt

from config import ArgumentError, CacheStateError
from engine.logging_utils import create_engine_logger
from engine.numkern import (
    DTYPE,
    IndexList,
    InterpMode,
    TokenMap,
    gather_rows,
    global_avg_pool,
    resize,
    scatter_rows,
    topk_indices,
)
from engine.pyramid import ScaleSchedule

SublayerKind = Literal["attention", "ffn"]
SUBLAYER_KINDS: tuple[SublayerKind, ...] = ("attention", "ffn")

_logger = create_engine_logger("FastVar")


def keep_count(total: int, ratio: float) -> int:
    """
    Tokens kept at ``ratio``: total - round_half_up(ratio * total).

    Small maps at high ratios can keep nothing; the sublayer is then bypassed
    and every slot comes from the cache.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ArgumentError(f"ratio {ratio} outside [0, 1]")
    return total - math.floor(ratio * total + 0.5)


@dataclass(frozen=True, eq=False)
class PruneDecision:
    """Kept-token set for one sublayer call at one scale step."""

    indices: IndexList
    ratio: float
    total: int

    def __post_init__(self) -> None:
        if self.indices.capacity != self.total:
            raise ArgumentError(
                f"index capacity {self.indices.capacity} != total tokens {self.total}"
            )
        expected = keep_count(self.total, self.ratio)
        if len(self.indices) != expected:
            raise ArgumentError(
                f"decision keeps {len(self.indices)} tokens, ratio {self.ratio} implies {expected}"
            )

    @property
    def keep(self) -> int:
        return len(self.indices)

    @property
    def pruned(self) -> int:
        return self.total - self.keep


@dataclass
class LayerCacheStore:
    """Per-(layer, sublayer) outputs captured once at the caching step."""

    step: int
    entries: dict[tuple[int, SublayerKind], TokenMap] = field(default_factory=dict)

    def capture(self, layer: int, kind: SublayerKind, y: TokenMap, current_step: int) -> None:
        if current_step != self.step:
            raise CacheStateError(
                f"capture at step {current_step}, caching step is {self.step}", "LayerCacheStore"
            )
        key = (layer, kind)
        if key in self.entries:
            raise CacheStateError(f"entry {key} already captured", "LayerCacheStore")
        if self.entries:
            size = next(iter(self.entries.values())).size
            if y.size != size:
                raise ArgumentError(f"cache entry size {y.size} differs from stored {size}")
        self.entries[key] = TokenMap(y.data.copy())

    def has(self, layer: int, kind: SublayerKind) -> bool:
        return (layer, kind) in self.entries

    def get(self, layer: int, kind: SublayerKind) -> TokenMap:
        try:
            return self.entries[(layer, kind)]
        except KeyError:
            raise CacheStateError(
                f"no cached output for layer {layer} {kind}; caching step {self.step} not reached",
                "LayerCacheStore",
            ) from None

    def __len__(self) -> int:
        return len(self.entries)


def capture_cache(
    store: LayerCacheStore, layer: int, kind: SublayerKind, y: TokenMap, current_step: int
) -> None:
    store.capture(layer, kind, y, current_step)


# ---------------------------
# Pivotal token selection
# ---------------------------


def pivotal_score_squared(x: TokenMap) -> npt.NDArray[np.float32]:
    """Squared L2 distance of every token from the per-channel spatial mean."""
    centered = x.flat() - global_avg_pool(x)
    return np.add.reduce(centered * centered, axis=1, dtype=DTYPE)


def pivotal_score(x: TokenMap) -> npt.NDArray[np.float32]:
    return np.sqrt(pivotal_score_squared(x))


def select_pivotal(x: TokenMap, ratio: float) -> tuple[TokenMap | None, PruneDecision]:
    """
    Keep the top tokens by pivotal score.

    Returns the kept tokens as a (1, keep, d) map in increasing index order and
    the decision that produced them. When the ratio leaves no token to keep the
    map is None.

    Raises:
        ArgumentError: If ratio is outside [0, 1)
    """
    if not 0.0 <= ratio < 1.0:
        raise ArgumentError(f"pivotal selection needs ratio in [0, 1), got {ratio}")
    total = x.num_tokens
    keep = keep_count(total, ratio)
    if keep == total:
        idx = IndexList.full(total)
    else:
        idx = topk_indices(pivotal_score_squared(x), keep)
    kept = gather_rows(x, idx) if keep else None
    return kept, PruneDecision(idx, ratio, total)


# ---------------------------
# Cached token restoration
# ---------------------------


def restore_cached(
    y_kept: TokenMap | None,
    store: LayerCacheStore,
    layer: int,
    kind: SublayerKind,
    decision: PruneDecision,
    target: tuple[int, int],
    mode: InterpMode,
) -> TokenMap:
    """Scatter fresh outputs into the upsampled cached output of this sublayer.

    ``y_kept`` is None only for a decision that keeps no token.
    """
    cached = store.get(layer, kind)
    h, w = target
    if decision.total != h * w:
        raise ArgumentError(f"decision covers {decision.total} tokens, target {target} has {h * w}")
    base = resize(cached, target, mode)
    return scatter_rows(base, decision.indices, y_kept)


# ---------------------------
# Progressive schedule
# ---------------------------


@dataclass(frozen=True)
class PruneScheduleEntry:
    step: int
    ratio: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.ratio <= 1.0:
            raise ArgumentError(f"prune ratio {self.ratio} outside [0, 1]")

    @property
    def skipped(self) -> bool:
        return self.ratio == 1.0


def make_prune_schedule(sched: ScaleSchedule, ratios: Sequence[float]) -> ScaleSchedule:
    """
    Attach ``ratios`` to the texture steps K-N+1..K of ``sched``.

    Raises:
        ArgumentError: On a length mismatch, a decreasing ratio, or a forwarded
            step after a skipped one
    """
    values = [float(r) for r in ratios]
    if len(values) != sched.n_prune:
        raise ArgumentError(f"{len(values)} ratios given for N={sched.n_prune}")
    for prev, cur in zip(values, values[1:]):
        if cur < prev:
            raise ArgumentError(f"ratios must be non-decreasing, got {prev} then {cur}")
    return sched.with_ratios(values)


def prune_entries(sched: ScaleSchedule) -> list[PruneScheduleEntry]:
    return [PruneScheduleEntry(step, sched.ratio_for(step)) for step in sched.texture_steps]


Sublayer = Callable[[TokenMap], TokenMap]


class FastVarPruner:
    """
    Wraps sublayer calls with selection and restoration for one schedule.

    A ratio of 0 never reaches the wrapper (``is_active`` is False) and a
    ratio of 1.0 is handled by the decoder's skip path.
    """

    def __init__(self, sched: ScaleSchedule, progressive: bool = True):
        # Ablations prune isolated step groups, which breaks the non-decreasing rule.
        self.schedule = make_prune_schedule(sched, sched.prune_ratios) if progressive else sched

    @property
    def cache_step(self) -> int:
        return self.schedule.resolved_cache_step

    def ratio_for(self, step: int) -> float:
        return self.schedule.ratio_for(step)

    def is_active(self, step: int) -> bool:
        return 0.0 < self.ratio_for(step) < 1.0

    def is_skipped(self, step: int) -> bool:
        return self.schedule.is_skipped(step)

    def new_store(self) -> LayerCacheStore:
        return LayerCacheStore(step=self.cache_step)

    def apply(
        self,
        sublayer: Sublayer,
        x: TokenMap,
        store: LayerCacheStore,
        layer: int,
        kind: SublayerKind,
        step: int,
        profile: dict[str, int] | None = None,
    ) -> tuple[TokenMap, PruneDecision]:
        """Run ``sublayer`` on the pivotal tokens of ``x`` and restore the rest."""
        if not self.is_active(step):
            raise ArgumentError(f"pruner is not active at step {step}")
        if not store.has(layer, kind):
            raise CacheStateError(
                f"pruning step {step} before layer {layer} {kind} was cached", "FastVarPruner"
            )
        t0 = time.perf_counter_ns()
        x_kept, decision = select_pivotal(x, self.ratio_for(step))
        t1 = time.perf_counter_ns()
        # Nothing kept: the sublayer is bypassed and appends no KV entry.
        y_kept = sublayer(x_kept) if x_kept is not None else None
        t2 = time.perf_counter_ns()
        y = restore_cached(y_kept, store, layer, kind, decision, x.size, self.schedule.mode)
        t3 = time.perf_counter_ns()
        if profile is not None:
            profile["pts"] = profile.get("pts", 0) + (t1 - t0)
            profile["ctr"] = profile.get("ctr", 0) + (t3 - t2)
        _logger.debug(
            f"step {step} layer {layer} {kind}: kept {decision.keep}/{decision.total}",
        )
        return y, decision
