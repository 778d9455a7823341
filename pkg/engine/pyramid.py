"""
Multi-scale residual pyramid arithmetic.

A pyramid holds one residual map per scale step. The recursive form upsamples
the running prediction before adding each residual; the cumulative form
upsamples every residual straight to the output scale and sums. Both agree
exactly only when the resize family composes (nearest mode on nested grids).
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from config import ArgumentError
from engine.numkern import InterpMode, TokenMap, add, resize


@dataclass(frozen=True)
class ScaleSchedule:
    """
    Ordered scale sizes split into a structure stage and a texture stage.

    Steps are 1-based. The last ``n_prune`` steps form the texture stage and
    carry ``prune_ratios``; ``cache_step`` defaults to K - N, the last step of
    the structure stage.
    """

    sizes: tuple[tuple[int, int], ...]
    n_prune: int
    prune_ratios: tuple[float, ...] = ()
    cache_step: int | None = None
    mode: InterpMode = "bilinear"

    def __post_init__(self) -> None:
        sizes = tuple((int(h), int(w)) for h, w in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "prune_ratios", tuple(float(r) for r in self.prune_ratios))
        if not sizes:
            raise ArgumentError("schedule needs at least one scale")
        for h, w in sizes:
            if h < 1 or w < 1:
                raise ArgumentError(f"scale size ({h}, {w}) must be >= 1 in both dims")
        areas = [h * w for h, w in sizes]
        if any(b <= a for a, b in zip(areas, areas[1:])):
            raise ArgumentError(f"scale sizes must strictly increase in h*w: {list(sizes)}")
        k_total = len(sizes)
        if not 1 <= self.n_prune < k_total:
            raise ArgumentError(f"n_prune={self.n_prune} outside [1, {k_total - 1}] for K={k_total}")
        if len(self.prune_ratios) != self.n_prune:
            raise ArgumentError(
                f"{len(self.prune_ratios)} prune ratios given for n_prune={self.n_prune}"
            )
        seen_skip = False
        for ratio in self.prune_ratios:
            if not 0.0 <= ratio <= 1.0:
                raise ArgumentError(f"prune ratio {ratio} outside [0, 1]")
            if seen_skip and ratio != 1.0:
                raise ArgumentError("a skipped step (ratio 1.0) cannot be followed by a forwarded step")
            seen_skip = seen_skip or ratio == 1.0
        if self.mode not in ("nearest", "bilinear"):
            raise ArgumentError(f"unknown interpolation mode {self.mode!r}")
        last_structure = k_total - self.n_prune
        cache_step = last_structure if self.cache_step is None else int(self.cache_step)
        if not 1 <= cache_step <= last_structure:
            raise ArgumentError(f"cache_step={cache_step} outside [1, {last_structure}]")
        object.__setattr__(self, "cache_step", cache_step)

    @classmethod
    def from_sides(
        cls,
        sides: Sequence[int],
        n_prune: int,
        prune_ratios: Sequence[float] | None = None,
        cache_step: int | None = None,
        mode: InterpMode = "bilinear",
    ) -> ScaleSchedule:
        """Square scales (s, s) for each side; missing ratios mean no pruning."""
        ratios = tuple(prune_ratios) if prune_ratios is not None else (0.0,) * n_prune
        return cls(
            sizes=tuple((int(s), int(s)) for s in sides),
            n_prune=n_prune,
            prune_ratios=ratios,
            cache_step=cache_step,
            mode=mode,
        )

    @property
    def K(self) -> int:  # noqa: N802 - standard notation for the step count
        return len(self.sizes)

    @property
    def resolved_cache_step(self) -> int:
        assert self.cache_step is not None
        return self.cache_step

    def _check_step(self, step: int) -> None:
        if not 1 <= step <= self.K:
            raise ArgumentError(f"step {step} outside [1, {self.K}]")

    def size(self, step: int) -> tuple[int, int]:
        self._check_step(step)
        return self.sizes[step - 1]

    def tokens(self, step: int) -> int:
        h, w = self.size(step)
        return h * w

    @property
    def structure_steps(self) -> range:
        return range(1, self.K - self.n_prune + 1)

    @property
    def texture_steps(self) -> range:
        return range(self.K - self.n_prune + 1, self.K + 1)

    def is_texture(self, step: int) -> bool:
        self._check_step(step)
        return step > self.K - self.n_prune

    def ratio_for(self, step: int) -> float:
        """Pruning ratio of ``step``; structure-stage steps are never pruned."""
        if not self.is_texture(step):
            return 0.0
        return self.prune_ratios[step - (self.K - self.n_prune) - 1]

    def is_skipped(self, step: int) -> bool:
        return self.ratio_for(step) == 1.0

    def with_ratios(self, ratios: Sequence[float]) -> ScaleSchedule:
        return ScaleSchedule(self.sizes, self.n_prune, tuple(ratios), self.cache_step, self.mode)

    def with_cache_step(self, cache_step: int) -> ScaleSchedule:
        return ScaleSchedule(self.sizes, self.n_prune, self.prune_ratios, cache_step, self.mode)

    def extended(self, extra_sides: Sequence[int]) -> ScaleSchedule:
        """
        Append larger square scales for zero-shot resolution scaling.

        Appended steps join the texture stage and repeat the last configured
        ratio (0.0 when the schedule has none). The cache step keeps its index.
        """
        extra = tuple((int(s), int(s)) for s in extra_sides)
        if not extra:
            return self
        tail = self.prune_ratios[-1] if self.prune_ratios else 0.0
        return ScaleSchedule(
            sizes=self.sizes + extra,
            n_prune=self.n_prune + len(extra),
            prune_ratios=self.prune_ratios + (tail,) * len(extra),
            cache_step=self.cache_step,
            mode=self.mode,
        )


@dataclass
class ResidualPyramid:
    """Residual maps f_1..f_K, one per scale step, sharing one channel dim."""

    residuals: list[TokenMap] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.residuals:
            raise ArgumentError("pyramid needs at least one residual")
        dims = {f.d for f in self.residuals}
        if len(dims) != 1:
            raise ArgumentError(f"residuals disagree on channel dim: {sorted(dims)}")

    @property
    def d(self) -> int:
        return self.residuals[0].d

    def __len__(self) -> int:
        return len(self.residuals)

    def check(self, sched: ScaleSchedule) -> None:
        if len(self.residuals) != sched.K:
            raise ArgumentError(f"pyramid has {len(self.residuals)} scales, schedule has {sched.K}")
        for step, f in enumerate(self.residuals, start=1):
            if f.size != sched.size(step):
                raise ArgumentError(f"residual {step} has size {f.size}, schedule wants {sched.size(step)}")


def _check_upto(sched: ScaleSchedule, upto: int) -> None:
    if not 1 <= upto <= sched.K:
        raise ArgumentError(f"upto={upto} outside [1, {sched.K}]")


def accumulate_recursive(p: ResidualPyramid, sched: ScaleSchedule, upto: int) -> TokenMap:
    """r_k = resize(r_{k-1}, size_k) + f_k, starting from r_1 = f_1."""
    p.check(sched)
    _check_upto(sched, upto)
    running = TokenMap(p.residuals[0].data.copy())
    for step in range(2, upto + 1):
        running = add(resize(running, sched.size(step), sched.mode), p.residuals[step - 1])
    return running


def accumulate_cumulative(p: ResidualPyramid, sched: ScaleSchedule, upto: int) -> TokenMap:
    """Sum of every residual up to ``upto`` resized straight to scale ``upto``."""
    p.check(sched)
    _check_upto(sched, upto)
    target = sched.size(upto)
    total = resize(p.residuals[0], target, sched.mode)
    for step in range(2, upto + 1):
        total = add(total, resize(p.residuals[step - 1], target, sched.mode))
    return total


def cumulative_gap(p: ResidualPyramid, sched: ScaleSchedule, upto: int) -> float:
    """Max-abs difference between the recursive and cumulative forms."""
    recursive = accumulate_recursive(p, sched, upto)
    cumulative = accumulate_cumulative(p, sched, upto)
    return float(np.max(np.abs(recursive.data - cumulative.data)))


_RESIDUAL_NUDGES = 2
_POS_INF = np.float32(np.inf)
_NEG_INF = np.float32(-np.inf)


def exact_residual(down: TokenMap, up: TokenMap) -> TokenMap:
    """
    Residual f with float32 ``up + f == down`` wherever such an f exists.

    The rounded difference can miss by one unit in the last place; its two
    neighbours on either side cover every float32 whose sum with ``up`` rounds
    to ``down``. Elements with no such float keep the rounded difference.
    """
    base = down.data - up.data
    residual = base.copy()
    unresolved = (up.data + base) != down.data
    lower, upper = base, base
    for _ in range(_RESIDUAL_NUDGES):
        if not unresolved.any():
            break
        lower = np.nextafter(lower, _NEG_INF)
        upper = np.nextafter(upper, _POS_INF)
        for candidate in (lower, upper):
            hit = unresolved & ((up.data + candidate) == down.data)
            residual[hit] = candidate[hit]
            unresolved &= ~hit
    return TokenMap(residual)


def decompose(target: TokenMap, sched: ScaleSchedule) -> ResidualPyramid:
    """
    Greedy residual decomposition of ``target`` over the schedule.

    f_1 is the target downsampled to scale 1; each later f_k is the downsampled
    target minus the upsampled running prediction, nudged by ``exact_residual``
    so the recursive accumulation lands on the downsampled target. Downsampling
    uses the schedule's mode.
    """
    if target.size != sched.size(sched.K):
        raise ArgumentError(f"target size {target.size} != final scale {sched.size(sched.K)}")
    residuals: list[TokenMap] = []
    running: TokenMap | None = None
    for step in range(1, sched.K + 1):
        size = sched.size(step)
        down = resize(target, size, sched.mode)
        if running is None:
            residual = down
            running = TokenMap(down.data.copy())
        else:
            up = resize(running, size, sched.mode)
            residual = exact_residual(down, up)
            running = add(up, residual)
        residuals.append(residual)
    return ResidualPyramid(residuals)
