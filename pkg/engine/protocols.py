"""Protocols for the pluggable pieces of the decoder."""

from __future__ import annotations

from collections.abc import Callable
from typing import TYPE_CHECKING, Protocol, runtime_checkable

if TYPE_CHECKING:
    from engine.fastvar import LayerCacheStore, PruneDecision, SublayerKind
    from engine.numkern import TokenMap


@runtime_checkable
class SublayerPruner(Protocol):
    """Wrapper the decoder calls around each attention and FFN sublayer."""

    @property
    def cache_step(self) -> int: ...

    def ratio_for(self, step: int) -> float: ...

    def is_active(self, step: int) -> bool: ...

    def is_skipped(self, step: int) -> bool: ...

    def new_store(self) -> LayerCacheStore: ...

    def apply(
        self,
        sublayer: Callable[[TokenMap], TokenMap],
        x: TokenMap,
        store: LayerCacheStore,
        layer: int,
        kind: SublayerKind,
        step: int,
        profile: dict[str, int] | None = None,
    ) -> tuple[TokenMap, PruneDecision]: ...
