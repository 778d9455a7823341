"""
Toy next-scale transformer and its generation loop.

Each scale step embeds the previous prediction resized to the new scale, runs a
pre-norm transformer whose attention sees the keys and values of every earlier
step, samples codebook indices from the head and adds their embeddings as the
step's residual. A pruner, when given, wraps every attention and FFN sublayer
in the texture stage and owns the whole-step skip.
"""

from __future__ import annotations

import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import numpy.typing as npt

from config import ArgumentError, ShapeError
from engine.fastvar import SUBLAYER_KINDS, LayerCacheStore, PruneDecision, SublayerKind, keep_count
from engine.logging_utils import create_engine_logger
from engine.numkern import (
    DTYPE,
    FlatMatrix,
    TokenMap,
    add,
    gelu,
    layer_norm,
    matmul,
    resize,
    softmax_rows,
)
from engine.protocols import SublayerPruner
from engine.pyramid import ScaleSchedule
from metrics import RunMetrics, collect_run_metrics

_logger = create_engine_logger("VarNet")

PROFILE_KEYS: tuple[str, ...] = ("attention", "ffn", "pts", "ctr")


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    d: int
    heads: int
    d_ff: int
    vocab: int
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self) -> None:
        for name in ("depth", "d", "heads", "d_ff", "vocab"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.heads != 0:
            raise ArgumentError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.temperature < 0:
            raise ArgumentError(f"temperature must be >= 0, got {self.temperature}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass(frozen=True, eq=False)
class LayerWeights:
    wq: FlatMatrix
    wk: FlatMatrix
    wv: FlatMatrix
    wo: FlatMatrix
    w1: FlatMatrix
    b1: npt.NDArray[np.float32]
    w2: FlatMatrix
    b2: npt.NDArray[np.float32]

    def arrays(self) -> tuple[npt.NDArray[np.float32], ...]:
        return (self.wq, self.wk, self.wv, self.wo, self.w1, self.b1, self.w2, self.b2)


@dataclass(frozen=True, eq=False)
class Model:
    """Immutable weights plus precomputed positional encodings."""

    cfg: ModelConfig
    layers: tuple[LayerWeights, ...]
    w_embed: FlatMatrix
    w_head: FlatMatrix
    codebook: FlatMatrix
    positions: dict[tuple[int, int], FlatMatrix] = field(default_factory=dict)

    def position(self, h: int, w: int) -> FlatMatrix:
        cached = self.positions.get((h, w))
        return cached if cached is not None else sinusoidal_2d(h, w, self.cfg.d)

    def weight_blob(self) -> bytes:
        parts = [self.w_embed.tobytes()]
        for lw in self.layers:
            parts.extend(a.tobytes() for a in lw.arrays())
        parts.extend([self.w_head.tobytes(), self.codebook.tobytes()])
        return b"".join(parts)


@lru_cache(maxsize=64)
def sinusoidal_2d(h: int, w: int, d: int) -> FlatMatrix:
    """
    Fixed 2-D sinusoidal encoding as an (h*w, d) matrix.

    The first d // 2 channels encode the row, the rest the column; each half
    alternates sin/cos over geometrically spaced frequencies.
    """

    def axis_table(n: int, width: int) -> npt.NDArray[np.float64]:
        table = np.zeros((n, width), dtype=np.float64)
        if width == 0:
            return table
        pos = np.arange(n, dtype=np.float64)[:, None]
        pairs = np.arange(0, width, 2, dtype=np.float64)
        angle = pos / np.power(10000.0, pairs / max(width, 1))
        table[:, 0::2] = np.sin(angle)
        table[:, 1::2] = np.cos(angle[:, : width // 2])
        return table

    d_row = d // 2
    rows = axis_table(h, d_row)
    cols = axis_table(w, d - d_row)
    grid = np.concatenate(
        [np.repeat(rows, w, axis=0), np.tile(cols, (h, 1))],
        axis=1,
    ).astype(DTYPE)
    grid.setflags(write=False)
    return grid


def init_model(cfg: ModelConfig, sizes: Sequence[tuple[int, int]] = ()) -> Model:
    """
    Draw all weights from uniform(-1/sqrt(d), 1/sqrt(d)) with ``cfg.seed``.

    Draw order is fixed, so equal configs give byte-identical weights.
    Positional encodings are precomputed for ``sizes``.
    """
    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / np.sqrt(cfg.d)

    def draw(*shape: int) -> npt.NDArray[np.float32]:
        return rng.uniform(-bound, bound, size=shape).astype(DTYPE)

    w_embed = draw(cfg.d, cfg.d)
    layers = tuple(
        LayerWeights(
            wq=draw(cfg.d, cfg.d),
            wk=draw(cfg.d, cfg.d),
            wv=draw(cfg.d, cfg.d),
            wo=draw(cfg.d, cfg.d),
            w1=draw(cfg.d, cfg.d_ff),
            b1=draw(cfg.d_ff),
            w2=draw(cfg.d_ff, cfg.d),
            b2=draw(cfg.d),
        )
        for _ in range(cfg.depth)
    )
    w_head = draw(cfg.d, cfg.vocab)
    codebook = draw(cfg.vocab, cfg.d)
    positions = {(int(h), int(w)): sinusoidal_2d(int(h), int(w), cfg.d) for h, w in sizes}
    return Model(cfg, layers, w_embed, w_head, codebook, positions)


def condition_map(condition_seed: int, d: int) -> TokenMap:
    """Seeded 1x1xd start map standing in for the text condition."""
    rng = np.random.default_rng(condition_seed)
    return TokenMap(rng.uniform(-1.0, 1.0, size=(1, 1, d)).astype(DTYPE))


# ---------------------------
# KV cache
# ---------------------------


class KVCache:
    """Per-layer keys/values of every forwarded step, in step order."""

    def __init__(self, depth: int, d: int):
        self.depth = depth
        self.d = d
        self._steps: list[list[int]] = [[] for _ in range(depth)]
        self._lengths: list[list[int]] = [[] for _ in range(depth)]
        empty = np.zeros((0, d), dtype=DTYPE)
        self._keys: list[FlatMatrix] = [empty] * depth
        self._values: list[FlatMatrix] = [empty] * depth

    def append(self, layer: int, step: int, k: FlatMatrix, v: FlatMatrix) -> None:
        if k.shape != v.shape or k.ndim != 2 or k.shape[1] != self.d:
            raise ShapeError(f"KV entry shapes {k.shape}/{v.shape} do not match width {self.d}")
        self._steps[layer].append(step)
        self._lengths[layer].append(int(k.shape[0]))
        self._keys[layer] = np.concatenate([self._keys[layer], k.astype(DTYPE)], axis=0)
        self._values[layer] = np.concatenate([self._values[layer], v.astype(DTYPE)], axis=0)

    def keys(self, layer: int) -> FlatMatrix:
        return self._keys[layer]

    def values(self, layer: int) -> FlatMatrix:
        return self._values[layer]

    def token_count(self, layer: int) -> int:
        return int(self._keys[layer].shape[0])

    def entry_count(self, layer: int) -> int:
        return len(self._steps[layer])

    def steps(self, layer: int) -> list[int]:
        return list(self._steps[layer])

    def entry_tokens(self, layer: int) -> list[int]:
        return list(self._lengths[layer])


# ---------------------------
# Sublayers
# ---------------------------


def _check_width(model: Model, x: TokenMap) -> None:
    if x.d != model.cfg.d:
        raise ShapeError(f"input width {x.d} != model width {model.cfg.d}")


def attention_forward(
    model: Model, x: TokenMap, layer: int, cache: KVCache, step: int = 0
) -> TokenMap:
    """
    Multi-head attention of the current tokens over all cached steps plus themselves.

    The current tokens' keys and values are appended to ``cache`` afterwards,
    so a pruned step contributes only its kept tokens.
    """
    _check_width(model, x)
    lw = model.layers[layer]
    cfg = model.cfg
    tokens = x.flat()
    q = matmul(tokens, lw.wq)
    k = matmul(tokens, lw.wk)
    v = matmul(tokens, lw.wv)
    keys = np.concatenate([cache.keys(layer), k], axis=0)
    values = np.concatenate([cache.values(layer), v], axis=0)

    hd = cfg.head_dim
    scale = DTYPE(1.0 / np.sqrt(hd))
    heads = []
    for head in range(cfg.heads):
        sl = slice(head * hd, (head + 1) * hd)
        scores = matmul(q[:, sl], keys[:, sl].T) * scale
        heads.append(matmul(softmax_rows(scores), values[:, sl]))
    out = matmul(np.concatenate(heads, axis=1), lw.wo)

    cache.append(layer, step, k, v)
    return TokenMap(out.reshape(x.data.shape))


def ffn_forward(model: Model, x: TokenMap, layer: int) -> TokenMap:
    _check_width(model, x)
    lw = model.layers[layer]
    hidden = gelu(matmul(x.flat(), lw.w1) + lw.b1)
    out = matmul(hidden, lw.w2) + lw.b2
    return TokenMap(out.reshape(x.data.shape))


# ---------------------------
# Sampling
# ---------------------------


def sample_tokens(
    logits: npt.ArrayLike, temperature: float, rng: np.random.Generator
) -> npt.NDArray[np.int64]:
    """
    One codebook index per logits row.

    Temperature 0 takes the argmax (lowest index on ties); otherwise draws from
    softmax(logits / temperature) with one uniform per row.
    """
    arr = np.asarray(logits, dtype=DTYPE)
    if temperature < 0:
        raise ArgumentError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return np.argmax(arr, axis=1).astype(np.int64)
    probs = softmax_rows(arr / DTYPE(temperature))
    cum = np.cumsum(probs, axis=1, dtype=np.float64)
    u = rng.random(arr.shape[0]) * cum[:, -1]
    idx = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(idx, arr.shape[1] - 1).astype(np.int64)


# ---------------------------
# Generation
# ---------------------------


@dataclass
class StepRecord:
    step: int
    h: int
    w: int
    forwarded_tokens: int
    kv_tokens_total: int
    skipped: bool
    decisions: dict[tuple[int, SublayerKind], PruneDecision] = field(default_factory=dict)
    module_ns: dict[str, int] = field(default_factory=lambda: dict.fromkeys(PROFILE_KEYS, 0))
    wall_ns: int = 0
    # Per layer: (normalized attention input, attention output), kept when tracing.
    attention_trace: dict[int, tuple[TokenMap, TokenMap]] = field(default_factory=dict)


@dataclass
class GenerationState:
    """Mutable decoding state of one generation; never shared across runs."""

    step: int
    prediction: TokenMap
    kv: KVCache
    rng: np.random.Generator
    cache_store: LayerCacheStore | None = None
    records: list[StepRecord] = field(default_factory=list)
    history: list[TokenMap] = field(default_factory=list)
    trace: bool = False


def new_state(model: Model, condition_seed: int, sampling_seed: int, trace: bool = False) -> GenerationState:
    return GenerationState(
        step=0,
        prediction=condition_map(condition_seed, model.cfg.d),
        kv=KVCache(model.cfg.depth, model.cfg.d),
        rng=np.random.default_rng(sampling_seed),
        trace=trace,
    )


def _timed(profile: dict[str, int], key: str, fn: Callable[[TokenMap], TokenMap]) -> Callable[[TokenMap], TokenMap]:
    def run(x: TokenMap) -> TokenMap:
        t0 = time.perf_counter_ns()
        y = fn(x)
        profile[key] += time.perf_counter_ns() - t0
        return y

    return run


def _normed(x: TokenMap) -> TokenMap:
    return TokenMap(layer_norm(x.flat()).reshape(x.data.shape))


def decode_scale_step(
    state: GenerationState,
    model: Model,
    sched: ScaleSchedule,
    pruner: SublayerPruner | None = None,
) -> GenerationState:
    """
    Produce the prediction of the next scale step and advance ``state``.

    Raises:
        ArgumentError: If every step of the schedule is already decoded
        ShapeError: If the state's width does not match the model
        CacheStateError: If a pruned step runs before its sublayer was cached
    """
    step = state.step + 1
    if step > sched.K:
        raise ArgumentError(f"step {step} beyond schedule length {sched.K}")
    if state.prediction.d != model.cfg.d:
        raise ShapeError(f"prediction width {state.prediction.d} != model width {model.cfg.d}")
    h, w = sched.size(step)
    upsampled = resize(state.prediction, (h, w), sched.mode)

    if pruner is not None and pruner.is_skipped(step):
        state.records.append(
            StepRecord(step, h, w, 0, state.kv.token_count(0), skipped=True)
        )
        _logger.log_event("step_skipped", {"step": step, "h": h, "w": w})
        state.prediction = upsampled
        state.history.append(upsampled)
        state.step = step
        return state

    if pruner is not None and state.cache_store is None:
        state.cache_store = pruner.new_store()
    store = state.cache_store
    active = pruner is not None and pruner.is_active(step)
    capture = pruner is not None and store is not None and step == store.step
    ratio = pruner.ratio_for(step) if active and pruner is not None else 0.0
    record = StepRecord(
        step,
        h,
        w,
        forwarded_tokens=keep_count(h * w, ratio) if active else h * w,
        kv_tokens_total=0,
        skipped=False,
    )
    profile = record.module_ns

    x = TokenMap.from_tokens(
        matmul(upsampled.flat(), model.w_embed) + model.position(h, w), h, w
    )
    for layer in range(model.cfg.depth):
        sublayers: dict[SublayerKind, Callable[[TokenMap], TokenMap]] = {
            "attention": _timed(
                profile, "attention", lambda t, i=layer: attention_forward(model, t, i, state.kv, step)
            ),
            "ffn": _timed(profile, "ffn", lambda t, i=layer: ffn_forward(model, t, i)),
        }
        for kind in SUBLAYER_KINDS:
            normed = _normed(x)
            if active and pruner is not None and store is not None:
                y, decision = pruner.apply(sublayers[kind], normed, store, layer, kind, step, profile)
                record.decisions[(layer, kind)] = decision
            else:
                y = sublayers[kind](normed)
            if capture and store is not None:
                store.capture(layer, kind, y, step)
            if state.trace and kind == "attention":
                record.attention_trace[layer] = (normed, y)
            x = add(x, y)

    if capture:
        _logger.log_event("cache_captured", {"step": step, "entries": len(store) if store else 0})

    logits = matmul(layer_norm(x.flat()), model.w_head)
    indices = sample_tokens(logits, model.cfg.temperature, state.rng)
    residual = TokenMap(model.codebook[indices].reshape(h, w, model.cfg.d))
    state.prediction = add(upsampled, residual)
    state.history.append(state.prediction)
    record.kv_tokens_total = state.kv.token_count(0)
    state.records.append(record)
    state.step = step
    _logger.debug(
        f"step {step} ({h}x{w}): forwarded {record.forwarded_tokens}, kv total {record.kv_tokens_total}"
    )
    return state


@dataclass
class GenerationResult:
    final: TokenMap
    state: GenerationState
    metrics: RunMetrics


def generate(
    model: Model,
    sched: ScaleSchedule,
    condition_seed: int,
    sampling_seed: int,
    pruner: SublayerPruner | None = None,
    trace: bool = False,
    label: str = "",
) -> GenerationResult:
    """Decode every step of ``sched`` from the seeded condition map."""
    pruner_schedule = getattr(pruner, "schedule", None)
    if pruner_schedule is not None and pruner_schedule.sizes != sched.sizes:
        raise ArgumentError("pruner schedule does not match the decode schedule")
    state = new_state(model, condition_seed, sampling_seed, trace=trace)
    for _ in range(sched.K):
        t0 = time.perf_counter_ns()
        decode_scale_step(state, model, sched, pruner)
        state.records[-1].wall_ns = time.perf_counter_ns() - t0
    metrics = collect_run_metrics(state.records, model.cfg, label=label)
    _logger.info(
        f"generated {sched.size(sched.K)} map in {metrics.total_wall_ns / 1e6:.1f}ms",
        {"label": label, "forwarded_tokens": metrics.total_forwarded_tokens},
    )
    return GenerationResult(state.prediction, state, metrics)
