"""Vision-stage compression: event segmentation, key selection, adaptive pooling.

The stage splits a video into contiguous events at the deepest dips in
adjacent-frame similarity, ranks events and frames by text relevance, and then
pools each frame at a stride chosen by its key/non-key event and frame status.
Non-key events get their strides widened by 1/alpha so they are downsampled
harder than key events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data_io import FrameEmbeddings, RunConfig, TextEmbedding
from .kernels import avg_pool_2d, ceil_scaled, cosine, top_k_stable

__all__ = [
    "EventPartition",
    "TokenStream",
    "adaptive_pool",
    "run_vision_stage",
    "scaled_stride",
    "score_relevance",
    "segment_events",
    "select_keys",
]


@dataclass
class EventPartition:
    """Contiguous event structure over [0, T) plus relevance scores and key flags.

    boundaries[i] = j means there is a cut between frames j and j+1. Scores and
    flags start empty and are filled in by score_relevance / select_keys.
    """

    num_frames: int
    boundaries: tuple[int, ...]
    frame_scores: np.ndarray | None = None
    event_scores: np.ndarray | None = None
    key_event: np.ndarray | None = None
    key_frame: np.ndarray | None = None

    def __post_init__(self):
        self.boundaries = tuple(sorted(int(b) for b in self.boundaries))
        for b in self.boundaries:
            if not 0 <= b < self.num_frames - 1:
                raise ValueError(f"boundary {b} out of range for {self.num_frames} frames")
        if len(set(self.boundaries)) != len(self.boundaries):
            raise ValueError("duplicate boundaries")

    @property
    def num_events(self) -> int:
        return len(self.boundaries) + 1

    @property
    def events(self) -> list[range]:
        """Frame ranges of the events, in temporal order, covering [0, T) exactly."""
        starts = [0] + [b + 1 for b in self.boundaries]
        ends = [b + 1 for b in self.boundaries] + [self.num_frames]
        return [range(s, e) for s, e in zip(starts, ends)]

    def event_of_frame(self, frame: int) -> int:
        for j, ev in enumerate(self.events):
            if frame in ev:
                return j
        raise ValueError(f"frame {frame} out of range")


def _frame_vectors(v: FrameEmbeddings, frame_reduce: str) -> np.ndarray:
    """Per-frame vector used for similarity: token mean (default) or flat concat."""
    if frame_reduce == "mean":
        return v.tokens.mean(axis=1)
    if frame_reduce == "flatten":
        return v.tokens.reshape(v.num_frames, -1)
    raise ValueError(f"unknown frame_reduce mode {frame_reduce!r}")


def segment_events(v: FrameEmbeddings, k: int, frame_reduce: str = "mean") -> EventPartition:
    """Split the video into k contiguous events at the k-1 lowest adjacent similarities.

    Ties break toward the smaller (earlier) similarity index.
    """
    t = v.num_frames
    if not 1 <= k <= t:
        raise ValueError(f"need 1 <= k <= {t}, got k={k}")
    if k == 1:
        return EventPartition(num_frames=t, boundaries=())
    vecs = _frame_vectors(v, frame_reduce)
    sims = np.array([cosine(vecs[i], vecs[i + 1]) for i in range(t - 1)])
    cuts = top_k_stable(-sims, k - 1)
    return EventPartition(num_frames=t, boundaries=tuple(int(c) for c in cuts))


def score_relevance(
    v: FrameEmbeddings,
    text: TextEmbedding,
    partition: EventPartition,
    event_score: str = "mean",
) -> EventPartition:
    """Fill in cross-modal relevance: per frame against the text vector, then per event.

    Frame score is the cosine of the mean-pooled frame tokens against the text
    embedding. Event score aggregates its frames' scores by mean (default) or max.
    """
    if event_score not in ("mean", "max"):
        raise ValueError(f"unknown event_score mode {event_score!r}")
    if v.dim != text.dim:
        raise ValueError(f"embedding dims differ: frames {v.dim}, text {text.dim}")
    means = v.tokens.mean(axis=1)
    partition.frame_scores = np.array([cosine(m, text.vector) for m in means])
    agg = np.mean if event_score == "mean" else np.max
    partition.event_scores = np.array(
        [float(agg(partition.frame_scores[ev.start : ev.stop])) for ev in partition.events]
    )
    return partition


def select_keys(partition: EventPartition, alpha: float, beta: float) -> EventPartition:
    """Flag the top ceil(alpha*k) events as key, and per event the top frames as key.

    Every event, key or not, keeps max(1, ceil(beta*len)) key frames so no event
    loses all of its key frames. All selections break ties toward the earlier index.
    """
    if partition.event_scores is None or partition.frame_scores is None:
        raise ValueError("scores not populated; run score_relevance first")
    k = partition.num_events
    key_events = top_k_stable(partition.event_scores, ceil_scaled(alpha, k))
    partition.key_event = np.zeros(k, dtype=bool)
    partition.key_event[key_events] = True
    partition.key_frame = np.zeros(partition.num_frames, dtype=bool)
    for ev in partition.events:
        count = max(1, ceil_scaled(beta, len(ev)))
        local = top_k_stable(partition.frame_scores[ev.start : ev.stop], count)
        partition.key_frame[ev.start + local] = True
    return partition


def scaled_stride(stride: int, alpha: float) -> int:
    """Widen a stride by 1/alpha, rounding to the nearest integer with a floor of 1."""
    return max(1, int(math.floor(stride / alpha + 0.5)))


@dataclass
class TokenStream:
    """Flat post-pooling token sequence with per-token provenance.

    Tokens of the same frame are contiguous and frames appear in temporal
    order. grid_pos holds each pooled token's window origin (row, col) in the
    original frame grid. key_event is the group tag the pruning schedule uses.
    """

    tokens: np.ndarray                      # (n, d)
    event_id: np.ndarray                    # (n,)
    frame_id: np.ndarray                    # (n,)
    key_event: np.ndarray                   # (n,) bool
    key_frame: np.ndarray                   # (n,) bool
    grid_pos: np.ndarray                    # (n, 2)
    frame_strides: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def group_counts(self) -> tuple[int, int]:
        """(key, non-key) token counts entering the model."""
        n_key = int(np.count_nonzero(self.key_event))
        return n_key, len(self) - n_key


def _pool_frames(
    v: FrameEmbeddings,
    partition: EventPartition,
    stride_of_frame: np.ndarray,
) -> TokenStream:
    chunks, ev_ids, fr_ids, kev, kfr, pos = [], [], [], [], [], []
    event_of = np.empty(v.num_frames, dtype=np.int64)
    for j, ev in enumerate(partition.events):
        event_of[ev.start : ev.stop] = j
    for i in range(v.num_frames):
        stride = int(stride_of_frame[i])
        pooled = avg_pool_2d(v.frame_grid(i), stride)
        ph, pw = pooled.shape[0], pooled.shape[1]
        n = ph * pw
        chunks.append(pooled.reshape(n, v.dim))
        ev_ids.append(np.full(n, event_of[i]))
        fr_ids.append(np.full(n, i))
        j = event_of[i]
        kev.append(np.full(n, bool(partition.key_event[j])))
        kfr.append(np.full(n, bool(partition.key_frame[i])))
        rows, cols = np.divmod(np.arange(n), pw)
        pos.append(np.stack([rows * stride, cols * stride], axis=1))
    return TokenStream(
        tokens=np.concatenate(chunks, axis=0),
        event_id=np.concatenate(ev_ids),
        frame_id=np.concatenate(fr_ids),
        key_event=np.concatenate(kev),
        key_frame=np.concatenate(kfr),
        grid_pos=np.concatenate(pos, axis=0),
        frame_strides=stride_of_frame.astype(np.int64),
    )


def adaptive_pool(
    v: FrameEmbeddings,
    partition: EventPartition,
    s1: int,
    s2: int,
    alpha: float,
) -> TokenStream:
    """Pool every frame at the stride its key/non-key event and frame status selects.

    Key events use (s1, s2) for key/non-key frames; non-key events use the same
    pair widened by 1/alpha. Frames are pooled independently and emitted in order.
    """
    if partition.key_event is None or partition.key_frame is None:
        raise ValueError("key flags not populated; run select_keys first")
    if s1 > s2:
        raise ValueError(f"s1 must not exceed s2, got ({s1}, {s2})")
    s1_wide, s2_wide = scaled_stride(s1, alpha), scaled_stride(s2, alpha)
    stride_of_frame = np.empty(v.num_frames, dtype=np.int64)
    for j, ev in enumerate(partition.events):
        for i in ev:
            if partition.key_event[j]:
                stride_of_frame[i] = s1 if partition.key_frame[i] else s2
            else:
                stride_of_frame[i] = s1_wide if partition.key_frame[i] else s2_wide
    return _pool_frames(v, partition, stride_of_frame)


def uniform_stream(v: FrameEmbeddings, stride: int = 1) -> TokenStream:
    """Bypass path: one event, every frame key, uniform pooling at the given stride.

    stride 1 (the default) emits the raw tokens unchanged, with provenance.
    """
    partition = EventPartition(num_frames=v.num_frames, boundaries=())
    partition.key_event = np.array([True])
    partition.key_frame = np.ones(v.num_frames, dtype=bool)
    stride_of_frame = np.full(v.num_frames, stride, dtype=np.int64)
    return _pool_frames(v, partition, stride_of_frame)


def expected_token_count(grid_h: int, grid_w: int, strides: np.ndarray) -> int:
    """Closed-form retained count: sum over frames of ceil(h/s) * ceil(w/s)."""
    total = 0
    for s in strides:
        total += math.ceil(grid_h / int(s)) * math.ceil(grid_w / int(s))
    return total


def run_vision_stage(
    v: FrameEmbeddings,
    text: TextEmbedding,
    cfg: RunConfig,
) -> tuple[TokenStream, EventPartition]:
    """Full vision stage: segment, score, select, pool.

    With the stage disabled, emits a uniform stream at the baseline stride
    (raw tokens when that stride is 1) under a single all-key event.
    """
    if not cfg.stage_enabled("vision"):
        stream = uniform_stream(v, cfg.baseline_stride)
        partition = EventPartition(num_frames=v.num_frames, boundaries=())
        partition.key_event = np.array([True])
        partition.key_frame = np.ones(v.num_frames, dtype=bool)
        return stream, partition
    partition = segment_events(v, cfg.k, cfg.frame_reduce)
    partition = score_relevance(v, text, partition, cfg.event_score)
    partition = select_keys(partition, cfg.alpha, cfg.beta)
    stream = adaptive_pool(v, partition, cfg.s1, cfg.s2, cfg.alpha)
    return stream, partition
