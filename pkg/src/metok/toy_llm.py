"""A small deterministic decoder-only transformer with an explicit KV cache.

Pre-norm residual blocks with no biases, absolute sinusoidal positions keyed to
ORIGINAL position ids (so pruned sequences keep their temporal geometry), ReLU
MLPs, greedy argmax decoding. All weights come from one seeded SplitMix64
stream, so identical configs give bitwise-identical models, prefills, and
decodes regardless of thread count.

Prefill applies the layer-wise schedule at each boundary layer: importance is
measured from that layer's own attention over its incoming sequence, then the
layer (and everything after it) runs on the pruned sequence. Text positions
are never pruned. The decode-stage policy drops cached visual entries from the
boundary layer l1 upward, either physically or by -inf masking; the two paths
agree up to float summation order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data_io import RunConfig, TextEmbedding
from .kernels import Rng64
from .schedule import PruneSchedule, retention_ratio, select_at_boundary, token_importance
from .vision import TokenStream

__all__ = [
    "DecodeOutput",
    "KvCache",
    "PrefillInput",
    "PrefillResult",
    "ToyModel",
    "apply_kv_policy",
    "attention_ratio_trace",
    "build_prefill_input",
    "decode",
    "init_model",
    "prefill",
]

VOCAB = 256
_NORM_EPS = 1e-6
_PROJECTOR_SALT = 0x56495350


@dataclass
class ToyModel:
    layers: int
    heads: int
    d_model: int
    mlp_hidden: int
    vocab: int
    seed: int
    embed: np.ndarray
    unembed: np.ndarray
    wq: list[np.ndarray]
    wk: list[np.ndarray]
    wv: list[np.ndarray]
    wo: list[np.ndarray]
    w_in: list[np.ndarray]
    w_out: list[np.ndarray]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def checksum(self) -> float:
        """Order-stable digest of all weights, for determinism checks."""
        parts = [self.embed, self.unembed] + self.wq + self.wk + self.wv + self.wo
        parts += self.w_in + self.w_out
        return float(sum(float(np.sum(p * p)) for p in parts))


def init_model(cfg: RunConfig) -> ToyModel:
    """Build the model with all weights drawn from Rng64(cfg.seed) in a fixed order."""
    if cfg.d_model % cfg.heads != 0:
        raise ValueError(f"heads ({cfg.heads}) must divide d_model ({cfg.d_model})")
    d = cfg.d_model
    hidden = max(1, int(math.floor(cfg.mlp_ratio * d + 0.5)))
    rng = Rng64(cfg.seed)

    def draw(rows: int, cols: int) -> np.ndarray:
        return rng.next_unit_array(rows * cols).reshape(rows, cols) / math.sqrt(rows)

    embed = draw(VOCAB, d) * math.sqrt(VOCAB)  # unit-scale token vectors
    wq, wk, wv, wo, w_in, w_out = [], [], [], [], [], []
    for _ in range(cfg.layers):
        wq.append(draw(d, d))
        wk.append(draw(d, d))
        wv.append(draw(d, d))
        wo.append(draw(d, d))
        w_in.append(draw(d, hidden))
        w_out.append(draw(hidden, d))
    unembed = draw(d, VOCAB)
    return ToyModel(
        layers=cfg.layers, heads=cfg.heads, d_model=d, mlp_hidden=hidden,
        vocab=VOCAB, seed=cfg.seed, embed=embed, unembed=unembed,
        wq=wq, wk=wk, wv=wv, wo=wo, w_in=w_in, w_out=w_out,
    )


def visual_projection(seed: int, d_in: int, d_model: int) -> np.ndarray:
    """Seeded linear map from embedding dim to model dim (the multimodal projector)."""
    rng = Rng64(seed ^ _PROJECTOR_SALT)
    return rng.next_unit_array(d_in * d_model).reshape(d_in, d_model) / math.sqrt(d_in)


def sinusoidal_positions(position_ids: np.ndarray, d_model: int) -> np.ndarray:
    """Absolute sinusoidal encoding rows for the given position ids."""
    pos = np.asarray(position_ids, dtype=np.float64)[:, None]
    half = np.arange((d_model + 1) // 2, dtype=np.float64)
    freq = np.power(10000.0, -2.0 * half / d_model)[None, :]
    angles = pos * freq
    pe = np.zeros((pos.shape[0], d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return pe


def _rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)


@dataclass
class PrefillInput:
    """Concatenated model input: visual block first, then the text block."""

    x: np.ndarray                # (n, d_model), positions already added
    is_text: np.ndarray          # (n,) bool
    is_key: np.ndarray           # (n,) bool; visual group tag (True on text rows)
    position_ids: np.ndarray     # (n,) original ids 0..n-1

    def __post_init__(self):
        n = self.x.shape[0]
        if not (self.is_text.shape == self.is_key.shape == self.position_ids.shape == (n,)):
            raise ValueError("per-position tags must align with the input rows")
        n_text = int(np.count_nonzero(self.is_text))
        if not np.array_equal(self.is_text, np.arange(n) >= n - n_text):
            raise ValueError("text block must follow the visual block")

    @property
    def num_text(self) -> int:
        return int(np.count_nonzero(self.is_text))


def build_prefill_input(model: ToyModel, stream: TokenStream, text: TextEmbedding) -> PrefillInput:
    """Project visual tokens to model width, embed prompt ids, add positions."""
    proj = visual_projection(model.seed, stream.dim, model.d_model)
    x_vis = stream.tokens @ proj
    x_text = model.embed[text.token_ids % model.vocab]
    x = np.concatenate([x_vis, x_text], axis=0)
    n = x.shape[0]
    ids = np.arange(n, dtype=np.int64)
    x = x + sinusoidal_positions(ids, model.d_model)
    n_vis = x_vis.shape[0]
    is_text = np.zeros(n, dtype=bool)
    is_text[n_vis:] = True
    is_key = np.ones(n, dtype=bool)
    is_key[:n_vis] = stream.key_event
    return PrefillInput(x=x, is_text=is_text, is_key=is_key, position_ids=ids)


@dataclass
class KvCache:
    """Per-layer cached keys/values plus the surviving position metadata.

    masked entries stay in place but attract -inf attention scores; the drop
    path removes them instead. is_prompt distinguishes prefill positions from
    generated ones for the attention-ratio diagnostic.
    """

    k: list[np.ndarray] = field(default_factory=list)           # (n_l, d_model)
    v: list[np.ndarray] = field(default_factory=list)
    position_ids: list[np.ndarray] = field(default_factory=list)
    is_text: list[np.ndarray] = field(default_factory=list)
    is_prompt: list[np.ndarray] = field(default_factory=list)
    masked: list[np.ndarray] = field(default_factory=list)
    prompt_len: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.k)

    def entry_counts(self) -> list[int]:
        """Physically stored entries per layer (masked entries included)."""
        return [k.shape[0] for k in self.k]

    def append(self, layer: int, k_row: np.ndarray, v_row: np.ndarray, pos: int) -> None:
        self.k[layer] = np.concatenate([self.k[layer], k_row])
        self.v[layer] = np.concatenate([self.v[layer], v_row])
        self.position_ids[layer] = np.append(self.position_ids[layer], pos)
        self.is_text[layer] = np.append(self.is_text[layer], True)
        self.is_prompt[layer] = np.append(self.is_prompt[layer], False)
        self.masked[layer] = np.append(self.masked[layer], False)


@dataclass
class PrefillResult:
    cache: KvCache
    hidden: np.ndarray           # final-layer hidden states, normalized
    final_logits: np.ndarray     # logits at the last prompt position
    layer_lengths: list[int]     # sequence length entering each layer
    prefill_ms: float


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _attention_probs(model: ToyModel, layer: int, x: np.ndarray) -> np.ndarray:
    """(heads, n, n) causal post-softmax attention of the layer over sequence x."""
    h = _rms_norm(x)
    q = _split_heads(h @ model.wq[layer], model.heads)
    k = _split_heads(h @ model.wk[layer], model.heads)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(model.head_dim)
    n = x.shape[0]
    causal = np.triu(np.full((n, n), -np.inf), k=1)
    scores = scores + causal[None, :, :]
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    return p / p.sum(axis=-1, keepdims=True)


def _prune_boundary(
    model: ToyModel,
    sched: PruneSchedule,
    layer: int,
    x: np.ndarray,
    ids: np.ndarray,
    is_text: np.ndarray,
    is_key: np.ndarray,
) -> np.ndarray:
    """Keep mask over the incoming rows of a boundary layer, from its own attention."""
    attn = _attention_probs(model, layer, x)
    rows = np.arange(x.shape[0])
    text_rows = rows[is_text]
    keep = is_text.copy()
    for group, flag in (("key", True), ("non_key", False)):
        grp_rows = rows[~is_text & (is_key == flag)]
        if grp_rows.size == 0 and sched.origin(group) == 0:
            continue
        ratio = retention_ratio(layer, group, sched)
        importance = token_importance(attn, text_rows, grp_rows)
        kept_ids = select_at_boundary(importance, ids[grp_rows], sched.origin(group), ratio)
        keep[grp_rows] = np.isin(ids[grp_rows], kept_ids)
    return keep


def prefill(model: ToyModel, inp: PrefillInput, sched: PruneSchedule) -> PrefillResult:
    """Forward the prompt, pruning visual tokens at each boundary layer's input.

    Records the sequence length entering every layer and caches each layer's
    keys/values for its surviving positions.
    """
    if sched.total_layers != model.layers:
        raise ValueError("schedule and model disagree on layer count")
    t0 = time.perf_counter()
    x = inp.x
    ids = inp.position_ids
    is_text, is_key = inp.is_text, inp.is_key
    boundaries = set(sched.boundary_layers())
    cache = KvCache(prompt_len=inp.x.shape[0])
    lengths = []
    for layer in range(model.layers):
        if layer in boundaries:
            keep = _prune_boundary(model, sched, layer, x, ids, is_text, is_key)
            x, ids = x[keep], ids[keep]
            is_text, is_key = is_text[keep], is_key[keep]
        lengths.append(x.shape[0])
        h = _rms_norm(x)
        q = _split_heads(h @ model.wq[layer], model.heads)
        k_flat = h @ model.wk[layer]
        v_flat = h @ model.wv[layer]
        k = _split_heads(k_flat, model.heads)
        v = _split_heads(v_flat, model.heads)
        n = x.shape[0]
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(model.head_dim)
        scores = scores + np.triu(np.full((n, n), -np.inf), k=1)[None, :, :]
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        out = (p @ v).transpose(1, 0, 2).reshape(n, model.d_model)
        x = x + out @ model.wo[layer]
        h2 = _rms_norm(x)
        x = x + np.maximum(h2 @ model.w_in[layer], 0.0) @ model.w_out[layer]
        cache.k.append(k_flat)
        cache.v.append(v_flat)
        cache.position_ids.append(ids.copy())
        cache.is_text.append(is_text.copy())
        cache.is_prompt.append(np.ones(n, dtype=bool))
        cache.masked.append(np.zeros(n, dtype=bool))
    hidden = _rms_norm(x)
    final_logits = hidden[-1] @ model.unembed
    return PrefillResult(
        cache=cache,
        hidden=hidden,
        final_logits=final_logits,
        layer_lengths=lengths,
        prefill_ms=(time.perf_counter() - t0) * 1000.0,
    )


def apply_kv_policy(cache: KvCache, drop_layer: int, mode: str = "drop") -> KvCache:
    """Remove cached visual entries from drop_layer upward; text always stays.

    mode "drop" deletes the entries; mode "neg_inf" keeps them flagged so
    attention masks them, which must match the drop path up to float rounding.
    """
    if mode not in ("drop", "neg_inf"):
        raise ValueError(f"unknown mode {mode!r}")
    out = KvCache(prompt_len=cache.prompt_len)
    for layer in range(cache.num_layers):
        keep_all = layer < drop_layer
        text = cache.is_text[layer]
        if keep_all:
            sel = np.ones(text.shape[0], dtype=bool)
        else:
            sel = text.copy()
        if mode == "drop":
            out.k.append(cache.k[layer][sel])
            out.v.append(cache.v[layer][sel])
            out.position_ids.append(cache.position_ids[layer][sel])
            out.is_text.append(text[sel])
            out.is_prompt.append(cache.is_prompt[layer][sel])
            out.masked.append(cache.masked[layer][sel])
        else:
            out.k.append(cache.k[layer].copy())
            out.v.append(cache.v[layer].copy())
            out.position_ids.append(cache.position_ids[layer].copy())
            out.is_text.append(text.copy())
            out.is_prompt.append(cache.is_prompt[layer].copy())
            out.masked.append(cache.masked[layer] | ~sel)
    return out


@dataclass
class DecodeOutput:
    tokens: np.ndarray            # (steps,) generated ids, greedy argmax
    logits: np.ndarray            # (steps, vocab); row s produced token s
    attn_split: np.ndarray        # (forwards, layers, 2) head-mean prompt mass (visual, text)

    @property
    def num_forwards(self) -> int:
        return self.attn_split.shape[0]


def decode(model: ToyModel, cache: KvCache, steps: int, first_logits: np.ndarray) -> DecodeOutput:
    """Greedy decode against the (possibly masked) cache.

    Token 0 is the argmax of first_logits (computed by prefill); each further
    token comes from one forward pass that appends its keys/values to every
    layer. Per forward and layer, the head-averaged attention mass landing on
    visual vs text PROMPT positions is recorded.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if cache.num_layers != model.layers:
        raise ValueError("cache and model disagree on layer count")
    tokens = [int(np.argmax(first_logits))]
    logits_rows = [np.asarray(first_logits, dtype=np.float64)]
    attn_split = np.zeros((steps - 1, model.layers, 2))
    for s in range(steps - 1):
        pos = cache.prompt_len + s
        x = model.embed[tokens[-1] % model.vocab] + sinusoidal_positions(
            np.array([pos]), model.d_model
        )[0]
        for layer in range(model.layers):
            h = _rms_norm(x[None, :])
            q = _split_heads(h @ model.wq[layer], model.heads)
            k_new = h @ model.wk[layer]
            v_new = h @ model.wv[layer]
            cache.append(layer, k_new, v_new, pos)
            k = _split_heads(cache.k[layer], model.heads)
            v = _split_heads(cache.v[layer], model.heads)
            scores = (q @ k.transpose(0, 2, 1) / math.sqrt(model.head_dim))[:, 0, :]
            masked = cache.masked[layer]
            if masked.any():
                scores[:, masked] = -np.inf
            scores -= scores.max(axis=-1, keepdims=True)
            p = np.exp(scores)
            p /= p.sum(axis=-1, keepdims=True)
            head_mean = p.mean(axis=0)
            prompt, text = cache.is_prompt[layer], cache.is_text[layer]
            attn_split[s, layer, 0] = head_mean[prompt & ~text].sum()
            attn_split[s, layer, 1] = head_mean[prompt & text].sum()
            out = (p[:, None, :] @ v).reshape(1, model.d_model)
            x = x + (out @ model.wo[layer])[0]
            h2 = _rms_norm(x[None, :])
            x = x + (np.maximum(h2 @ model.w_in[layer], 0.0) @ model.w_out[layer])[0]
        logits = _rms_norm(x[None, :])[0] @ model.unembed
        tokens.append(int(np.argmax(logits)))
        logits_rows.append(logits)
    return DecodeOutput(
        tokens=np.array(tokens[:steps], dtype=np.int64),
        logits=np.stack(logits_rows[:steps]),
        attn_split=attn_split,
    )


def attention_ratio_trace(out: DecodeOutput) -> np.ndarray:
    """Per-layer (visual_ratio, text_ratio) over prompt positions, averaged over steps.

    Each step's pair is normalized to sum to 1 before averaging, so layers
    whose cache holds no visual prompt entries report exactly (0, 1).
    """
    if out.num_forwards < 1:
        raise ValueError("no decode forwards recorded")
    totals = out.attn_split.sum(axis=-1, keepdims=True)
    if np.any(totals == 0.0):
        raise ValueError("layer with zero prompt attention mass")
    ratios = out.attn_split / totals
    return ratios.mean(axis=0)
