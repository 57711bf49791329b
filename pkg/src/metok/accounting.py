"""Analytic FLOPs and KV-memory models plus reduction reports.

The cost model is a documented contract, not a profiler:

    layer_flops(n) = (8 + 4*mlp_ratio) * n * d^2  +  4 * n^2 * d

with d = d_model: QKV and output projections cost 8*n*d^2, attention scores
and values 4*n^2*d, and the MLP 4*mlp_ratio*n*d^2. Decode charges each new
token the same projection cost plus attention against the cached context:

    step_flops(c) = (8 + 4*mlp_ratio) * d^2  +  4 * c * d

where c counts that layer's cached prompt survivors, previously generated
tokens, and the token itself. KV memory is 2 (K and V) * positions * d_model *
bytes_per_element, summed over layers, counting the per-layer prompt cache
left after the decode-stage keep mask.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data_io import RunConfig
from .schedule import PruneSchedule

__all__ = [
    "InferenceTrace",
    "ReductionReport",
    "analytic_trace",
    "baseline_trace",
    "kv_bytes",
    "layer_flops",
    "pipeline_flops",
    "reduction_report",
]

DEFAULT_BYTES_PER_ELEMENT = 2  # half precision, the common serving default


@dataclass
class InferenceTrace:
    """Per-layer shape of one run: enough to price it without re-running it."""

    layer_lengths: list[int]       # sequence length entering each layer at prefill
    cached_positions: list[int]    # per-layer prompt cache after the decode keep mask
    decode_steps: int              # decode forward passes (appended tokens)
    d_model: int
    mlp_ratio: float
    prefill_ms: float = 0.0

    def __post_init__(self):
        if len(self.layer_lengths) != len(self.cached_positions):
            raise ValueError("per-layer lists disagree on layer count")
        if self.decode_steps < 0:
            raise ValueError("decode_steps must be >= 0")
        if any(n < 0 for n in self.layer_lengths) or any(c < 0 for c in self.cached_positions):
            raise ValueError("negative counts in trace")

    @property
    def num_layers(self) -> int:
        return len(self.layer_lengths)


def layer_flops(n: int, d_model: int, mlp_ratio: float) -> float:
    """Cost of one transformer layer over an n-token sequence (documented contract)."""
    if n < 0:
        raise ValueError("sequence length must be >= 0")
    d = d_model
    return (8 + 4 * mlp_ratio) * n * d * d + 4 * n * n * d


def pipeline_flops(trace: InferenceTrace) -> float:
    """Total prefill plus decode FLOPs for the traced run."""
    d, rho = trace.d_model, trace.mlp_ratio
    total = sum(layer_flops(n, d, rho) for n in trace.layer_lengths)
    proj = (8 + 4 * rho) * d * d
    for step in range(trace.decode_steps):
        for cached in trace.cached_positions:
            total += proj + 4 * (cached + step + 1) * d
    return total


def kv_bytes(trace: InferenceTrace, bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> int:
    """KV-cache footprint of the prompt: 2 * positions * d_model * element size, per layer."""
    return 2 * trace.d_model * bytes_per_element * sum(trace.cached_positions)


@dataclass
class ReductionReport:
    """Baseline vs compressed totals and percentage reductions for one run pair."""

    flops_baseline: float
    flops_compressed: float
    kv_baseline: int
    kv_compressed: int
    prefill_ms_baseline: float
    prefill_ms_compressed: float
    config: dict

    @staticmethod
    def _pct(baseline: float, compressed: float) -> float:
        if baseline == 0:
            return 0.0
        return 100.0 * (1.0 - compressed / baseline)

    @property
    def flops_reduction_pct(self) -> float:
        return self._pct(self.flops_baseline, self.flops_compressed)

    @property
    def kv_reduction_pct(self) -> float:
        return self._pct(self.kv_baseline, self.kv_compressed)

    @property
    def prefill_reduction_pct(self) -> float:
        return self._pct(self.prefill_ms_baseline, self.prefill_ms_compressed)

    def to_dict(self) -> dict:
        return {
            "flops": {
                "baseline": self.flops_baseline,
                "compressed": self.flops_compressed,
                "reduction_pct": self.flops_reduction_pct,
            },
            "kv_bytes": {
                "baseline": self.kv_baseline,
                "compressed": self.kv_compressed,
                "reduction_pct": self.kv_reduction_pct,
            },
            "prefill_ms": {
                "baseline": self.prefill_ms_baseline,
                "compressed": self.prefill_ms_compressed,
                "reduction_pct": self.prefill_reduction_pct,
            },
            "config": self.config,
        }


def reduction_report(
    baseline: InferenceTrace,
    compressed: InferenceTrace,
    config: dict | None = None,
    bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT,
    deterministic_timing: bool = True,
) -> ReductionReport:
    """Compare two traces metric by metric.

    Wall-clock prefill times are hardware noise, so by default they are zeroed
    in the report to keep emitted artifacts byte-reproducible; pass
    deterministic_timing=False to carry the measured values through.
    """
    if (baseline.d_model, baseline.mlp_ratio) != (compressed.d_model, compressed.mlp_ratio):
        raise ValueError("traces come from different model dims")
    flops_b = pipeline_flops(baseline)
    if flops_b == 0:
        raise ValueError("baseline trace has zero FLOPs")
    ms_b = 0.0 if deterministic_timing else baseline.prefill_ms
    ms_c = 0.0 if deterministic_timing else compressed.prefill_ms
    return ReductionReport(
        flops_baseline=flops_b,
        flops_compressed=pipeline_flops(compressed),
        kv_baseline=kv_bytes(baseline, bytes_per_element),
        kv_compressed=kv_bytes(compressed, bytes_per_element),
        prefill_ms_baseline=ms_b,
        prefill_ms_compressed=ms_c,
        config=config or {},
    )


def analytic_trace(
    cfg: RunConfig,
    n_key: int,
    n_nonkey: int,
    text_len: int,
    decode_steps: int,
) -> InferenceTrace:
    """Price a compressed run from the schedule alone, no forward pass needed.

    Per-layer lengths follow the two-group retention counts plus the text; the
    prompt cache keeps everything below the drop boundary and text only above it.
    """
    sched = PruneSchedule.from_config(cfg, n_key, n_nonkey)
    lengths = [
        sched.keep_count(l, "key") + sched.keep_count(l, "non_key") + text_len
        for l in range(cfg.layers)
    ]
    drop_layer = sched.kv_drop_layer() if cfg.stage_enabled("decode") else cfg.layers
    cached = [lengths[l] if l < drop_layer else text_len for l in range(cfg.layers)]
    return InferenceTrace(
        layer_lengths=lengths,
        cached_positions=cached,
        decode_steps=decode_steps,
        d_model=cfg.d_model,
        mlp_ratio=cfg.mlp_ratio,
    )


def baseline_trace(
    cfg: RunConfig,
    n_visual: int,
    text_len: int,
    decode_steps: int,
) -> InferenceTrace:
    """Price the no-compression run: full sequence at every layer, full cache."""
    n = n_visual + text_len
    return InferenceTrace(
        layer_lengths=[n] * cfg.layers,
        cached_positions=[n] * cfg.layers,
        decode_steps=decode_steps,
        d_model=cfg.d_model,
        mlp_ratio=cfg.mlp_ratio,
    )
