"""Inference benchmarking with a fixed, reproducible protocol.

Protocol: batch size 1, the input tensor materialized before any clock
starts, at least 5 untimed warmup iterations, at least 30 timed
iterations of the forward pass alone under ``torch.no_grad``.  Latency
is wall-clock ``perf_counter`` per forward; throughput is defined as
``1000 / mean_ms``.  Preprocessing, data loading and postprocessing are
out of scope by construction — anything expensive belongs in the
``prepare`` hook, which runs once before the clocks.
"""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .checkpoint import checkpoint_bytes
from .errors import ConfigError
from .network import count_parameters, state_dict_arrays


@dataclass(frozen=True)
class BenchReport:
    """Latency/throughput plus model footprint, one benchmarked model each."""

    mean_ms: float
    fps: float
    p50_ms: float
    p95_ms: float
    total_params: int
    weight_bytes: int
    input_shape: tuple[int, ...]
    warmup_iters: int
    timed_iters: int
    hardware: str

    def to_text(self) -> str:
        mb = self.weight_bytes / 1e6
        return (
            f"input={'x'.join(str(d) for d in self.input_shape)}"
            f" mean_ms={self.mean_ms:.3f} fps={self.fps:.2f}"
            f" p50_ms={self.p50_ms:.3f} p95_ms={self.p95_ms:.3f}"
            f" params={self.total_params} weights_mb={mb:.1f}"
            f" warmup={self.warmup_iters} iters={self.timed_iters}"
            f" hardware={self.hardware}"
        )


def model_footprint(model: nn.Module) -> tuple[int, int]:
    """(learnable parameter count, serialized weight bytes) of ``model``.

    Weight bytes measure the full serialized state (weights and buffers
    in the checkpoint container, headers included), i.e. what a deployed
    artifact would occupy on disk.
    """
    params = count_parameters(model).total
    blob = checkpoint_bytes(state_dict_arrays(model), config={}, meta={})
    return params, len(blob)


def time_inference(
    model: nn.Module,
    input_shape: tuple[int, ...],
    warmup: int = 10,
    iters: int = 50,
    prepare: Callable[[torch.Tensor], torch.Tensor] | None = None,
    hardware: str | None = None,
) -> BenchReport:
    """Benchmark ``model.forward`` on one pre-materialized random input.

    ``input_shape`` is (C, H, W) or (1, C, H, W); larger batches are
    rejected because the protocol is defined at batch size 1.  ``prepare``
    may transform the input once (e.g. normalization) before any timing
    begins.  The model must already be in eval mode: benchmarking a
    training-mode model would time a different computation.
    """
    if warmup < 5:
        raise ConfigError(f"protocol requires at least 5 warmup iterations, got {warmup}")
    if iters < 30:
        raise ConfigError(f"protocol requires at least 30 timed iterations, got {iters}")
    if len(input_shape) == 3:
        input_shape = (1, *input_shape)
    if len(input_shape) != 4 or input_shape[0] != 1:
        raise ConfigError(f"input shape must be (C, H, W) or (1, C, H, W), got {input_shape}")
    expected = getattr(model, "in_channels", None)
    if expected is not None and input_shape[1] != expected:
        raise ConfigError(f"model expects {expected} input channels, got {input_shape[1]}")
    if model.training:
        raise RuntimeError("refusing to benchmark a model in training mode; call .eval() first")

    x = torch.randn(*input_shape)
    if prepare is not None:
        x = prepare(x)

    samples_ms: list[float] = []
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        for _ in range(iters):
            start = time.perf_counter()
            model(x)
            samples_ms.append((time.perf_counter() - start) * 1000.0)

    mean_ms = statistics.fmean(samples_ms)
    ordered = sorted(samples_ms)
    p50 = statistics.median(ordered)
    p95 = ordered[min(len(ordered) - 1, int(round(0.95 * (len(ordered) - 1))))]
    params, weight_bytes = model_footprint(model)
    return BenchReport(
        mean_ms=mean_ms,
        fps=1000.0 / mean_ms,
        p50_ms=p50,
        p95_ms=p95,
        total_params=params,
        weight_bytes=weight_bytes,
        input_shape=tuple(input_shape),
        warmup_iters=warmup,
        timed_iters=iters,
        hardware=hardware or f"{platform.processor() or platform.machine()} cpu threads={torch.get_num_threads()}",
    )
