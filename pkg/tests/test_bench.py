import time

import pytest
import torch
from torch import nn

from surgseg.bench import BenchReport, model_footprint, time_inference
from surgseg.checkpoint import checkpoint_bytes
from surgseg.errors import ConfigError
from surgseg.network import count_parameters, state_dict_arrays


class TinyNet(nn.Module):
    in_channels = 3

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 4, 3, padding=1)

    def forward(self, x):
        return self.conv(x)


class Sleeper(TinyNet):
    """Forward pass with a known floor on latency."""

    def __init__(self, seconds):
        super().__init__()
        self.seconds = seconds

    def forward(self, x):
        time.sleep(self.seconds)
        return super().forward(x)


@pytest.fixture(scope="module")
def tiny():
    m = TinyNet()
    m.eval()
    return m


def test_fps_is_inverse_mean_latency(tiny):
    report = time_inference(tiny, (3, 32, 32), warmup=5, iters=30)
    assert report.fps == pytest.approx(1000.0 / report.mean_ms, rel=1e-9)
    assert report.p50_ms <= report.p95_ms
    assert report.timed_iters == 30 and report.warmup_iters == 5
    assert report.input_shape == (1, 3, 32, 32)


def test_protocol_minimums_enforced(tiny):
    with pytest.raises(ConfigError, match="warmup"):
        time_inference(tiny, (3, 32, 32), warmup=4, iters=30)
    with pytest.raises(ConfigError, match="timed"):
        time_inference(tiny, (3, 32, 32), warmup=5, iters=29)


def test_batch_must_be_one(tiny):
    with pytest.raises(ConfigError, match="shape"):
        time_inference(tiny, (2, 3, 32, 32))
    with pytest.raises(ConfigError, match="channels"):
        time_inference(tiny, (1, 32, 32))


def test_training_mode_refused(tiny):
    tiny.train()
    try:
        with pytest.raises(RuntimeError, match="training mode"):
            time_inference(tiny, (3, 32, 32))
    finally:
        tiny.eval()


def test_prepare_hook_runs_outside_the_clock(tiny):
    calls = []

    def slow_prepare(x):
        calls.append(1)
        time.sleep(0.25)
        return x

    report = time_inference(tiny, (3, 32, 32), warmup=5, iters=30, prepare=slow_prepare)
    assert calls == [1]  # exactly once, before timing
    assert report.mean_ms < 100.0  # the 250 ms hook never pollutes the samples


def test_slow_forward_registers_in_latency():
    model = Sleeper(0.004)
    model.eval()
    report = time_inference(model, (3, 32, 32), warmup=5, iters=30)
    assert report.mean_ms >= 4.0
    assert report.fps <= 250.0


def test_model_footprint_matches_container(tiny):
    params, weight_bytes = model_footprint(tiny)
    assert params == count_parameters(tiny).total == 4 * 3 * 9 + 4
    assert weight_bytes == len(checkpoint_bytes(state_dict_arrays(tiny), config={}, meta={}))
    assert weight_bytes > params * 4  # payload plus manifest overhead


def test_report_to_text(tiny):
    report = time_inference(tiny, (3, 32, 32), warmup=5, iters=30)
    text = report.to_text()
    for token in ("mean_ms=", "fps=", "p50_ms=", "p95_ms=", "params=", "weights_mb="):
        assert token in text
    assert isinstance(report, BenchReport)
