from __future__ import annotations

import numpy as np
import pytest

from sensorperf.synth import DEFAULT_RATES, SynthConfig, generate

# every channel at 2 Hz (CO2 stays slower): fast to generate, still exercises every path
LOW_RATES = {name: min(rate, 2.0) for name, rate in DEFAULT_RATES.items()}


def small_config(**kw) -> SynthConfig:
    base = dict(n_players=3, duration_ms=6 * 60 * 1000.0, rates=dict(LOW_RATES), seed=0)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture(scope="session")
def small_sessions():
    return generate(small_config())


@pytest.fixture(scope="session")
def roster_players():
    """21 short sessions prepared at dt 10 and 20 s: enough for either split mode."""
    from sensorperf.evaluation import prepare_player

    sessions = generate(small_config(n_players=21, duration_ms=4 * 60 * 1000.0, coupling=1.0))
    return [prepare_player(s.record, [10.0, 20.0]) for s in sessions]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary -------------------------------------------------------


def pytest_configure(config):
    config._criteria = {}


@pytest.fixture
def criterion(request):
    """Record ``(passed, detail)`` for one numbered acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        request.config._criteria[number] = (title, bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        title, ok, detail = crit[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
