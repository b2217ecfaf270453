"""Shared fixtures and the acceptance-summary hook."""

import dataclasses

import pytest

from qkdlink.core import default_config

# (criterion number, label, passed, detail) tuples collected by test_acceptance
_ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def acceptance_recorder():
    def record(criterion: int, label: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE_RESULTS.append((criterion, label, passed, detail))
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num, label, ok, detail in sorted(_ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {num} [{label}]: {status} ({detail})")


def scaled_config(burst_seconds: float, seed: int = 1, **overrides):
    """Default operating point with a shorter burst for fast tests."""
    cfg = dataclasses.replace(default_config(seed), burst_seconds=burst_seconds)
    if overrides:
        link_fields = {f.name for f in dataclasses.fields(cfg.link)}
        link_kw = {k: v for k, v in overrides.items() if k in link_fields}
        top_kw = {k: v for k, v in overrides.items() if k not in link_fields}
        if link_kw:
            cfg = dataclasses.replace(cfg, link=dataclasses.replace(cfg.link, **link_kw))
        if top_kw:
            cfg = dataclasses.replace(cfg, **top_kw)
    return cfg


def noiseless_config(burst_seconds: float = 0.001, seed: int = 1, **overrides):
    """All noise sources off: exact decoding, no jitter, no darks, zero offsets."""
    kw = dict(
        e_pol=0.0,
        dark_cps=0.0,
        pps_jitter_sigma_ns=0.0,
        clock_spread_bins=0,
        tof_override_ns=0.0,
    )
    kw.update(overrides)
    return scaled_config(burst_seconds, seed, **kw)


@pytest.fixture
def small_cfg():
    return scaled_config(0.01)  # 200K pulses


@pytest.fixture
def tiny_cfg():
    return scaled_config(0.001)  # 20K pulses
