"""Domain types, configuration and the deterministic randomness contract.

Everything downstream (photonics, timing, post-processing, the protocol
engine) builds on the value types defined here.  All types are immutable;
random streams are created per consumer via :func:`rng_stream` and never
shared between modules.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT_M_PER_S = 299792458.0


class ConfigError(ValueError):
    """Invalid configuration value or unparseable configuration file."""


class Basis(IntEnum):
    """Polarization measurement basis: rectilinear {0, 90} or diagonal {-45, +45} degrees."""

    RECTILINEAR = 0
    DIAGONAL = 1


class Polarization(IntEnum):
    """The four BB84 states. H/V belong to the rectilinear basis, D/A to the diagonal one."""

    H = 0   # 0 deg,   rectilinear, bit 0
    V = 1   # 90 deg,  rectilinear, bit 1
    D = 2   # +45 deg, diagonal,    bit 0
    A = 3   # -45 deg, diagonal,    bit 1

    @property
    def basis(self) -> Basis:
        return Basis(self.value >> 1)

    @property
    def bit(self) -> int:
        return self.value & 1


def polarization_for(basis: Basis, bit: int) -> Polarization:
    """(basis, bit) -> polarization; a bijection onto the four states."""
    return Polarization((int(basis) << 1) | (int(bit) & 1))


def channel_for(basis: Basis, bit: int) -> int:
    """Detector channel for a state: ch1=H, ch2=V, ch3=D, ch4=A."""
    return 1 + (int(basis) << 1) + (int(bit) & 1)


def channel_basis(channel: int) -> Basis:
    if channel not in (1, 2, 3, 4):
        raise ValueError(f"channel must be 1..4, got {channel}")
    return Basis((channel - 1) >> 1)


def channel_bit(channel: int) -> int:
    if channel not in (1, 2, 3, 4):
        raise ValueError(f"channel must be 1..4, got {channel}")
    return (channel - 1) & 1


@dataclass(frozen=True)
class PulseRecord:
    """One emitted weak-coherent pulse."""

    frame_index: int
    basis: Basis
    bit: int
    photon_count: int


@dataclass(frozen=True)
class DetectionEvent:
    """One receiver click: global time bin, detector channel, multi-channel flag."""

    bin_index: int
    channel: int
    multi_click: bool


@dataclass(frozen=True)
class LinkBudget:
    """Optical and protocol parameters feeding both the analytic estimator and the Monte Carlo.

    Efficiencies are linear fractions in [0, 1].  ``eta_residual`` lumps
    pointing and atmospheric losses; it is calibrated so that the product of
    all four efficiency factors matches the measured end-to-end channel
    efficiency at the reference distance.
    """

    mu: float                    # mean photon number per pulse
    prf_hz: float                # pulse repetition frequency
    eta_frontend: float          # receiver front-end optics transmission
    eta_decode: float            # polarization decoding module transmission
    eta_detector: float          # single-photon detector efficiency
    eta_residual: float          # pointing + atmospheric residual
    distance_m: float
    aperture_mm: float           # receiver primary aperture diameter
    footprint0_mm: float         # beam footprint extrapolated to zero distance
    divergence_urad: float       # full beam divergence
    dark_cps: float              # dark + background counts per second, all channels
    e_pol: float                 # intrinsic polarization error probability
    sync_efficiency: float       # fraction of clicks left after frame-sync overhead
    sift_fraction: float         # expected basis-agreement fraction
    qber_sample_fraction: float  # sifted-key fraction disclosed for QBER estimation
    pa_ratio: float              # privacy amplification output/input ratio

    def detector_chain_efficiency(self) -> float:
        """Front-end optics x decoder x SPD, i.e. everything behind the aperture."""
        return self.eta_frontend * self.eta_decode * self.eta_detector

    def channel_efficiency(self) -> float:
        """Total quantum channel efficiency at the reference distance (geometric loss = 1)."""
        return self.detector_chain_efficiency() * self.eta_residual

    def validate(self) -> None:
        fractions = {
            "eta_frontend": self.eta_frontend,
            "eta_decode": self.eta_decode,
            "eta_detector": self.eta_detector,
            "eta_residual": self.eta_residual,
            "e_pol": self.e_pol,
            "sync_efficiency": self.sync_efficiency,
            "sift_fraction": self.sift_fraction,
            "qber_sample_fraction": self.qber_sample_fraction,
            "pa_ratio": self.pa_ratio,
        }
        for name, value in fractions.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"link.{name} must be in [0, 1], got {value}")
        if self.mu < 0:
            raise ConfigError(f"link.mu must be >= 0, got {self.mu}")
        if self.prf_hz <= 0:
            raise ConfigError(f"link.prf_hz must be > 0, got {self.prf_hz}")
        if self.distance_m < 0:
            raise ConfigError(f"link.distance_m must be >= 0, got {self.distance_m}")
        if self.aperture_mm <= 0 or self.footprint0_mm <= 0:
            raise ConfigError("link aperture and footprint must be positive")
        if self.divergence_urad < 0 or self.dark_cps < 0:
            raise ConfigError("link divergence and dark rate must be >= 0")


@dataclass(frozen=True)
class SimConfig:
    """Complete, reproducible description of one simulation / protocol run."""

    link: LinkBudget
    burst_seconds: float = 1.0
    bins_per_frame: int = 4
    pps_jitter_sigma_ns: float = 50.0
    pps_jitter_cap_ns: float = 100.0
    clock_spread_bins: int = 1       # 0 disables clock jitter, 1 gives the 3-bin spread
    clock_center_prob: float = 0.6   # probability a click stays in its nominal bin
    eve_enabled: bool = False
    eve_fraction: float = 1.0        # fraction of pulses intercepted when Eve is on
    tof_override_ns: float = -1.0    # <0: derive time of flight from link.distance_m
    rng_seed: int = 1

    @property
    def n_pulses(self) -> int:
        return int(round(self.link.prf_hz * self.burst_seconds))

    @property
    def frame_ns(self) -> float:
        return 1e9 / self.link.prf_hz

    @property
    def bin_ns(self) -> float:
        return self.frame_ns / self.bins_per_frame

    @property
    def sync_subset_size(self) -> int:
        """Pulses at the head of each burst reserved for frame synchronization."""
        return int(round(self.n_pulses * (1.0 - self.link.sync_efficiency)))

    def tof_ns(self) -> float:
        if self.tof_override_ns >= 0:
            return self.tof_override_ns
        return self.link.distance_m / SPEED_OF_LIGHT_M_PER_S * 1e9

    def validate(self) -> None:
        self.link.validate()
        if self.burst_seconds <= 0:
            raise ConfigError("burst_seconds must be > 0")
        if self.bins_per_frame < 2:
            raise ConfigError("bins_per_frame must be >= 2")
        if self.pps_jitter_cap_ns < self.pps_jitter_sigma_ns:
            raise ConfigError("pps_jitter_cap_ns must be >= pps_jitter_sigma_ns")
        if self.pps_jitter_sigma_ns < 0:
            raise ConfigError("pps_jitter_sigma_ns must be >= 0")
        if self.clock_spread_bins not in (0, 1):
            raise ConfigError("clock_spread_bins must be 0 or 1")
        if not 0.0 <= self.clock_center_prob <= 1.0:
            raise ConfigError("clock_center_prob must be in [0, 1]")
        if not 0.0 <= self.eve_fraction <= 1.0:
            raise ConfigError("eve_fraction must be in [0, 1]")


def default_config(rng_seed: int = 1) -> SimConfig:
    """The reference operating point: 20 MHz WCP source, mu=0.15, 300 m link.

    ``eta_residual`` is calibrated so the efficiency product equals the
    measured 31.64% total channel efficiency.
    """
    eta_frontend = 0.667
    eta_decode = 0.7547
    eta_detector = 0.70
    eta_residual = 0.3164 / (eta_frontend * eta_decode * eta_detector)
    link = LinkBudget(
        mu=0.15,
        prf_hz=20e6,
        eta_frontend=eta_frontend,
        eta_decode=eta_decode,
        eta_detector=eta_detector,
        eta_residual=eta_residual,
        distance_m=300.0,
        aperture_mm=80.0,
        footprint0_mm=30.2,
        divergence_urad=66.0,
        dark_cps=300.0,
        e_pol=0.025,
        sync_efficiency=0.995,
        sift_fraction=0.5,
        qber_sample_fraction=0.05,
        pa_ratio=11.0 / 16.0,
    )
    return SimConfig(link=link, rng_seed=rng_seed)


def rng_stream(seed: int, stream_label: str) -> np.random.Generator:
    """Deterministic, labelled random stream.

    The same ``(seed, stream_label)`` pair always yields the same draws on
    any platform; distinct labels give statistically independent streams.
    """
    digest = hashlib.sha256(stream_label.encode("utf-8")).digest()
    label_words = [int.from_bytes(digest[i : i + 8], "big") for i in range(0, 32, 8)]
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *label_words])
    return np.random.Generator(np.random.PCG64(ss))


# --- configuration files -------------------------------------------------
#
# Flat key=value text, one entry per line, keys matching SimConfig field
# paths ("link.mu=0.15").  Blank lines and lines starting with '#' are
# ignored.  Unknown keys are an error.

_LINK_FIELDS = {f.name: f.type for f in dataclasses.fields(LinkBudget)}
_TOP_FIELDS = {f.name: f.type for f in dataclasses.fields(SimConfig) if f.name != "link"}
_BOOL_FIELDS = {"eve_enabled"}
_INT_FIELDS = {"bins_per_frame", "clock_spread_bins", "rng_seed"}


def _coerce(key: str, raw: str):
    field = key.split(".")[-1]
    if field in _BOOL_FIELDS:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if field in _INT_FIELDS:
            return int(raw, 0)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_config(text: str, base: SimConfig | None = None) -> SimConfig:
    """Parse flat key=value configuration text, overriding ``base`` (defaults)."""
    cfg = base if base is not None else default_config()
    link_updates: dict = {}
    top_updates: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key.startswith("link."):
            field = key[len("link."):]
            if field not in _LINK_FIELDS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            link_updates[field] = _coerce(key, raw)
        elif key in _TOP_FIELDS:
            top_updates[key] = _coerce(key, raw)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    link = dataclasses.replace(cfg.link, **link_updates) if link_updates else cfg.link
    out = dataclasses.replace(cfg, link=link, **top_updates)
    out.validate()
    return out


def load_config(path: str | Path, base: SimConfig | None = None) -> SimConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base=base)


def format_config(cfg: SimConfig) -> str:
    """Render a config as key=value lines; parse_config(format_config(c)) == c."""
    lines = []
    for f in dataclasses.fields(LinkBudget):
        lines.append(f"link.{f.name}={getattr(cfg.link, f.name)!r}".replace("'", ""))
    for f in dataclasses.fields(SimConfig):
        if f.name == "link":
            continue
        lines.append(f"{f.name}={getattr(cfg, f.name)!r}".replace("'", ""))
    return "\n".join(lines) + "\n"
