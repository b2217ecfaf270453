"""Clock/1PPS error models and the synchronization algorithms.

Alignment between transmitted pulses and receiver clicks is recovered in
three layers, coarse to fine:

1. whole-frame offset (time of flight plus most of the 1PPS error), found
   by a minimum-QBER search over candidate frame delays on a disclosed
   subset of the burst;
2. half-frame ambiguity, resolved by binning the detections twice (the
   second copy delayed by half a frame) and keeping whichever framing has
   fewer counts in its edge bins, which also prevents clicks from
   straddling frame boundaries;
3. residual one-bin clock spread, absorbed by nearest-neighbor correlation:
   a click matches its pulse if it falls in the expected bin or either
   adjacent bin.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import SimConfig


class NoLockError(RuntimeError):
    """Frame-offset search failed: no candidate produced a plausible QBER."""

    def __init__(self, min_qber: float):
        super().__init__(f"no frame lock: best interim QBER {min_qber:.3f}")
        self.min_qber = min_qber


class FifoChoice(IntEnum):
    FIFO1 = 1
    FIFO2 = 2


class Ambiguity(IntEnum):
    EXACT = 0
    NEAREST_NEIGHBOR = 1


@dataclass(frozen=True)
class MatchedPair:
    tx_index: int
    rx_channel: int
    ambiguity: Ambiguity


@dataclass(frozen=True)
class FrameHistogram:
    """Bin-wise totals folded over all frames of one binning."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def edge_fraction(self) -> float:
        if self.total == 0:
            return 0.0
        return float(self.counts[0] + self.counts[-1]) / self.total


@dataclass
class FifoView:
    """Detections binned into frames under one boundary alignment.

    ``shift`` bins are added to every global bin index before framing, so
    the two views disagree on where frames start by half a frame.  Slot and
    neighbor structure is preserved for the nearest-neighbor correlation.
    """

    shift: int
    frames: np.ndarray   # int64
    slots: np.ndarray    # int64, 0..bins_per_frame-1
    channel: np.ndarray  # uint8
    multi: np.ndarray    # bool


def sample_pps_offset(cfg: SimConfig, rng: np.random.Generator) -> float:
    """Zero-mean Gaussian 1PPS offset, sigma = pps_jitter_sigma_ns, truncated to the cap."""
    sigma = cfg.pps_jitter_sigma_ns
    cap = cfg.pps_jitter_cap_ns
    if sigma == 0:
        return 0.0
    while True:
        x = rng.normal(0.0, sigma)
        if abs(x) <= cap:
            return float(x)


def build_dual_fifo(rx, cfg: SimConfig) -> tuple[FifoView, FifoView]:
    """Bin detections twice: once at the nominal boundary, once delayed half a frame."""
    b = cfg.bins_per_frame
    half = b // 2
    out = []
    for shift in (0, half):
        shifted = rx.bin_index + shift
        out.append(
            FifoView(
                shift=shift,
                frames=shifted // b,
                slots=shifted % b,
                channel=rx.channel,
                multi=rx.multi_click,
            )
        )
    return out[0], out[1]


def frame_histogram(fifo: FifoView, cfg: SimConfig) -> FrameHistogram:
    counts = np.bincount(fifo.slots, minlength=cfg.bins_per_frame)
    return FrameHistogram(counts=counts)


def select_frame_boundary(h1: FrameHistogram, h2: FrameHistogram) -> FifoChoice:
    """Keep the framing with the smaller edge-bin fraction; ties go to FIFO1."""
    if h2.edge_fraction() < h1.edge_fraction():
        return FifoChoice.FIFO2
    return FifoChoice.FIFO1


def central_slot(hist: FrameHistogram) -> int:
    """The expected in-frame slot of a click, read off the histogram peak."""
    return int(np.argmax(hist.counts))


@dataclass
class MatchResult:
    """Vectorized pulse<->click assignment for one burst (or subset)."""

    tx_index: np.ndarray   # int64, matched pulse indices, ascending
    channel: np.ndarray    # uint8
    exact: np.ndarray      # bool, click was in the central bin
    n_multi_discard: int
    n_compete_discard: int

    def __len__(self) -> int:
        return len(self.tx_index)

    def pairs(self) -> Iterator[MatchedPair]:
        for j, ch, ex in zip(self.tx_index, self.channel, self.exact):
            yield MatchedPair(
                tx_index=int(j),
                rx_channel=int(ch),
                ambiguity=Ambiguity.EXACT if ex else Ambiguity.NEAREST_NEIGHBOR,
            )


def nnc_match(n_tx: int, fifo: FifoView, central: int, frame_offset: int,
              window: int = 1, first_tx: int = 0, last_tx: int | None = None) -> MatchResult:
    """Nearest-neighbor correlation between pulses and framed detections.

    Pulse ``j`` is expected in frame ``j + frame_offset`` at slot ``central``;
    clicks within ``window`` slots qualify.  Frames containing a multi-channel
    bin or more than one qualifying click are discarded entirely, so each
    click is consumed at most once and every match is unambiguous.
    """
    if last_tx is None:
        last_tx = n_tx
    j = fifo.frames - frame_offset
    in_win = np.abs(fifo.slots - central) <= window
    valid = in_win & (j >= first_tx) & (j < last_tx)
    vj = j[valid]
    span = last_tx - first_tx
    if span <= 0 or len(vj) == 0:
        empty = np.empty(0, dtype=np.int64)
        return MatchResult(empty, empty.astype(np.uint8), empty.astype(bool), 0, 0)
    rel = vj - first_tx
    cnt = np.bincount(rel, minlength=span)
    multi_sel = fifo.multi[valid]
    cnt_multi = np.bincount(rel[multi_sel], minlength=span)
    ok = (cnt == 1) & (cnt_multi == 0)

    ch_at = np.zeros(span, dtype=np.uint8)
    ch_at[rel] = fifo.channel[valid]
    exact_at = np.zeros(span, dtype=bool)
    exact_at[rel] = fifo.slots[valid] == central

    matched_rel = np.nonzero(ok)[0]
    n_multi = int(np.count_nonzero((cnt_multi > 0) & (cnt > 0)))
    n_compete = int(np.count_nonzero((cnt > 1) & (cnt_multi == 0)))
    return MatchResult(
        tx_index=matched_rel + first_tx,
        channel=ch_at[matched_rel],
        exact=exact_at[matched_rel],
        n_multi_discard=n_multi,
        n_compete_discard=n_compete,
    )


def interim_qber(tx_bases: np.ndarray, tx_bits: np.ndarray, fifo: FifoView,
                 central: int, candidate_offset_frames: int, sample_size: int,
                 window: int = 1) -> float:
    """Sifted mismatch fraction under a candidate frame offset.

    Matches the first ``sample_size`` pulses, keeps basis-agreeing pairs and
    compares bits.  Returns 0.5 by convention when nothing matches, which is
    also the expected value at any wrong offset.
    """
    res = nnc_match(len(tx_bases), fifo, central, candidate_offset_frames,
                    window=window, last_tx=sample_size)
    if len(res) == 0:
        return 0.5
    meas_basis = (res.channel - 1) >> 1
    meas_bit = (res.channel - 1) & 1
    agree = meas_basis == tx_bases[res.tx_index]
    if not np.any(agree):
        return 0.5
    errors = meas_bit[agree] != tx_bits[res.tx_index][agree]
    return float(np.mean(errors))


def estimate_frame_offset(tx_bases: np.ndarray, tx_bits: np.ndarray, fifo: FifoView,
                          central: int, cfg: SimConfig, max_offset_frames: int = 40,
                          sample_size: int | None = None,
                          nolock_threshold: float = 0.45) -> tuple[int, list[tuple[int, float]]]:
    """Minimum-QBER search for the whole-frame receiver offset R_N.

    Sweeps candidate delays of 0..max_offset_frames whole frames, evaluating
    the interim QBER of each on the disclosed subset; the argmin wins, lowest
    offset on ties.  Raises :class:`NoLockError` when even the best candidate
    looks uncorrelated (QBER above ``nolock_threshold``), meaning the burst
    cannot be aligned at all.
    """
    if sample_size is None:
        sample_size = len(tx_bases)
    curve = []
    best_offset = 0
    best_q = 1.1
    for r in range(max_offset_frames + 1):
        q = interim_qber(tx_bases, tx_bits, fifo, central, r, sample_size)
        curve.append((r, q))
        if q < best_q:
            best_q = q
            best_offset = r
    if best_q > nolock_threshold:
        raise NoLockError(best_q)
    return best_offset, curve


@dataclass
class SyncResult:
    fifo_choice: FifoChoice
    fifo: FifoView
    central: int
    r_n: int
    curve: list[tuple[int, float]]
    hist1: FrameHistogram
    hist2: FrameHistogram

    @property
    def recovered_bin_offset(self) -> int:
        """Whole-bin alignment implied by (FIFO, R_N, central slot)."""
        bins_per_frame = len(self.hist1.counts)
        return bins_per_frame * self.r_n + self.central - self.fifo.shift


def synchronize(tx_bases: np.ndarray, tx_bits: np.ndarray, rx, cfg: SimConfig,
                max_offset_frames: int = 40, sample_size: int | None = None) -> SyncResult:
    """Full sync pipeline: dual-FIFO binning, boundary selection, offset search."""
    f1, f2 = build_dual_fifo(rx, cfg)
    h1 = frame_histogram(f1, cfg)
    h2 = frame_histogram(f2, cfg)
    choice = select_frame_boundary(h1, h2)
    fifo = f1 if choice == FifoChoice.FIFO1 else f2
    central = central_slot(h1 if choice == FifoChoice.FIFO1 else h2)
    r_n, curve = estimate_frame_offset(tx_bases, tx_bits, fifo, central, cfg,
                                       max_offset_frames=max_offset_frames,
                                       sample_size=sample_size)
    return SyncResult(choice, fifo, central, r_n, curve, h1, h2)


def count_split_events(rx, fifo: FifoView, cfg: SimConfig) -> int:
    """Clicks whose jitter pushed them across a frame edge under this framing.

    Uses simulator ground truth (source pulse and injected bin offset), so it
    is a diagnostic for tests and reports, not part of the protocol.
    """
    if rx.source_index is None:
        raise ValueError("split counting requires simulator ground truth")
    signal = rx.source_index >= 0
    nominal = cfg.bins_per_frame * rx.source_index[signal] + rx.true_bin_offset
    actual_frame = fifo.frames[signal]
    nominal_frame = (nominal + fifo.shift) // cfg.bins_per_frame
    return int(np.count_nonzero(actual_frame != nominal_frame))


def write_sync_report(curve: list[tuple[int, float]], path: str | Path) -> None:
    """Emit the offset -> interim QBER curve as CSV (columns offset_frames,qber)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["offset_frames", "qber"])
        for offset, q in curve:
            writer.writerow([offset, f"{q:.6f}"])
