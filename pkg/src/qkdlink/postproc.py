"""Classical key distillation: sifting, QBER estimation, Winnow, privacy amplification.

Error correction is an 8-bit-block Winnow: each pass applies a shared random
permutation, exchanges one parity bit per block, and repairs parity-
mismatched blocks with a 3-bit Hamming syndrome that locates any single
error (syndrome zero with odd parity means the eighth bit).  Passes repeat
until one completes with no parity mismatches, up to four.  Disclosed bits
(parities, syndromes, the final 64-bit verification hash) are counted and
reported; the fixed 16->11 Toeplitz compression provides the privacy margin,
so the corrected key itself is not shortened further.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np

WINNOW_BLOCK = 8
WINNOW_MAX_PASSES = 4
PA_IN_BITS = 16
PA_OUT_BITS = 11
PA_SEED_BITS = PA_IN_BITS + PA_OUT_BITS - 1  # 26
QBER_ABORT_THRESHOLD = 0.11
KEY_HASH_BITS = 64


class QberAbort(RuntimeError):
    """QBER estimate above the abort threshold; the burst yields no key."""

    def __init__(self, qber: float):
        super().__init__(f"QBER {qber:.4f} above abort threshold")
        self.qber = qber


class BurstRejected(RuntimeError):
    """Keys still differ after error correction (hash mismatch)."""


class Decision(Enum):
    CONTINUE = "continue"
    ABORT = "abort"


@dataclass(frozen=True)
class RawKey:
    """Index-aligned bits, bases and originating pulse indices for one side."""

    bits: np.ndarray
    bases: np.ndarray
    origin_indices: np.ndarray

    def __post_init__(self):
        if not (len(self.bits) == len(self.bases) == len(self.origin_indices)):
            raise ValueError("RawKey sequences must have equal lengths")

    def __len__(self) -> int:
        return len(self.bits)


def sift(alice: RawKey, bob: RawKey) -> tuple[np.ndarray, np.ndarray]:
    """Keep exactly the positions where the bases agree, order preserved."""
    if len(alice) != len(bob):
        raise ValueError(f"raw keys differ in length: {len(alice)} vs {len(bob)}")
    keep = alice.bases == bob.bases
    return alice.bits[keep].copy(), bob.bits[keep].copy()


def estimate_qber(alice_sifted: np.ndarray, bob_sifted: np.ndarray,
                  sample_fraction: float = 0.05,
                  rng: np.random.Generator | None = None,
                  sample_indices: np.ndarray | None = None,
                  ) -> tuple[float, np.ndarray, np.ndarray]:
    """Disclose a random sample, compare it, and strip it from both keys.

    ``sample_indices`` lets a protocol peer reuse the indices its counterpart
    drew; otherwise ``rng`` picks them.
    """
    n = len(alice_sifted)
    if n != len(bob_sifted):
        raise ValueError("sifted keys differ in length")
    if sample_indices is None:
        k = int(round(n * sample_fraction))
        if k < 1:
            raise ValueError(f"key too short for a {sample_fraction:.0%} QBER sample: {n} bits")
        if rng is None:
            raise ValueError("estimate_qber needs an rng when sample_indices is not given")
        sample_indices = rng.choice(n, size=k, replace=False)
    elif len(sample_indices) < 1:
        raise ValueError("empty QBER sample")
    qber = float(np.mean(alice_sifted[sample_indices] != bob_sifted[sample_indices]))
    mask = np.ones(n, dtype=bool)
    mask[sample_indices] = False
    return qber, alice_sifted[mask], bob_sifted[mask]


def check_abort(qber: float, threshold: float = QBER_ABORT_THRESHOLD) -> Decision:
    """Abort strictly above the threshold; the boundary itself continues."""
    return Decision.ABORT if qber > threshold else Decision.CONTINUE


# --- Winnow -----------------------------------------------------------------

_SYNDROME_WEIGHTS = np.arange(1, WINNOW_BLOCK, dtype=np.int64)  # positions 1..7


def block_parities(bits: np.ndarray) -> np.ndarray:
    """Per-block parity of an 8-aligned bit array."""
    return bits.reshape(-1, WINNOW_BLOCK).sum(axis=1) & 1


def block_syndromes(blocks: np.ndarray) -> np.ndarray:
    """Hamming syndrome over the first 7 bits of each block (0 means bit 8)."""
    return np.bitwise_xor.reduce(blocks[:, : WINNOW_BLOCK - 1] * _SYNDROME_WEIGHTS, axis=1)


def syndrome_error_positions(syndrome_diff: np.ndarray) -> np.ndarray:
    """In-block index of the single error a syndrome difference points at."""
    return np.where(syndrome_diff == 0, WINNOW_BLOCK - 1, syndrome_diff - 1)


def permutation_for_pass(seed: int, n: int) -> np.ndarray:
    """Shared permutation both sides derive from one disclosed 64-bit seed."""
    return np.random.Generator(np.random.PCG64(seed)).permutation(n)


def winnow_correct(alice_key: np.ndarray, bob_key: np.ndarray,
                   rng: np.random.Generator,
                   max_passes: int = WINNOW_MAX_PASSES,
                   ) -> tuple[np.ndarray, int, int]:
    """Correct Bob's key toward Alice's; returns (corrected, disclosed_bits, passes).

    Both keys are truncated to a multiple of the block size first.  Each pass
    discloses one parity per block plus a 3-bit syndrome per mismatched
    block; iteration stops after a pass with zero mismatches or after
    ``max_passes``.  Residual errors, if any, are caught by the verification
    hash downstream.
    """
    if len(alice_key) != len(bob_key):
        raise ValueError("keys differ in length")
    n = len(alice_key) - (len(alice_key) % WINNOW_BLOCK)
    alice = np.asarray(alice_key[:n], dtype=np.uint8)
    bob = np.asarray(bob_key[:n], dtype=np.uint8).copy()
    disclosed = 0
    passes = 0
    if n == 0:
        return bob, 0, 0
    for _ in range(max_passes):
        passes += 1
        perm = permutation_for_pass(int(rng.integers(0, 2**63)), n)
        a = alice[perm]
        b = bob[perm]
        pa = block_parities(a)
        pb = block_parities(b)
        disclosed += n // WINNOW_BLOCK
        mismatched = np.nonzero(pa != pb)[0]
        if len(mismatched) == 0:
            break
        va = a.reshape(-1, WINNOW_BLOCK)[mismatched]
        vb = b.reshape(-1, WINNOW_BLOCK)[mismatched]
        diff = block_syndromes(va) ^ block_syndromes(vb)
        pos = syndrome_error_positions(diff)
        disclosed += 3 * len(mismatched)
        flat = mismatched * WINNOW_BLOCK + pos
        b[flat] ^= 1
        bob[perm] = b
    return bob, disclosed, passes


# --- privacy amplification ---------------------------------------------------


def toeplitz_matrix(seed_bits: np.ndarray) -> np.ndarray:
    """The 11x16 GF(2) Toeplitz matrix defined by a 26-bit seed.

    Entry (i, j) is ``seed[10 + j - i]``: the first column reads the seed's
    first 11 bits bottom-to-top, the first row its last 16 bits left-to-right,
    sharing seed bit 10 at the corner.
    """
    seed = np.asarray(seed_bits, dtype=np.uint8)
    if len(seed) != PA_SEED_BITS:
        raise ValueError(f"Toeplitz seed must be {PA_SEED_BITS} bits, got {len(seed)}")
    idx = (PA_OUT_BITS - 1) + np.arange(PA_IN_BITS)[None, :] - np.arange(PA_OUT_BITS)[:, None]
    return seed[idx]


def privacy_amplify(key: np.ndarray, toeplitz_seed: np.ndarray) -> np.ndarray:
    """Compress each 16-bit block to 11 bits via the seeded Toeplitz hash."""
    key = np.asarray(key, dtype=np.uint8)
    if len(key) % PA_IN_BITS != 0:
        raise ValueError(f"key length must be a multiple of {PA_IN_BITS}, got {len(key)}")
    t = toeplitz_matrix(toeplitz_seed)
    blocks = key.reshape(-1, PA_IN_BITS)
    out = (blocks.astype(np.int64) @ t.T.astype(np.int64)) & 1
    return out.astype(np.uint8).ravel()


def key_hash(bits: np.ndarray) -> bytes:
    """64-bit verification digest of a bit string."""
    data = np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()
    return hashlib.sha256(len(bits).to_bytes(8, "big") + data).digest()[: KEY_HASH_BITS // 8]


@dataclass
class DistillResult:
    secure_bits: np.ndarray
    carry_out: np.ndarray   # corrected bits short of a PA block, for the next burst
    disclosed_bits: int
    winnow_passes: int
    qber: float


def distill(alice_sifted: np.ndarray, bob_sifted: np.ndarray, qber: float,
            rng: np.random.Generator,
            pa_seed: np.ndarray | None = None,
            carry: np.ndarray | None = None,
            abort_threshold: float = QBER_ABORT_THRESHOLD) -> DistillResult:
    """Abort check, Winnow, hash verification, then Toeplitz compression.

    Raises :class:`QberAbort` or :class:`BurstRejected`; on either, callers
    must leave their key buffers untouched.
    """
    if check_abort(qber, abort_threshold) is Decision.ABORT:
        raise QberAbort(qber)
    corrected, disclosed, passes = winnow_correct(alice_sifted, bob_sifted, rng)
    reference = np.asarray(alice_sifted[: len(corrected)], dtype=np.uint8)
    disclosed += KEY_HASH_BITS
    if key_hash(reference) != key_hash(corrected):
        raise BurstRejected("corrected keys still differ")
    if carry is not None and len(carry):
        corrected = np.concatenate([np.asarray(carry, dtype=np.uint8), corrected])
    n16 = len(corrected) - (len(corrected) % PA_IN_BITS)
    if pa_seed is None:
        pa_seed = rng.integers(0, 2, PA_SEED_BITS, dtype=np.uint8)
    secure = privacy_amplify(corrected[:n16], pa_seed)
    return DistillResult(
        secure_bits=secure,
        carry_out=corrected[n16:].copy(),
        disclosed_bits=disclosed,
        winnow_passes=passes,
        qber=qber,
    )


# --- accumulated key ---------------------------------------------------------


class KeyBuffer:
    """Append-only secure-key store with consume-once discipline.

    Bits are appended burst by burst and handed out exactly once.  Consumers
    take from a *lane*: the default linear lane walks the whole buffer, while
    the duplex lanes stripe over alternating 4 KiB pages so two directions of
    traffic can never collide on key material.  Every issued range is
    recorded, and overlapping issues raise.
    """

    PAGE_BITS = 4096 * 8

    def __init__(self):
        self._chunks: list[np.ndarray] = []
        self._length = 0
        self._cond = threading.Condition()
        self._lane_cursors: dict[int | None, int] = {}
        self.issued_ranges: list[tuple[int, int]] = []
        self._consumed_total = 0

    def __len__(self) -> int:
        return self._length

    @property
    def consumed_total(self) -> int:
        return self._consumed_total

    @property
    def consumed_upto(self) -> int:
        """High-water mark: no bit below it will ever be issued again."""
        return max((stop for _, stop in self.issued_ranges), default=0)

    def append(self, bits: np.ndarray) -> None:
        bits = np.asarray(bits, dtype=np.uint8)
        with self._cond:
            self._chunks.append(bits)
            self._length += len(bits)
            self._cond.notify_all()

    def bits(self) -> np.ndarray:
        with self._cond:
            if not self._chunks:
                return np.empty(0, dtype=np.uint8)
            return np.concatenate(self._chunks)

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits()).tobytes()

    def _slice(self, start: int, stop: int) -> np.ndarray:
        out = np.empty(stop - start, dtype=np.uint8)
        pos = 0
        chunk_start = 0
        for chunk in self._chunks:
            chunk_stop = chunk_start + len(chunk)
            lo = max(start, chunk_start)
            hi = min(stop, chunk_stop)
            if lo < hi:
                out[pos : pos + hi - lo] = chunk[lo - chunk_start : hi - chunk_start]
                pos += hi - lo
            chunk_start = chunk_stop
        return out

    def _lane_ranges(self, lane: int | None, cursor: int, nbits: int) -> list[tuple[int, int]]:
        """Ranges the lane would consume next; lanes 0/1 stripe alternate pages."""
        if lane is None:
            return [(cursor, cursor + nbits)]
        ranges = []
        pos = cursor
        need = nbits
        page = self.PAGE_BITS
        while need > 0:
            page_idx = pos // page
            if page_idx % 2 != lane:
                pos = (page_idx + 1) * page
                continue
            room = (page_idx + 1) * page - pos
            take = min(room, need)
            ranges.append((pos, pos + take))
            pos += take
            need -= take
            if pos % page == 0:
                pos += page  # skip the other lane's page
        return ranges

    def _lane_start(self, lane: int | None) -> int:
        if lane in self._lane_cursors:
            return self._lane_cursors[lane]
        if lane is None:
            return 0
        return 0 if lane == 0 else self.PAGE_BITS

    def next_range_start(self, lane: int | None = None) -> int:
        """Absolute bit offset the next take on this lane will start at."""
        with self._cond:
            cursor = self._lane_start(lane)
            if lane is None:
                return cursor
            page_idx = cursor // self.PAGE_BITS
            if page_idx % 2 != lane:
                return (page_idx + 1) * self.PAGE_BITS
            return cursor

    def lane_contiguous_room(self, lane: int | None = None) -> int:
        """Bits the next take can consume without crossing a page boundary.

        Structural room only; the take itself blocks until the key is
        actually buffered.  The linear lane has no pages, hence no limit.
        """
        if lane is None:
            return 2**63
        with self._cond:
            start = self.next_range_start(lane)
            page_end = (start // self.PAGE_BITS + 1) * self.PAGE_BITS
            return page_end - start

    def available(self, lane: int | None = None) -> int:
        with self._cond:
            cursor = self._lane_start(lane)
            if lane is None:
                return max(0, self._length - cursor)
            total = 0
            page = self.PAGE_BITS
            pos = cursor
            while pos < self._length:
                page_idx = pos // page
                if page_idx % 2 != lane:
                    pos = (page_idx + 1) * page
                    continue
                total += min((page_idx + 1) * page, self._length) - pos
                pos = (page_idx + 1) * page
            return total

    def seek_lane(self, lane: int | None, position: int) -> None:
        """Advance a lane cursor (used to burn the handshake window)."""
        with self._cond:
            current = self._lane_start(lane)
            if position < current:
                raise ValueError("lane cursor cannot move backward")
            self._lane_cursors[lane] = position

    def take(self, nbits: int, lane: int | None = None,
             timeout: float | None = None) -> tuple[list[tuple[int, int]], np.ndarray]:
        """Consume ``nbits`` from a lane, blocking until enough key accumulates.

        Returns the absolute bit ranges consumed and the bits themselves.
        """
        with self._cond:
            deadline = None
            while self.available(lane) < nbits:
                if not self._cond.wait(timeout=timeout):
                    raise TimeoutError(
                        f"key buffer exhausted: need {nbits} bits, lane has {self.available(lane)}"
                    )
            cursor = self._lane_start(lane)
            ranges = self._lane_ranges(lane, cursor, nbits)
            for start, stop in ranges:
                for istart, istop in self.issued_ranges:
                    if start < istop and istart < stop:
                        raise RuntimeError(
                            f"key range [{start},{stop}) overlaps issued [{istart},{istop})"
                        )
                self.issued_ranges.append((start, stop))
            self._lane_cursors[lane] = ranges[-1][1]
            self._consumed_total += nbits
            bits = np.concatenate([self._slice(a, b) for a, b in ranges])
            return ranges, bits

    def peek(self, start: int, nbits: int) -> np.ndarray:
        """Read without consuming; only for protocol checks like the chat parity."""
        with self._cond:
            if start + nbits > self._length:
                raise ValueError("peek beyond buffered key")
            return self._slice(start, start + nbits)
