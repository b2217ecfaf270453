"""OTP-encrypted, key-consuming byte-stream messaging over the classical channel.

Payloads are XORed with never-reused key material drawn from the shared
:class:`~qkdlink.postproc.KeyBuffer`.  A session starts with a cheap parity
handshake over the first 64 buffered bits (then discarded); after that the
two directions consume disjoint page stripes of the buffer, so duplex
traffic cannot collide on key ranges.  When the buffer runs dry, sending
blocks until fresh key arrives: throughput is bounded by key generation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .postproc import KeyBuffer
from .session import MsgType, recv_expect

HANDSHAKE_BITS = 64
CHAT_CHUNK_BYTES = 2048


class ChatRefused(RuntimeError):
    """Handshake failed: peers hold different key material."""


class KeyStreamDesync(RuntimeError):
    """Key offsets or frame sequence out of step; the chat session must abort."""


@dataclass(frozen=True)
class CipherFrame:
    seq: int
    key_offset: int      # absolute bit offset of the key range used
    ciphertext: bytes


def _xor(data: bytes, key_bits: np.ndarray) -> bytes:
    key = np.packbits(key_bits)
    buf = np.frombuffer(data, dtype=np.uint8)
    return (buf ^ key[: len(buf)]).tobytes()


def otp_seal(plaintext: bytes, buf: KeyBuffer, lane: int | None = None,
             seq: int = 0, timeout: float | None = None) -> CipherFrame:
    """Encrypt with the next key bits of a lane, consuming them exactly once.

    Blocks (back-pressure) while the buffer holds fewer than 8*len(plaintext)
    unconsumed bits on the lane.  Each frame's key range is contiguous;
    callers split payloads at page boundaries (see :class:`ChatEndpoint`).
    """
    nbits = 8 * len(plaintext)
    if not plaintext:
        return CipherFrame(seq=seq, key_offset=buf.next_range_start(lane), ciphertext=b"")
    ranges, bits = buf.take(nbits, lane=lane, timeout=timeout)
    if len(ranges) != 1:
        raise KeyStreamDesync(
            f"frame key spans {len(ranges)} ranges; split payloads at page boundaries"
        )
    return CipherFrame(seq=seq, key_offset=ranges[0][0], ciphertext=_xor(plaintext, bits))


def otp_open(frame: CipherFrame, buf: KeyBuffer, lane: int | None = None,
             timeout: float | None = None) -> bytes:
    """Decrypt a frame, consuming the mirrored key range on the receive lane."""
    if not frame.ciphertext:
        expected = buf.next_range_start(lane)
        if frame.key_offset != expected:
            raise KeyStreamDesync(f"empty frame offset {frame.key_offset}, cursor {expected}")
        return b""
    nbits = 8 * len(frame.ciphertext)
    expected = buf.next_range_start(lane)
    if frame.key_offset != expected:
        raise KeyStreamDesync(
            f"frame uses key at bit {frame.key_offset}, receiver cursor at {expected}"
        )
    ranges, bits = buf.take(nbits, lane=lane, timeout=timeout)
    if ranges[0][0] != frame.key_offset:
        raise KeyStreamDesync("consumed range diverged from frame offset")
    return _xor(frame.ciphertext, bits)


def buffer_parity(buf: KeyBuffer, nbits: int = HANDSHAKE_BITS) -> int:
    """Parity of the first ``nbits`` unconsumed bits."""
    if len(buf) < nbits or buf.consumed_upto > 0:
        raise ChatRefused(
            f"need {nbits} fresh key bits for the handshake, have {len(buf)} "
            f"(consumed {buf.consumed_upto})"
        )
    return int(buf.peek(0, nbits).sum() & 1)


def chat_handshake(chan, buf: KeyBuffer) -> None:
    """Exchange the 64-bit parity; establish iff it matches, then burn those bits.

    A single flipped bit anywhere in the window flips the parity, so
    desynchronized buffers are refused before any key is spent on traffic.
    """
    parity = buffer_parity(buf)
    chan.send(MsgType.CHAT_HANDSHAKE, bytes([parity]))
    msg = recv_expect(chan, MsgType.CHAT_HANDSHAKE)
    if len(msg.payload) != 1:
        raise ChatRefused("malformed handshake payload")
    if msg.payload[0] != parity:
        raise ChatRefused("key parities differ: buffers are desynchronized")
    buf.take(HANDSHAKE_BITS, lane=0)  # discard the disclosed window (even lane, page 0)


def pack_chat_frame(frame: CipherFrame) -> bytes:
    return frame.seq.to_bytes(8, "big") + frame.key_offset.to_bytes(8, "big") + frame.ciphertext


def unpack_chat_frame(payload: bytes) -> CipherFrame:
    if len(payload) < 16:
        raise KeyStreamDesync("short chat frame")
    return CipherFrame(
        seq=int.from_bytes(payload[:8], "big"),
        key_offset=int.from_bytes(payload[8:16], "big"),
        ciphertext=payload[16:],
    )


class ChatEndpoint:
    """Duplex OTP messaging endpoint bound to a channel and a key buffer.

    The transmitter-side terminal sends on the even page stripe and receives
    on the odd one; the receiver-side terminal mirrors that.  Frame sequence
    numbers are per direction and must be gapless.
    """

    def __init__(self, chan, buf: KeyBuffer, role: str):
        if role not in ("alice", "bob"):
            raise ValueError("role must be alice or bob")
        self.chan = chan
        self.buf = buf
        self.send_lane = 0 if role == "alice" else 1
        self.recv_lane = 1 - self.send_lane
        self._tx_seq = 0
        self._rx_seq = 0

    def handshake(self) -> None:
        chat_handshake(self.chan, self.buf)

    def send_bytes(self, data: bytes, timeout: float | None = None) -> int:
        """Seal and transmit, splitting at page boundaries; returns frames sent."""
        sent = 0
        view = memoryview(data)
        while len(view):
            room = self.buf.lane_contiguous_room(self.send_lane) // 8
            size = min(len(view), CHAT_CHUNK_BYTES, room)
            frame = otp_seal(bytes(view[:size]), self.buf, lane=self.send_lane,
                             seq=self._tx_seq, timeout=timeout)
            self.chan.send(MsgType.CHAT_DATA, pack_chat_frame(frame))
            self._tx_seq += 1
            view = view[size:]
            sent += 1
        return sent

    def send_eof(self) -> None:
        frame = CipherFrame(seq=self._tx_seq,
                            key_offset=self.buf.next_range_start(self.send_lane),
                            ciphertext=b"")
        self.chan.send(MsgType.CHAT_DATA, pack_chat_frame(frame))
        self._tx_seq += 1

    def recv_frame(self, timeout: float | None = None) -> bytes | None:
        """One frame's plaintext, or None on the peer's EOF marker."""
        msg = recv_expect(self.chan, MsgType.CHAT_DATA)
        frame = unpack_chat_frame(msg.payload)
        if frame.seq != self._rx_seq:
            raise KeyStreamDesync(f"frame seq {frame.seq}, expected {self._rx_seq}")
        self._rx_seq += 1
        if not frame.ciphertext:
            return None
        return otp_open(frame, self.buf, lane=self.recv_lane, timeout=timeout)

    def recv_all(self, timeout: float | None = None) -> bytes:
        """Collect plaintext until the peer's EOF marker."""
        parts = []
        while True:
            part = self.recv_frame(timeout=timeout)
            if part is None:
                return b"".join(parts)
            parts.append(part)
