import dataclasses
import socket
import threading

import numpy as np
import pytest

from conftest import scaled_config
from qkdlink.core import default_config, rng_stream
from qkdlink.photonics import generate_burst, transmit_and_detect
from qkdlink.session import (
    BurstPhase,
    BurstState,
    ChannelClosed,
    Message,
    MsgType,
    NetworkTransport,
    ProtocolError,
    SocketChannel,
    decode_message,
    encode_message,
    make_loop_pair,
    pack_tx_burst,
    recv_expect,
    simulate_session,
    unpack_tx_burst,
)


# --- framing ---------------------------------------------------------------------


def test_hello_frame_bytes():
    assert encode_message(Message(MsgType.HELLO, b"")) == b"\x00\x00\x00\x01\x01"


def test_roundtrip_random_messages():
    rng = rng_stream(1, "msg")
    types = list(MsgType)
    for _ in range(1000):
        t = types[int(rng.integers(0, len(types)))]
        payload = rng.integers(0, 256, int(rng.integers(0, 64)), dtype=np.uint8).tobytes()
        msg = Message(t, payload)
        assert decode_message(encode_message(msg)) == msg


def test_decode_rejects_unknown_type():
    bad = b"\x00\x00\x00\x01\x7f"
    with pytest.raises(ProtocolError):
        decode_message(bad)


def test_decode_rejects_truncated():
    good = encode_message(Message(MsgType.BASES, b"payload"))
    with pytest.raises(ProtocolError):
        decode_message(good[:-2])


def test_decode_rejects_length_mismatch():
    with pytest.raises(ProtocolError):
        decode_message(b"\x00\x00\x00\x0a\x01abc")


def test_encode_rejects_oversize():
    class _HugeBytes(bytes):
        def __len__(self):
            return 2**32

    with pytest.raises(ProtocolError):
        encode_message(Message(MsgType.CHAT_DATA, _HugeBytes()))


def test_socket_channel_truncated_stream():
    # length promises 10 bytes, 5 arrive, then the peer goes away
    a, b = socket.socketpair()
    chan = SocketChannel(b, timeout=2.0)
    a.sendall(b"\x00\x00\x00\x0a\x05abcd")
    a.close()
    with pytest.raises(ChannelClosed):
        chan.recv()
    chan.close()


def test_socket_channel_roundtrip():
    a, b = socket.socketpair()
    ca, cb = SocketChannel(a, timeout=2.0), SocketChannel(b, timeout=2.0)
    ca.send(MsgType.KEY_HASH, b"12345678")
    msg = cb.recv()
    assert msg.msg_type == MsgType.KEY_HASH and msg.payload == b"12345678"
    ca.close()
    cb.close()


def test_recv_expect_rejects_out_of_order():
    ca, cb = make_loop_pair(timeout=1.0)
    ca.send(MsgType.BASES, b"")
    with pytest.raises(ProtocolError):
        recv_expect(cb, MsgType.BURST_START)


# --- state machine -----------------------------------------------------------------


def test_phase_sequence_enforced():
    st = BurstState()
    for phase in [BurstPhase.HANDSHAKE, BurstPhase.QUBIT_EXCHANGE, BurstPhase.FRAME_SYNC,
                  BurstPhase.SIFTING, BurstPhase.QBER_CHECK, BurstPhase.ERROR_CORRECTION,
                  BurstPhase.PRIVACY_AMPLIFICATION, BurstPhase.KEY_READY]:
        st.advance(phase)


def test_phase_skip_rejected():
    st = BurstState()
    st.advance(BurstPhase.HANDSHAKE)
    with pytest.raises(ProtocolError):
        st.advance(BurstPhase.SIFTING)


def test_abort_only_from_legal_phases():
    st = BurstState()
    st.advance(BurstPhase.HANDSHAKE)
    with pytest.raises(ProtocolError):
        st.advance(BurstPhase.ABORTED)
    st.advance(BurstPhase.QUBIT_EXCHANGE)
    st.advance(BurstPhase.FRAME_SYNC)
    st.advance(BurstPhase.ABORTED)  # NoLock is legal here


# --- pulse-stream transport ----------------------------------------------------------


def test_tx_burst_codec_roundtrip():
    cfg = scaled_config(0.001, seed=2)
    tx = generate_burst(cfg, rng_stream(2, "g"))
    again = unpack_tx_burst(pack_tx_burst(tx))
    assert np.array_equal(again.bases, tx.bases)
    assert np.array_equal(again.bits, tx.bits)
    assert np.array_equal(again.photon_counts, tx.photon_counts)
    assert again.basis_prbs_state == tx.basis_prbs_state
    assert again.bit_prbs_state == tx.bit_prbs_state


def test_tx_burst_codec_full_scale():
    # a complete 1-second burst serializes and parses losslessly
    cfg = default_config(3)
    tx = generate_burst(cfg, rng_stream(3, "g"))
    blob = pack_tx_burst(tx)
    assert len(blob) < 2**32 - 1
    again = unpack_tx_burst(blob)
    assert np.array_equal(again.bases, tx.bases)
    assert np.array_equal(again.photon_counts, tx.photon_counts)


def test_tx_burst_codec_rejects_truncation():
    cfg = scaled_config(0.0005, seed=4)
    tx = generate_burst(cfg, rng_stream(4, "g"))
    blob = pack_tx_burst(tx)
    with pytest.raises(ProtocolError):
        unpack_tx_burst(blob[: len(blob) // 2])


def test_network_transport_over_loopback_sockets():
    cfg = scaled_config(0.01, seed=5)  # 200K pulses
    tx = generate_burst(cfg, rng_stream(5, "g"))
    a, b = socket.socketpair()
    sender = NetworkTransport(SocketChannel(a, timeout=10.0))
    receiver = NetworkTransport(SocketChannel(b, timeout=10.0))
    result = []
    t = threading.Thread(target=lambda: result.append(receiver.receive()))
    t.start()
    sender.deliver(tx)
    t.join(timeout=10)
    assert result and np.array_equal(result[0].bits, tx.bits)
    a.close()
    b.close()


def test_transport_disconnect_aborts_burst():
    a, b = socket.socketpair()
    receiver = NetworkTransport(SocketChannel(b, timeout=2.0))
    a.sendall(b"\x00\x01\x00\x00\x0f")  # claims ~64KB pulse stream
    a.close()
    with pytest.raises(ProtocolError):
        receiver.receive()


def test_detection_identical_for_direct_and_serialized_pulses():
    # the serialized path must reproduce the in-process RxBurst bit for bit
    cfg = scaled_config(0.005, seed=6)
    tx = generate_burst(cfg, rng_stream(6, "g"))
    rx_direct = transmit_and_detect(tx, cfg, rng=rng_stream(6, "c"))
    rx_wire = transmit_and_detect(unpack_tx_burst(pack_tx_burst(tx)), cfg,
                                  rng=rng_stream(6, "c"))
    assert np.array_equal(rx_direct.bin_index, rx_wire.bin_index)
    assert np.array_equal(rx_direct.channel, rx_wire.channel)
    assert np.array_equal(rx_direct.multi_click, rx_wire.multi_click)
    assert rx_direct.realized_pps_offset_ns == rx_wire.realized_pps_offset_ns


# --- sessions -------------------------------------------------------------------------


def test_two_burst_session_buffers_identical(small_cfg):
    alice, bob = simulate_session(small_cfg, 2)
    assert alice.key_buffer.to_bytes() == bob.key_buffer.to_bytes()
    assert len(alice.key_buffer) > 0
    assert not alice.any_aborted


def test_key_accumulation_is_concatenation(small_cfg):
    one, _ = simulate_session(small_cfg, 1)
    two, _ = simulate_session(small_cfg, 2)
    first = one.key_buffer.bits()
    both = two.key_buffer.bits()
    assert len(both) > len(first) * 1.5
    assert np.array_equal(both[: len(first)], first)


def test_session_reproducible(small_cfg):
    a1, _ = simulate_session(small_cfg, 1)
    a2, _ = simulate_session(small_cfg, 1)
    assert a1.key_buffer.to_bytes() == a2.key_buffer.to_bytes()
    assert a1.outcomes[0].qber == a2.outcomes[0].qber
    assert a1.outcomes[0].offset_frames == a2.outcomes[0].offset_frames


def test_hello_mismatch_detected(small_cfg):
    other = dataclasses.replace(small_cfg, rng_seed=999)
    ca, cb = make_loop_pair(timeout=2.0)
    from qkdlink.session import InProcessTransport, run_session
    transport = InProcessTransport(2.0)
    errors = []

    def bob():
        try:
            run_session("bob", other, cb, transport, 1, hello_first=True)
        except ProtocolError as exc:
            errors.append(exc)
            cb.close()

    t = threading.Thread(target=bob)
    t.start()
    with pytest.raises(ProtocolError):
        run_session("alice", small_cfg, ca, transport, 1, hello_first=False)
    t.join(timeout=5)
    assert errors


ALLOWED_TYPES = {
    MsgType.HELLO, MsgType.BURST_START, MsgType.SYNC_SUBSET, MsgType.FRAME_OFFSET_ACK,
    MsgType.BASES, MsgType.QBER_SAMPLE, MsgType.ABORT, MsgType.WINNOW_PARITIES,
    MsgType.WINNOW_SYNDROMES, MsgType.PERM_SEED, MsgType.PA_SEED, MsgType.KEY_HASH,
}


def test_classical_channel_discloses_only_the_allowed_material(small_cfg):
    tap_a, tap_b = [], []
    alice, bob = simulate_session(small_cfg, 1, alice_tap=tap_a, bob_tap=tap_b)
    o = alice.outcomes[0]
    assert {t for t, _ in tap_a + tap_b} <= ALLOWED_TYPES

    # Bob's channel traffic carries bases and block indices, never key bits:
    # his BASES payload has exactly the room for indices + packed bases
    bob_bases = [p for t, p in tap_b if t == MsgType.BASES]
    assert len(bob_bases) == 1
    (n,) = np.frombuffer(bob_bases[0][:4], dtype=">u4")
    assert len(bob_bases[0]) == 4 + 4 * n + -(-int(n) // 8)

    # total disclosed key bits stay within the protocol budget:
    # sync subset bits + QBER sample + parities/syndromes + hash
    sync_payloads = [p for t, p in tap_a if t == MsgType.SYNC_SUBSET]
    sample_payloads = [p for t, p in tap_a if t == MsgType.QBER_SAMPLE]
    (s,) = np.frombuffer(sync_payloads[0][:4], dtype=">u4")
    (n_sample,) = np.frombuffer(sample_payloads[0][:4], dtype=">u4")
    budget = int(s) + int(n_sample) + o.disclosed_bits
    assert budget < o.sifted_bits  # disclosures never exceed the key material


def test_aborted_burst_leaves_buffers_untouched():
    cfg = scaled_config(0.01, seed=7, eve_enabled=True)
    alice, bob = simulate_session(cfg, 2)
    assert all(o.aborted_reason == "qber" for o in alice.outcomes)
    assert len(alice.key_buffer) == 0
    assert len(bob.key_buffer) == 0
