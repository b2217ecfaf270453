from fractions import Fraction

import numpy as np
import pytest

from conftest import scaled_config
from qkdlink.core import Basis, PulseRecord, rng_stream
from qkdlink.eve import Eavesdropper, intercept_resend
from qkdlink.photonics import generate_burst, transmit_and_detect
from qkdlink.session import simulate_session


def test_matching_basis_reprepares_identically():
    rng = rng_stream(1, "e")
    matched = 0
    for i in range(2000):
        pulse = PulseRecord(i, Basis(i % 2), (i // 2) % 2, 1)
        out = intercept_resend(pulse, rng)
        assert out.photon_count == pulse.photon_count
        assert out.frame_index == pulse.frame_index
        if out.basis == pulse.basis:
            matched += 1
            assert out.bit == pulse.bit
    assert matched > 800  # half the pulses in expectation


def test_sifted_error_weight_exactly_one_quarter():
    # enumerate every branch: 4 prepared states x 2 Eve bases x 2 Bob bases,
    # with exact rational weights; keep only the sifted (Bob==Alice) subset
    error = Fraction(0)
    total = Fraction(0)
    for a_basis in (0, 1):
        for a_bit in (0, 1):
            for e_basis in (0, 1):
                # Eve's outcome distribution for this branch
                outcomes = [(a_bit, Fraction(1))] if e_basis == a_basis else [
                    (0, Fraction(1, 2)), (1, Fraction(1, 2))]
                for e_bit, w_e in outcomes:
                    for b_basis in (0, 1):
                        if b_basis != a_basis:
                            continue  # sifted out
                        branch = Fraction(1, 4) * Fraction(1, 2) * w_e * Fraction(1, 2)
                        if b_basis == e_basis:
                            # Bob reads Eve's bit deterministically
                            total += branch
                            if e_bit != a_bit:
                                error += branch
                        else:
                            # Bob's projection onto the conjugate basis is uniform
                            total += branch
                            error += branch * Fraction(1, 2)
    assert error / total == Fraction(1, 4)


def test_transform_identity_when_fraction_zero():
    rng = rng_stream(2, "e")
    bases = rng.integers(0, 2, 5000, dtype=np.uint8)
    bits = rng.integers(0, 2, 5000, dtype=np.uint8)
    eve = Eavesdropper(rng_stream(2, "ee"), fraction=0.0)
    out_bases, out_bits = eve.transform(bases, bits, np.ones(5000, np.uint8))
    assert np.array_equal(out_bases, bases)
    assert np.array_equal(out_bits, bits)


def test_no_eavesdropper_channel_is_identity():
    cfg = scaled_config(0.002, seed=3)
    tx = generate_burst(cfg, rng_stream(3, "g"))
    rx_plain = transmit_and_detect(tx, cfg, eve=None, rng=rng_stream(3, "c"))
    rx_again = transmit_and_detect(tx, cfg, eve=None, rng=rng_stream(3, "c"))
    assert np.array_equal(rx_plain.bin_index, rx_again.bin_index)
    assert np.array_equal(rx_plain.channel, rx_again.channel)


def test_fraction_validation():
    with pytest.raises(ValueError):
        Eavesdropper(rng_stream(4, "e"), fraction=1.5)


def test_eve_log_counts(tmp_path):
    rng = rng_stream(5, "e")
    eve = Eavesdropper(rng_stream(5, "ee"), fraction=1.0, keep_log=True)
    bases = rng.integers(0, 2, 100, dtype=np.uint8)
    bits = rng.integers(0, 2, 100, dtype=np.uint8)
    eve.transform(bases, bits, np.ones(100, np.uint8))
    assert eve.log.intercepted == 100
    path = tmp_path / "eve.csv"
    eve.log.dump_csv(path)
    assert len(path.read_text().strip().splitlines()) == 101


def test_simulated_qber_with_eve_in_band():
    # 1M pulses, >=10K sifted; scaled bursts keep a realistically sized sync
    # subset (the offset search needs enough pairs per candidate under Eve)
    cfg = scaled_config(0.05, seed=6, eve_enabled=True, sync_efficiency=0.98)
    alice, _ = simulate_session(cfg, 1)
    outcome = alice.outcomes[0]
    assert outcome.aborted_reason == "qber"
    assert 0.23 <= outcome.qber <= 0.27
    assert outcome.secure_bits == 0
    assert len(alice.key_buffer) == 0


def test_partial_interception_scales_qber():
    cfg = scaled_config(0.05, seed=7, eve_enabled=True, eve_fraction=0.5,
                        sync_efficiency=0.98)
    alice, _ = simulate_session(cfg, 1)
    # half interception halves the induced error: ~0.125 + intrinsic ~0.0125
    assert alice.outcomes[0].qber == pytest.approx(0.144, abs=0.025)
    assert alice.outcomes[0].aborted_reason == "qber"
