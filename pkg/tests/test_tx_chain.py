import numpy as np
import pytest

from ura_feedback.fec import CodeSpec
from ura_feedback.tx_chain import (
    ResourceLimitError,
    SequencePair,
    bits_to_index,
    build_sensing_matrix,
    build_user_packet,
    derive_sequences,
    descramble_payload,
    encode_payload,
    index_to_bits,
    inverse_permute,
    map_preamble,
    n_payload_symbols,
    segment_energies,
)


def identity_pair(n_rails, n_d):
    return SequencePair(permutation=np.arange(n_rails), scrambler=np.ones(n_d, dtype=np.complex128))


class TestSensingMatrix:
    def test_shape_and_unit_columns(self, small_matrix):
        assert small_matrix.entries.shape == (400, 2048)
        assert small_matrix.b_preamble == 11
        assert np.allclose(np.linalg.norm(small_matrix.entries, axis=0), 1.0)

    def test_same_seed_same_matrix(self):
        a = build_sensing_matrix(seed=5, n_p=64, b_p=8)
        b = build_sensing_matrix(seed=5, n_p=64, b_p=8)
        c = build_sensing_matrix(seed=6, n_p=64, b_p=8)
        assert np.array_equal(a.entries, b.entries)
        assert not np.array_equal(a.entries, c.entries)

    def test_oversized_dictionary_is_refused(self):
        with pytest.raises(ResourceLimitError):
            build_sensing_matrix(seed=0, n_p=10, b_p=25)

    def test_truncated_signature_is_unit_norm(self, small_matrix):
        sig = small_matrix.signature(7, length=40)
        assert len(sig) == 40
        assert np.linalg.norm(sig) == pytest.approx(1.0, abs=1e-9)
        assert np.array_equal(small_matrix.signature(7), small_matrix.column(7))


class TestPreambleMapping:
    def test_bit_order_is_msb_first(self):
        assert bits_to_index([0] * 15) == 0
        assert bits_to_index([0] * 14 + [1]) == 1
        assert bits_to_index([1] * 15) == 32767
        assert index_to_bits(5, 4).tolist() == [0, 1, 0, 1]

    def test_map_preamble_returns_column(self):
        matrix = build_sensing_matrix(seed=1, n_p=1, b_p=15)
        nu, x_p = map_preamble(np.ones(15), matrix)
        assert nu == 32767
        assert np.array_equal(x_p, matrix.column(32767))

    def test_map_preamble_length_mismatch(self, small_matrix):
        with pytest.raises(ValueError):
            map_preamble([1, 0, 1], small_matrix)


class TestSequences:
    def test_deterministic(self):
        a = derive_sequences(9, 123, 4, 50, 200)
        b = derive_sequences(9, 123, 4, 50, 200)
        assert np.array_equal(a.permutation, b.permutation)
        assert np.array_equal(a.scrambler, b.scrambler)

    def test_bijection_and_unit_modulus(self):
        pair = derive_sequences(9, 77, 4, 50, 200)
        assert np.array_equal(np.sort(pair.permutation), np.arange(200))
        assert np.allclose(np.abs(pair.scrambler), 1.0)

    def test_distinct_preambles_get_distinct_pairs(self, rng):
        collisions = 0
        for _ in range(1000):
            nu, other = rng.choice(2 ** 15, 2, replace=False)
            a = derive_sequences(3, int(nu), 2, 20, 20)
            b = derive_sequences(3, int(other), 2, 20, 20)
            collisions += np.array_equal(a.permutation, b.permutation) and np.allclose(a.scrambler, b.scrambler)
        assert collisions == 0

    def test_payload_must_fit(self):
        with pytest.raises(ValueError):
            derive_sequences(0, 0, 22, 496, 5000)

    def test_invalid_permutation_rejected(self):
        with pytest.raises(ValueError):
            SequencePair(permutation=np.array([0, 0, 1]), scrambler=np.ones(3))


class TestPayloadEncoding:
    def test_identity_mapping_of_zero_bits(self):
        out = encode_payload([0, 0], 2, identity_pair(4, 5), 5)
        expected = (1 + 1j) / np.sqrt(2)
        assert np.allclose(out[:2], expected)
        assert not out[2:].any()

    def test_system_a_padding(self):
        assert n_payload_symbols(22, 496) == 5456
        pair = derive_sequences(1, 42, 22, 496, 5500)
        out = encode_payload(np.zeros(496), 22, pair, 5500)
        assert np.count_nonzero(out == 0) == 44
        assert not out[5456:].any()

    def test_zero_bits_reproduce_scrambler(self):
        pair = derive_sequences(2, 5, 3, 40, 80)
        out = encode_payload(np.zeros(40), 3, pair, 80)
        assert np.allclose(out[:60], (1 + 1j) / np.sqrt(2) * pair.scrambler[:60])

    def test_unit_power_symbols(self, rng):
        pair = derive_sequences(2, 5, 3, 40, 80)
        out = encode_payload(rng.integers(0, 2, 40), 3, pair, 80)
        assert np.allclose(np.abs(out[:60]), 1.0)

    def test_odd_replica_count_pads_dummy_rail(self):
        out = encode_payload([1], 3, identity_pair(3, 2), 2)
        assert out[1] == pytest.approx((-1 + 1j) / np.sqrt(2))

    def test_descramble_and_inverse_permute_round_trip(self, rng):
        bits = rng.integers(0, 2, 30)
        pair = derive_sequences(4, 11, 5, 30, 100)
        rails = descramble_payload(encode_payload(bits, 5, pair, 100), pair) * np.sqrt(2)
        replicas = inverse_permute(rails, pair).reshape(30, 5)
        assert np.allclose(replicas, (1.0 - 2.0 * bits)[:, None])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            encode_payload([0, 1, 0], 2, identity_pair(4, 5), 5)


class TestUserPacket:
    def test_preamble_bits_select_column_and_sequences(self, small_matrix, short_polar, rng):
        info = rng.integers(0, 2, 32)
        packet = build_user_packet(info, short_polar, small_matrix, global_seed=8, m=4, n_d=300)
        assert len(packet.v_p) == 11 and len(packet.v_d) == 117
        assert packet.preamble_index == bits_to_index(packet.v_p)
        assert np.array_equal(packet.preamble, small_matrix.column(packet.preamble_index))
        pair = derive_sequences(8, packet.preamble_index, 4, 117, 300)
        assert np.array_equal(packet.payload, encode_payload(packet.v_d, 4, pair, 300))

    def test_equal_preamble_bits_share_sequences(self, small_matrix, rng):
        spec = CodeSpec.hamming_109_100()
        a = rng.integers(0, 2, 100)
        b = a.copy()
        b[-1] ^= 1
        pa = build_user_packet(a, spec, small_matrix, 8, 2, 200)
        pb = build_user_packet(b, spec, small_matrix, 8, 2, 200)
        assert pa.preamble_index == pb.preamble_index
        assert not np.array_equal(pa.payload, pb.payload)

    def test_segment_energies(self):
        e_p, e_d = segment_energies(100, 2000, 5500, 12.0, 3.0)
        assert e_p == pytest.approx(100 * 10 ** 1.2 * 2000 / 7500)
        assert e_d == pytest.approx(100 * 10 ** 0.3 * 5500 / 7500)
