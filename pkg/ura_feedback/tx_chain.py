"""
Transmitter chain: compressed-sensing preamble dictionary, preamble mapping and the
repeat / permute / QPSK / scramble payload encoder, plus the receiver-side inverse
helpers shared with the multi-user detector.
"""
import logging
from dataclasses import dataclass
from typing import Hashable, Optional, Tuple

import numpy as np

from ura_feedback.fec import CodeSpec, encode
from ura_feedback.models import MAX_PREAMBLE_BITS

logger = logging.getLogger(__name__)

_COLUMN_CHUNK = 4096
SQRT2 = np.sqrt(2.0)


class ResourceLimitError(Exception):
    """Requested dictionary would not fit the memory guard."""
    pass


@dataclass(frozen=True)
class SensingMatrix:
    """N_p x 2^B_p complex preamble dictionary with unit-norm columns."""
    entries: np.ndarray
    seed: int
    column_norm: float = 1.0

    @property
    def n_preamble(self) -> int:
        return self.entries.shape[0]

    @property
    def n_columns(self) -> int:
        return self.entries.shape[1]

    @property
    def b_preamble(self) -> int:
        return int(np.log2(self.n_columns))

    def column(self, nu: int) -> np.ndarray:
        return self.entries[:, nu]

    def signature(self, nu: int, length: Optional[int] = None) -> np.ndarray:
        """Column nu, optionally truncated to its first `length` entries and renormalized."""
        a = self.entries[:, nu]
        if length is None or length == len(a):
            return a
        head = a[:length]
        return head / np.linalg.norm(head)


@dataclass(frozen=True)
class SequencePair:
    """Payload permutation and scrambler assigned to one preamble index."""
    permutation: np.ndarray
    scrambler: np.ndarray

    def __post_init__(self):
        if not np.array_equal(np.sort(self.permutation), np.arange(len(self.permutation))):
            raise ValueError("permutation is not a bijection")


@dataclass
class UserPacket:
    """One active user's transmission within a slot."""
    info_bits: np.ndarray
    codeword_bits: np.ndarray
    b_preamble: int
    preamble_index: int
    preamble: np.ndarray
    payload: np.ndarray
    channel: complex = 0j
    user_id: Hashable = None

    @property
    def v_p(self) -> np.ndarray:
        return self.codeword_bits[:self.b_preamble]

    @property
    def v_d(self) -> np.ndarray:
        return self.codeword_bits[self.b_preamble:]


def build_sensing_matrix(seed: int, n_p: int, b_p: int) -> SensingMatrix:
    """
    i.i.d. complex Gaussian dictionary with unit-norm columns, generated column block
    by column block from a seeded generator.
    """
    if n_p < 1:
        raise ValueError(f"n_p must be >= 1, got {n_p}")
    if b_p > MAX_PREAMBLE_BITS:
        raise ResourceLimitError(
            f"b_p = {b_p} would need a {n_p} x 2^{b_p} dictionary; the limit is b_p <= {MAX_PREAMBLE_BITS}"
        )
    n_cols = 1 << b_p
    rng = np.random.default_rng(seed)
    entries = np.empty((n_p, n_cols), dtype=np.complex128)
    for start in range(0, n_cols, _COLUMN_CHUNK):
        width = min(_COLUMN_CHUNK, n_cols - start)
        block = rng.standard_normal((n_p, width)) + 1j * rng.standard_normal((n_p, width))
        entries[:, start:start + width] = block / np.linalg.norm(block, axis=0, keepdims=True)
    logger.debug(f"Built {n_p} x {n_cols} sensing matrix ({entries.nbytes / 2**20:.1f} MiB) from seed {seed}")
    return SensingMatrix(entries=entries, seed=seed)


def bits_to_index(bits) -> int:
    """Binary to decimal, most significant bit first."""
    value = 0
    for b in np.asarray(bits, dtype=np.uint8):
        value = (value << 1) | int(b)
    return value


def index_to_bits(index: int, width: int) -> np.ndarray:
    return np.array([(index >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.uint8)


def map_preamble(v_p, matrix: SensingMatrix) -> Tuple[int, np.ndarray]:
    v_p = np.asarray(v_p, dtype=np.uint8)
    if len(v_p) != matrix.b_preamble:
        raise ValueError(f"v_p must have {matrix.b_preamble} bits, got {len(v_p)}")
    nu = bits_to_index(v_p)
    return nu, matrix.column(nu)


def derive_sequences(global_seed: int, nu: int, m: int, b_d: int, n_d: int) -> SequencePair:
    """
    Permutation of the M*B_d bit replicas and unit-modulus scrambler of length N_d.
    Drawn from a Philox counter-based generator keyed by (global_seed, nu), so any
    receiver can regenerate the pair of a detected preamble.
    """
    if -(-m * b_d // 2) > n_d:
        raise ValueError(f"M*B_d/2 = {m * b_d / 2} does not fit N_d = {n_d}")
    key = np.array([global_seed, nu], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    permutation = rng.permutation(m * b_d)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n_d)
    return SequencePair(permutation=permutation, scrambler=np.exp(1j * theta))


def n_payload_symbols(m: int, b_d: int) -> int:
    return -(-m * b_d // 2)


def spread_rails(rail_values: np.ndarray, pair: SequencePair, n_d: int) -> np.ndarray:
    """
    Map replica amplitudes (replica index j*M + m, +1 <=> bit 0) onto scrambled QPSK
    symbols. Soft amplitudes in [-1, 1] give the soft re-modulation used for cancellation.
    """
    rails = np.asarray(rail_values, dtype=np.float64).ravel()
    if rails.shape != pair.permutation.shape:
        raise ValueError(f"expected {len(pair.permutation)} replica values, got {rails.size}")
    permuted = rails[pair.permutation]
    if len(permuted) % 2:
        permuted = np.append(permuted, 1.0)
    symbols = (permuted[0::2] + 1j * permuted[1::2]) / SQRT2
    out = np.zeros(n_d, dtype=np.complex128)
    out[:len(symbols)] = symbols * pair.scrambler[:len(symbols)]
    return out


def encode_payload(v_d, m: int, pair: SequencePair, n_d: int) -> np.ndarray:
    v_d = np.asarray(v_d, dtype=np.uint8)
    if len(v_d) * m != len(pair.permutation):
        raise ValueError(f"v_d of length {len(v_d)} repeated {m} times does not match the permutation length")
    if n_payload_symbols(m, len(v_d)) > n_d:
        raise ValueError(f"M*B_d/2 does not fit N_d = {n_d}")
    replicas = np.repeat(1.0 - 2.0 * v_d, m)
    return spread_rails(replicas, pair, n_d)


def descramble_payload(y_d: np.ndarray, pair: SequencePair) -> np.ndarray:
    """Descrambled real/imaginary rails in permuted order (dummy rail dropped)."""
    n_rails = len(pair.permutation)
    n_sym = -(-n_rails // 2)
    z = y_d[:n_sym] * np.conj(pair.scrambler[:n_sym])
    rails = np.empty(2 * n_sym)
    rails[0::2] = z.real
    rails[1::2] = z.imag
    return rails[:n_rails]


def inverse_permute(rails: np.ndarray, pair: SequencePair) -> np.ndarray:
    """Undo the replica permutation: replica[pi[i]] = rails[i]."""
    out = np.empty_like(rails)
    out[pair.permutation] = rails
    return out


def segment_energies(n_info: int, n_p: int, n_d: int, preamble_ebn0_db: float,
                     payload_ebn0_db: float, n0: float = 1.0) -> Tuple[float, float]:
    """
    Energy of the preamble and payload segments of one packet. Each segment is scaled
    so that, spread over the whole frame, it meets its own Eb/N0 with n_info bits.
    """
    n_t = n_p + n_d
    e_p = n_info * n0 * 10.0 ** (preamble_ebn0_db / 10.0) * n_p / n_t
    e_d = n_info * n0 * 10.0 ** (payload_ebn0_db / 10.0) * n_d / n_t
    return e_p, e_d


def build_user_packet(info_bits, spec: CodeSpec, matrix: SensingMatrix, global_seed: int,
                      m: int, n_d: int, channel: complex = 0j, user_id: Hashable = None) -> UserPacket:
    """FEC encode, split into preamble/payload bits and build both unit-power segments."""
    codeword = encode(spec, info_bits)
    b_p = matrix.b_preamble
    nu, x_p = map_preamble(codeword.bits[:b_p], matrix)
    v_d = codeword.bits[b_p:]
    pair = derive_sequences(global_seed, nu, m, len(v_d), n_d)
    x_d = encode_payload(v_d, m, pair, n_d)
    return UserPacket(info_bits=codeword.info_bits, codeword_bits=codeword.bits, b_preamble=b_p,
                      preamble_index=nu, preamble=x_p, payload=x_d, channel=channel, user_id=user_id)
