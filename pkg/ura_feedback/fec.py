"""
Forward error correction: CRC, CRC-aided polar codes with successive-cancellation-list
decoding, and the shortened (109,100) SEC-DED Hamming code.

LLR convention everywhere: llr = log(P(bit=0) / P(bit=1)).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

logger = logging.getLogger(__name__)

LLR_CLIP = 50.0

# Generator polynomials including the leading x^crc_len term.
CRC_POLYNOMIALS = {
    11: 0xE21,     # x^11 + x^10 + x^9 + x^5 + 1
    16: 0x11021,   # CCITT
}

HAMMING_PARITY_BITS = 9
HAMMING_MOTHER_INFO = 119
HAMMING_SHORTENED = 19


class CodeKind(str, Enum):
    HAMMING_109_100 = "hamming_109_100"
    POLAR_CRC = "polar_crc"


class DecodeResult(NamedTuple):
    info_bits: np.ndarray
    crc_ok: bool
    # Hamming only: a single-bit correction was applied, so the word is not self-checking
    corrected: bool = False


@dataclass(frozen=True)
class Codeword:
    bits: np.ndarray
    info_bits: np.ndarray


# ---------------------------------------------------------------- CRC

def _generator_bits(crc_len: int) -> np.ndarray:
    try:
        poly = CRC_POLYNOMIALS[crc_len]
    except KeyError:
        raise ValueError(f"unsupported crc_len {crc_len}; supported: {sorted(CRC_POLYNOMIALS)}") from None
    return np.array([(poly >> (crc_len - i)) & 1 for i in range(crc_len + 1)], dtype=np.uint8)


def _crc_remainder(bits: np.ndarray, crc_len: int) -> np.ndarray:
    gen = _generator_bits(crc_len)
    reg = np.concatenate([np.asarray(bits, dtype=np.uint8), np.zeros(crc_len, dtype=np.uint8)])
    for i in range(len(bits)):
        if reg[i]:
            reg[i:i + crc_len + 1] ^= gen
    return reg[len(bits):]


def crc_append(info_bits: Sequence[int], crc_len: int) -> np.ndarray:
    """Return info_bits followed by crc_len check bits (MSB-first long division over GF(2))."""
    info = np.asarray(info_bits, dtype=np.uint8)
    if crc_len == 0:
        return info.copy()
    return np.concatenate([info, _crc_remainder(info, crc_len)])


def crc_check(bits: Sequence[int], crc_len: int) -> bool:
    """True when the trailing crc_len bits are the CRC of the leading ones."""
    bits = np.asarray(bits, dtype=np.uint8)
    if crc_len == 0:
        return True
    if len(bits) < crc_len:
        raise ValueError(f"codeword of length {len(bits)} is shorter than crc_len {crc_len}")
    return bool(np.array_equal(_crc_remainder(bits[:-crc_len], crc_len), bits[-crc_len:]))


# ---------------------------------------------------------------- polar construction

def _log_phi(x: float) -> float:
    """log of the Gaussian-approximation phi function (Chung's two-piece fit)."""
    if x <= 0.0:
        return 0.0
    if x <= 10.0:
        return -0.4527 * x ** 0.86 + 0.0218
    return 0.5 * np.log(np.pi / x) - x / 4.0 + np.log1p(-10.0 / (7.0 * x))


def _inverse_log_phi(target: float) -> float:
    lo, hi = 0.0, 1.0
    while _log_phi(hi) > target:
        hi *= 2.0
    if _log_phi(lo) <= target:
        return 0.0
    return brentq(lambda x: _log_phi(x) - target, lo, hi, xtol=1e-12, maxiter=200)


def _check_node_mean(m: float) -> float:
    # phi^-1(1 - (1 - phi(m))^2), evaluated as phi(m) * (2 - phi(m)) in the log domain
    log_phi = _log_phi(m)
    return _inverse_log_phi(log_phi + np.log(2.0 - np.exp(log_phi)))


@lru_cache(maxsize=16)
def gaussian_approximation_means(mother_len: int, design_snr_db: float) -> Tuple[float, ...]:
    """
    Mean LLR of every synthetic bit-channel of a length-mother_len polar code under
    the Gaussian approximation, in the natural order of u @ F^{kron n}.
    """
    n_log = int(np.log2(mother_len))
    if 2 ** n_log != mother_len:
        raise ValueError(f"mother_len must be a power of two, got {mother_len}")
    means = [4.0 * 10.0 ** (design_snr_db / 10.0)]
    for _ in range(n_log):
        nxt = []
        for m in means:
            nxt.append(_check_node_mean(m))
            nxt.append(2.0 * m)
        means = nxt
    return tuple(means)


def polar_transform(u: np.ndarray) -> np.ndarray:
    """x = u @ F^{kron n} over GF(2), F = [[1, 0], [1, 1]]."""
    x = np.array(u, dtype=np.uint8, copy=True)
    n = len(x)
    step = n // 2
    while step >= 1:
        view = x.reshape(-1, 2, step)
        view[:, 0, :] ^= view[:, 1, :]
        step //= 2
    return x


# ---------------------------------------------------------------- Hamming

@lru_cache(maxsize=1)
def hamming_parity_check() -> np.ndarray:
    """
    Parity-check matrix of the shortened (109,100) code, shape (9, 109).

    The (128,119) mother code uses distinct odd-weight 9-bit columns: every weight-3
    vector then the first weight-5 vectors (ascending integer order) for the 119 data
    positions, and the 9 unit vectors for the parity positions. Shortening drops the
    first 19 data columns.
    """
    weight3 = [v for v in range(1, 2 ** HAMMING_PARITY_BITS) if bin(v).count("1") == 3]
    weight5 = [v for v in range(1, 2 ** HAMMING_PARITY_BITS) if bin(v).count("1") == 5]
    data_cols = (weight3 + weight5)[:HAMMING_MOTHER_INFO]
    cols = data_cols[HAMMING_SHORTENED:] + [1 << (HAMMING_PARITY_BITS - 1 - i) for i in range(HAMMING_PARITY_BITS)]
    bits = [[(c >> (HAMMING_PARITY_BITS - 1 - r)) & 1 for c in cols] for r in range(HAMMING_PARITY_BITS)]
    return np.array(bits, dtype=np.uint8)


# ---------------------------------------------------------------- code description

@dataclass(frozen=True)
class CodeSpec:
    """Static description of one FEC configuration."""
    kind: CodeKind
    info_len: int
    coded_len: int
    crc_len: int = 0
    list_size: int = 8
    frozen_set: Tuple[int, ...] = ()
    mother_len: int = 0
    design_snr_db: float = 0.0

    def __post_init__(self):
        if self.info_len + self.crc_len > self.coded_len:
            raise ValueError(
                f"info_len + crc_len ({self.info_len + self.crc_len}) exceeds coded_len ({self.coded_len})"
            )
        if self.kind == CodeKind.POLAR_CRC:
            expected = self.mother_len - (self.info_len + self.crc_len)
            if len(self.frozen_set) != expected:
                raise ValueError(f"polar frozen set must hold {expected} positions, got {len(self.frozen_set)}")
            if self.list_size < 1:
                raise ValueError("list_size must be >= 1")
            if not set(range(self.coded_len, self.mother_len)) <= set(self.frozen_set):
                raise ValueError("shortened positions (>= coded_len) must be frozen")

    @classmethod
    def polar(cls, info_len: int = 100, crc_len: int = 11, coded_len: int = 511,
              list_size: int = 8, design_snr_db: float = 0.0,
              frozen_set: Optional[Sequence[int]] = None) -> "CodeSpec":
        """
        CRC-aided polar code. The mother length is the next power of two of coded_len;
        trailing positions are shortened by freezing them (they then always carry 0).
        """
        mother_len = 1 << int(np.ceil(np.log2(coded_len)))
        k = info_len + crc_len
        if frozen_set is None:
            means = np.array(gaussian_approximation_means(mother_len, float(design_snr_db)))
            shortened = np.arange(coded_len, mother_len)
            means[shortened] = -np.inf
            order = np.argsort(-means, kind="stable")
            info_positions = np.sort(order[:k])
            frozen_set = sorted(set(range(mother_len)) - set(info_positions.tolist()))
        return cls(kind=CodeKind.POLAR_CRC, info_len=info_len, coded_len=coded_len, crc_len=crc_len,
                   list_size=list_size, frozen_set=tuple(int(i) for i in frozen_set),
                   mother_len=mother_len, design_snr_db=float(design_snr_db))

    @classmethod
    def hamming_109_100(cls) -> "CodeSpec":
        return cls(kind=CodeKind.HAMMING_109_100, info_len=100, coded_len=109)

    @cached_property
    def info_positions(self) -> np.ndarray:
        frozen = set(self.frozen_set)
        return np.array([i for i in range(self.mother_len) if i not in frozen], dtype=np.int64)

    @cached_property
    def frozen_mask(self) -> np.ndarray:
        mask = np.zeros(self.mother_len, dtype=bool)
        mask[list(self.frozen_set)] = True
        return mask


def _check_info(spec: CodeSpec, info_bits) -> np.ndarray:
    info = np.asarray(info_bits, dtype=np.uint8)
    if info.shape != (spec.info_len,):
        raise ValueError(f"info_bits must have length {spec.info_len}, got {info.shape}")
    return info


def encode(spec: CodeSpec, info_bits) -> Codeword:
    """Encode n information bits into a B-bit codeword."""
    info = _check_info(spec, info_bits)
    if spec.kind == CodeKind.HAMMING_109_100:
        h = hamming_parity_check()
        parity = (h[:, :spec.info_len].astype(np.int64) @ info) % 2
        bits = np.concatenate([info, parity.astype(np.uint8)])
    else:
        u = np.zeros(spec.mother_len, dtype=np.uint8)
        u[spec.info_positions] = crc_append(info, spec.crc_len)
        bits = polar_transform(u)[:spec.coded_len]
    return Codeword(bits=bits, info_bits=info.copy())


def _prepare_llrs(spec: CodeSpec, llrs, known_bits) -> np.ndarray:
    llrs = np.asarray(llrs, dtype=np.float64)
    if llrs.shape != (spec.coded_len,):
        raise ValueError(f"llrs must have length {spec.coded_len}, got {llrs.shape}")
    llrs = np.clip(np.nan_to_num(llrs, nan=0.0, posinf=LLR_CLIP, neginf=-LLR_CLIP), -LLR_CLIP, LLR_CLIP)
    if known_bits is not None:
        known = np.asarray(known_bits, dtype=np.uint8)
        llrs[:len(known)] = LLR_CLIP * (1.0 - 2.0 * known)
    return llrs


def decode(spec: CodeSpec, llrs, frozen_bits_known=None) -> DecodeResult:
    """
    Decode channel LLRs. frozen_bits_known, if given, is a prefix of codeword bits
    known to the receiver (the detected preamble bits); they enter as saturated LLRs.

    Polar: CRC-aided successive-cancellation list decoding. Hamming: hard-decision
    syndrome decoding. crc_ok is set for a zero syndrome only: about one random word in
    five has a correctable syndrome. A single-bit correction is still returned in
    info_bits with crc_ok False and corrected True, for callers that verify it elsewhere.
    """
    llrs = _prepare_llrs(spec, llrs, frozen_bits_known)
    if spec.kind == CodeKind.HAMMING_109_100:
        return _decode_hamming(spec, llrs)
    return ListDecoder(spec).decode(llrs)


def _decode_hamming(spec: CodeSpec, llrs: np.ndarray) -> DecodeResult:
    h = hamming_parity_check()
    hard = (llrs < 0).astype(np.uint8)
    syndrome = (h.astype(np.int64) @ hard) % 2
    if not syndrome.any():
        return DecodeResult(hard[:spec.info_len], True)
    matches = np.flatnonzero((h == syndrome[:, None]).all(axis=0))
    if len(matches) == 1:
        hard[matches[0]] ^= 1
        return DecodeResult(hard[:spec.info_len], False, corrected=True)
    return DecodeResult(hard[:spec.info_len], False)


# ---------------------------------------------------------------- SCL decoder

def _boxplus(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact check-node update 2*atanh(tanh(a/2)*tanh(b/2))."""
    return (np.sign(a) * np.sign(b) * np.minimum(np.abs(a), np.abs(b))
            + np.log1p(np.exp(-np.abs(a + b))) - np.log1p(np.exp(-np.abs(a - b))))


class ListDecoder:
    """
    Successive-cancellation list decoder for u @ F^{kron n}.

    Per depth d the decoder keeps the LLRs (alpha) and partial sums (beta) of the node
    currently visited at that depth, one row per list path. Survivor selection at an
    information leaf reorders every row buffer at once so that the pending left-half
    partial sums stay attached to their path.
    """
    def __init__(self, spec: CodeSpec):
        self.spec = spec
        self.n_log = int(np.log2(self.spec.mother_len))
        self.size = self.spec.list_size

    def decode(self, llrs: np.ndarray) -> DecodeResult:
        spec = self.spec
        full = np.full(spec.mother_len, LLR_CLIP)
        full[:spec.coded_len] = llrs

        size = self.size
        self.alpha = [np.zeros((size, spec.mother_len >> d)) for d in range(self.n_log + 1)]
        self.beta = [np.zeros((size, spec.mother_len >> d), dtype=np.uint8) for d in range(self.n_log + 1)]
        self.left = [np.zeros((size, spec.mother_len >> (d + 1)), dtype=np.uint8) for d in range(self.n_log)]
        self.alpha[0][:] = full
        self.u_hat = np.zeros((size, spec.mother_len), dtype=np.uint8)
        self.metric = np.full(size, np.inf)
        self.metric[0] = 0.0
        self.leaf = 0

        self._node(0)

        k = spec.info_len + spec.crc_len
        order = np.argsort(self.metric, kind="stable")
        best = None
        for path in order:
            if not np.isfinite(self.metric[path]):
                continue
            bits = self.u_hat[path, spec.info_positions][:k]
            if best is None:
                best = bits
            if crc_check(bits, spec.crc_len):
                return DecodeResult(bits[:spec.info_len].copy(), True)
        return DecodeResult(best[:spec.info_len].copy(), False)

    def _node(self, depth: int) -> None:
        if depth == self.n_log:
            self._leaf()
            return
        half = self.alpha[depth].shape[1] // 2
        parent = self.alpha[depth]
        self.alpha[depth + 1][:] = _boxplus(parent[:, :half], parent[:, half:])
        self._node(depth + 1)
        self.left[depth][:] = self.beta[depth + 1]
        # rows may have been reordered by the left subtree
        parent = self.alpha[depth]
        sign = 1.0 - 2.0 * self.left[depth]
        self.alpha[depth + 1][:] = parent[:, half:] + sign * parent[:, :half]
        self._node(depth + 1)
        right = self.beta[depth + 1]
        self.beta[depth][:, :half] = self.left[depth] ^ right
        self.beta[depth][:, half:] = right

    def _leaf(self) -> None:
        i = self.leaf
        self.leaf += 1
        lam = self.alpha[self.n_log][:, 0]
        if self.spec.frozen_mask[i]:
            self.metric = self.metric + np.logaddexp(0.0, -lam)
            self.beta[self.n_log][:, 0] = 0
            self.u_hat[:, i] = 0
            return

        candidates = np.concatenate([self.metric + np.logaddexp(0.0, -lam),
                                     self.metric + np.logaddexp(0.0, lam)])
        chosen = np.argsort(candidates, kind="stable")[:self.size]
        source = chosen % self.size
        bit = (chosen // self.size).astype(np.uint8)
        self._reorder(source)
        self.metric = candidates[chosen]
        self.beta[self.n_log][:, 0] = bit
        self.u_hat[:, i] = bit

    def _reorder(self, source: np.ndarray) -> None:
        if np.array_equal(source, np.arange(self.size)):
            return
        for buffers in (self.alpha, self.beta, self.left):
            for d, buf in enumerate(buffers):
                buffers[d] = buf[source]
        self.u_hat = self.u_hat[source]
