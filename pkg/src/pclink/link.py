"""Digital transmission chain and its straight-through training bridge.

The chain is: uniform quantization -> Gray-mapped modulation -> block-fading
channel -> zero-forcing equalization -> hard demodulation -> dequantization.
Latent coordinates never enter the chain; only features do. All functions are
pure given an explicit numpy Generator.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

MODULATIONS = ("qpsk", "qam16")
CHANNELS = ("awgn", "rayleigh")
BITS_PER_SYMBOL = {"qpsk": 2, "qam16": 4}
_VALID_BITS = (2, 4, 6, 8)
_QAM16_AXIS = np.array([3.0, 1.0, -1.0, -3.0]) / np.sqrt(10.0)  # Gray order 00,01,11,10
_QAM16_GRAY = {(0, 0): 0, (0, 1): 1, (1, 1): 2, (1, 0): 3}


class LinkError(ValueError):
    """Invalid link configuration or payload."""


@dataclass
class LinkConfig:
    bits_per_feature: int = 8
    modulation: str = "qpsk"
    channel: str = "awgn"
    snr_db: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.bits_per_feature not in _VALID_BITS:
            raise LinkError(f"bits_per_feature must be one of {_VALID_BITS}")
        if self.modulation not in MODULATIONS:
            raise LinkError(f"modulation must be one of {MODULATIONS}")
        if self.channel not in CHANNELS:
            raise LinkError(f"channel must be one of {CHANNELS}")


@dataclass
class ChannelRealization:
    """One block-fading draw: a single h held for the whole frame."""

    h: complex
    noise_var: float
    channel: str
    deep_fade: bool = False


def clip_unit(x: np.ndarray):
    """Clip to [-1, 1]; returns (clipped, number of clipped entries)."""
    x = np.asarray(x, dtype=np.float64)
    n_clipped = int(np.count_nonzero((x < -1.0) | (x > 1.0)))
    return np.clip(x, -1.0, 1.0), n_clipped


def quantize(x: np.ndarray, b: int):
    """Uniform quantization of [-1, 1] onto 2^b levels, emitted MSB-first.

    code = round((x+1)/2 * (2^b - 1)) with halves rounded away from zero.
    Returns (bits uint8 array of length x.size*b, n_clipped).
    """
    if b not in _VALID_BITS:
        raise LinkError(f"b must be one of {_VALID_BITS}")
    clipped, n_clipped = clip_unit(x)
    levels = (1 << b) - 1
    codes = np.floor((clipped.ravel() + 1.0) / 2.0 * levels + 0.5).astype(np.int64)
    np.clip(codes, 0, levels, out=codes)
    shifts = np.arange(b - 1, -1, -1)
    bits = ((codes[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return bits, n_clipped


def dequantize(bits: np.ndarray, b: int) -> np.ndarray:
    """Inverse of quantize: value = code / (2^b - 1) * 2 - 1."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % b != 0:
        raise LinkError(f"bit count {bits.size} not divisible by b={b}")
    codes = bits.reshape(-1, b)
    weights = 1 << np.arange(b - 1, -1, -1)
    vals = (codes * weights).sum(axis=1).astype(np.float64)
    return vals / ((1 << b) - 1) * 2.0 - 1.0


def modulate(bits: np.ndarray, scheme: str) -> np.ndarray:
    """Gray-mapped unit-average-energy constellation symbols.

    qpsk: pairs (b1, b0) -> ((1-2*b1) + 1j*(1-2*b0)) / sqrt(2)
    qam16: 4 bits per symbol, the first two Gray-code the I level and the last
    two the Q level, levels {+-1, +-3}/sqrt(10).
    """
    bits = np.asarray(bits, dtype=np.uint8)
    bps = BITS_PER_SYMBOL[scheme]
    if bits.size % bps != 0:
        raise LinkError(f"bit count {bits.size} not divisible by {bps} ({scheme})")
    g = bits.reshape(-1, bps).astype(np.int64)
    if scheme == "qpsk":
        return ((1 - 2 * g[:, 0]) + 1j * (1 - 2 * g[:, 1])) / np.sqrt(2.0)
    i_idx = g[:, 0] * 2 + g[:, 1]
    q_idx = g[:, 2] * 2 + g[:, 3]
    gray_lut = np.array([0, 1, 3, 2])  # bit pair value -> Gray position
    return _QAM16_AXIS[gray_lut[i_idx]] + 1j * _QAM16_AXIS[gray_lut[q_idx]]


def demodulate(symbols: np.ndarray, scheme: str) -> np.ndarray:
    """Minimum-distance hard decisions back to bits."""
    s = np.asarray(symbols, dtype=np.complex128)
    if scheme == "qpsk":
        b1 = (s.real < 0).astype(np.uint8)
        b0 = (s.imag < 0).astype(np.uint8)
        return np.stack([b1, b0], axis=1).ravel()
    out = np.empty((s.size, 4), dtype=np.uint8)
    for col, axis in ((0, s.real), (2, s.imag)):
        pos = np.argmin(np.abs(axis[:, None] - _QAM16_AXIS[None, :]), axis=1)
        bits_hi = (pos >= 2).astype(np.uint8)  # Gray positions 2,3 have first bit 1
        bits_lo = ((pos == 1) | (pos == 2)).astype(np.uint8)
        out[:, col] = bits_hi
        out[:, col + 1] = bits_lo
    return out.ravel()


def demodulate_llr(symbols: np.ndarray, scheme: str, noise_var: float) -> np.ndarray:
    """Exact per-bit LLRs log P(bit=0|y) / P(bit=1|y) under CN(0, noise_var) noise."""
    s = np.asarray(symbols, dtype=np.complex128)
    bps = BITS_PER_SYMBOL[scheme]
    const, bit_table = _constellation(scheme)
    nv = max(float(noise_var), 1e-30)
    metric = -np.abs(s[:, None] - const[None, :]) ** 2 / nv  # (M, 2^bps)
    llrs = np.empty((s.size, bps), dtype=np.float64)
    for b in range(bps):
        zero = bit_table[:, b] == 0
        llrs[:, b] = _logsumexp(metric[:, zero]) - _logsumexp(metric[:, ~zero])
    return llrs.ravel()


def _logsumexp(m: np.ndarray) -> np.ndarray:
    mx = m.max(axis=1, keepdims=True)
    return (mx + np.log(np.exp(m - mx).sum(axis=1, keepdims=True))).ravel()


def _constellation(scheme: str):
    bps = BITS_PER_SYMBOL[scheme]
    n = 1 << bps
    patterns = ((np.arange(n)[:, None] >> np.arange(bps - 1, -1, -1)) & 1).astype(np.uint8)
    symbols = modulate(patterns.ravel(), scheme)
    return symbols, patterns


def apply_channel(symbols: np.ndarray, config: LinkConfig, rng: np.random.Generator):
    """y = h*s + n with one fading draw per call and n ~ CN(0, sigma^2 I).

    sigma^2 = 10^(-snr_db/10) for unit-power signals; snr_db = inf is noiseless.
    """
    s = np.asarray(symbols, dtype=np.complex128)
    noise_var = 0.0 if np.isinf(config.snr_db) else float(10.0 ** (-config.snr_db / 10.0))
    if config.channel == "awgn":
        h = 1.0 + 0.0j
    else:
        re, im = rng.standard_normal(2)
        h = complex(re, im) / np.sqrt(2.0)
    if noise_var > 0.0:
        n = (rng.standard_normal(s.size) + 1j * rng.standard_normal(s.size)) * np.sqrt(noise_var / 2.0)
    else:
        n = np.zeros(s.size, dtype=np.complex128)
    return h * s + n, ChannelRealization(h=h, noise_var=noise_var, channel=config.channel)


def zf_equalize(received: np.ndarray, h: complex, h_min: float = 1e-6):
    """Zero-forcing: s_tilde = (h* / |h|^2) * received.

    |h| <= h_min is flagged as a deep fade; the frame is still processed
    (the output is then noise-dominated by construction).
    """
    mag2 = abs(h) ** 2
    deep = abs(h) <= h_min
    scale = np.conj(h) / max(mag2, h_min**2)
    return np.asarray(received, dtype=np.complex128) * scale, bool(deep)


def transmit_chain(x: np.ndarray, config: LinkConfig, rng: np.random.Generator):
    """Run the full digital chain on features in [-1, 1].

    Returns (y array shaped like x, ChannelRealization, n_clipped).
    """
    x = np.asarray(x, dtype=np.float64)
    bits, n_clipped = quantize(x, config.bits_per_feature)
    symbols = modulate(bits, config.modulation)
    received, real = apply_channel(symbols, config, rng)
    equalized, deep = zf_equalize(received, real.h)
    real.deep_fade = deep
    bits_rx = demodulate(equalized, config.modulation)
    y = dequantize(bits_rx, config.bits_per_feature).reshape(x.shape)
    return y, real, n_clipped


class _StraightThrough(torch.autograd.Function):
    """Forward: the chain output exactly. Backward: the gradient passes unchanged."""

    @staticmethod
    def forward(ctx, x, y):
        return y

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def ste_transmit(
    x: torch.Tensor,
    config: LinkConfig,
    rng: np.random.Generator,
    info: dict | None = None,
) -> torch.Tensor:
    """Straight-through link: x_hat = x + sg(y - x).

    The forward value is bitwise the chain output y; the backward gradient is
    exactly the identity (sg detaches the chain from the graph).
    """
    y_np, real, n_clipped = transmit_chain(x.detach().cpu().numpy(), config, rng)
    if info is not None:
        info["realization"] = real
        info["n_clipped"] = n_clipped
    y = torch.as_tensor(y_np, dtype=x.dtype, device=x.device)
    return _StraightThrough.apply(x, y)


def pack_bitframe(bits: np.ndarray) -> bytes:
    """Serialize bits: 4-byte LE bit count, then MSB-first packed bytes, zero-padded."""
    bits = np.asarray(bits, dtype=np.uint8)
    header = struct.pack("<I", bits.size)
    return header + np.packbits(bits).tobytes()


def unpack_bitframe(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise LinkError("bitframe shorter than its 4-byte length prefix")
    (count,) = struct.unpack("<I", data[:4])
    payload = np.frombuffer(data[4:], dtype=np.uint8)
    if payload.size * 8 < count:
        raise LinkError(f"bitframe payload truncated: {count} bits declared")
    return np.unpackbits(payload)[:count]
