"""Baseband modulation, AWGN channel, and signal-to-image conversion.

Ten schemes are available under their canonical lower-case labels:

    bpsk, qpsk, oqpsk, 8psk, 16qam, 64qam, 4pam, 4fsk, cpfsk, gmsk

Mapping conventions (bits are consumed most-significant first per symbol):

* BPSK: bit b -> 1 - 2b.
* QPSK: Gray, bits (b0, b1) -> ((1 - 2 b0) + j (1 - 2 b1)) / sqrt(2), so
  ``00 -> (1 + j)/sqrt(2)``.
* 8PSK: Gray-coded phase index k -> exp(j k pi/4).
* M-QAM / 4PAM: Gray-coded amplitude levels per rail.
* OQPSK: QPSK rails at 2 samples/symbol, Q delayed by one sample and
  smoothed by a 2-tap average, which puts transition samples on the axes.
* 4FSK (h=1), CPFSK (binary, h=0.5), GMSK (BT=0.3, h=0.5): continuous-phase
  at 8 samples/symbol.

Every generated sequence is rescaled to unit average power.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from . import rng as _rng

SAMPLE_RATE_HZ = 200_000.0
BASE_LENGTH = 1024
GMSK_NATIVE_LENGTH = 8196
IMAGE_GRID = 32  # BASE_LENGTH reshaped to IMAGE_GRID x IMAGE_GRID


class UnknownSchemeError(KeyError):
    pass


@dataclass(frozen=True)
class ModulationScheme:
    name: str
    bits_per_symbol: int
    kind: str  # "linear", "oqpsk", "cpm"
    alphabet: np.ndarray | None = field(default=None, compare=False, repr=False)
    sps: int = 1
    mod_index: float = 0.0
    levels: tuple[int, ...] = ()
    bt: float | None = None

    @property
    def default_symbols(self) -> int:
        """Symbol count whose native length reaches BASE_LENGTH (GMSK: 8196)."""
        if self.name == "gmsk":
            return math.ceil(GMSK_NATIVE_LENGTH / self.sps)
        return BASE_LENGTH // self.sps


@dataclass
class BasebandSignal:
    samples: np.ndarray
    scheme: str
    seed: int = 0
    sample_rate_hz: float = SAMPLE_RATE_HZ

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))


@dataclass
class ChannelDraw:
    snr_db: float
    clean: BasebandSignal
    noisy: BasebandSignal
    noise: np.ndarray


def _gray(n: int) -> np.ndarray:
    i = np.arange(n)
    return i ^ (i >> 1)


def _pam_levels(m: int) -> np.ndarray:
    """Gray-labelled PAM amplitudes: entry g is the level whose label is g."""
    amps = np.arange(-(m - 1), m, 2, dtype=np.float64)
    out = np.empty(m)
    out[_gray(m)] = amps
    return out


def _unit_power(points: np.ndarray) -> np.ndarray:
    return points / np.sqrt(np.mean(np.abs(points) ** 2))


def _qam_alphabet(m: int) -> np.ndarray:
    side = int(round(math.sqrt(m)))
    k = side.bit_length() - 1
    pam = _pam_levels(side)
    labels = np.arange(m)
    return _unit_power(pam[labels >> k] + 1j * pam[labels & (side - 1)])


def _psk_alphabet(m: int) -> np.ndarray:
    out = np.empty(m, dtype=np.complex128)
    out[_gray(m)] = np.exp(1j * 2 * np.pi * np.arange(m) / m)
    return out


def _build_schemes() -> dict[str, ModulationScheme]:
    qpsk = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / math.sqrt(2)
    return {
        "bpsk": ModulationScheme("bpsk", 1, "linear", np.array([1.0 + 0j, -1.0 + 0j])),
        "qpsk": ModulationScheme("qpsk", 2, "linear", qpsk),
        "oqpsk": ModulationScheme("oqpsk", 2, "oqpsk", qpsk, sps=2),
        "8psk": ModulationScheme("8psk", 3, "linear", _psk_alphabet(8)),
        "16qam": ModulationScheme("16qam", 4, "linear", _qam_alphabet(16)),
        "64qam": ModulationScheme("64qam", 6, "linear", _qam_alphabet(64)),
        "4pam": ModulationScheme("4pam", 2, "linear", _unit_power(_pam_levels(4) + 0j)),
        "4fsk": ModulationScheme("4fsk", 2, "cpm", sps=8, mod_index=1.0, levels=(-3, -1, 1, 3)),
        "cpfsk": ModulationScheme("cpfsk", 1, "cpm", sps=8, mod_index=0.5, levels=(-1, 1)),
        "gmsk": ModulationScheme("gmsk", 1, "cpm", sps=8, mod_index=0.5, levels=(-1, 1), bt=0.3),
    }


SCHEMES: dict[str, ModulationScheme] = _build_schemes()
SCHEME_NAMES: tuple[str, ...] = tuple(SCHEMES)


def get_scheme(scheme: str | ModulationScheme) -> ModulationScheme:
    if isinstance(scheme, ModulationScheme):
        return scheme
    try:
        return SCHEMES[scheme.lower()]
    except KeyError:
        raise UnknownSchemeError(f"unknown modulation scheme {scheme!r}; known: {', '.join(SCHEMES)}") from None


def _symbol_indices(bits: np.ndarray, n_symbols: int, k: int) -> np.ndarray:
    groups = bits[: n_symbols * k].reshape(n_symbols, k).astype(np.int64)
    weights = 1 << np.arange(k - 1, -1, -1)
    return groups @ weights


def _gaussian_taps(bt: float, sps: int, span: int = 4) -> np.ndarray:
    t = np.arange(-span * sps / 2, span * sps / 2 + 1) / sps
    sigma = math.sqrt(math.log(2)) / (2 * math.pi * bt)
    h = np.exp(-(t ** 2) / (2 * sigma ** 2))
    return h / h.sum()


def _cpm(sch: ModulationScheme, idx: np.ndarray) -> np.ndarray:
    freq = np.repeat(_pam_levels(len(sch.levels))[idx], sch.sps)
    if sch.bt is not None:
        freq = np.convolve(freq, _gaussian_taps(sch.bt, sch.sps), mode="same")
    # Phase advances pi*h*level over one symbol.
    phase = np.concatenate([[0.0], np.cumsum(np.pi * sch.mod_index * freq / sch.sps)[:-1]])
    return np.exp(1j * phase)


def modulate(scheme: str | ModulationScheme, bits: np.ndarray | None = None,
             n_symbols: int | None = None, seed: int = 0) -> BasebandSignal:
    """Map a bit stream to a unit-power complex baseband sequence.

    ``bits`` defaults to a uniform payload drawn from ``seed``. Output length
    is ``n_symbols * sps`` except GMSK with its default symbol count, which
    is trimmed to its native 8196 samples.
    """
    sch = get_scheme(scheme)
    n = sch.default_symbols if n_symbols is None else int(n_symbols)
    if n <= 0:
        raise ValueError("n_symbols must be positive")
    k = sch.bits_per_symbol
    if bits is None:
        bits = _rng.stream(seed, "payload", sch.name).integers(0, 2, size=n * k)
    bits = np.asarray(bits).astype(np.int64).reshape(-1)
    if bits.size < n * k:
        raise ValueError(f"{sch.name}: need {n * k} bits for {n} symbols, got {bits.size}")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bit stream must contain only 0/1")
    idx = _symbol_indices(bits, n, k)

    if sch.kind == "linear":
        x = sch.alphabet[idx].astype(np.complex128)
    elif sch.kind == "oqpsk":
        sym = sch.alphabet[idx]
        i_rail = np.repeat(sym.real, sch.sps)
        q_rail = np.roll(np.repeat(sym.imag, sch.sps), sch.sps // 2)
        i_rail = 0.5 * (i_rail + np.roll(i_rail, 1))
        q_rail = 0.5 * (q_rail + np.roll(q_rail, 1))
        x = i_rail + 1j * q_rail
    else:
        x = _cpm(sch, idx)
        if sch.name == "gmsk" and n_symbols is None:
            x = x[:GMSK_NATIVE_LENGTH]
    return BasebandSignal(_unit_power(x), sch.name, seed)


def resample_to_base(sig: BasebandSignal, length: int = BASE_LENGTH) -> BasebandSignal:
    """Reduce a signal to ``length`` samples.

    Longer inputs are low-pass filtered (windowed-sinc FIR at the new Nyquist
    rate, edge-padded so DC passes unchanged) and decimated by uniform index
    selection ``floor(k * L / length)``.
    """
    x = np.asarray(sig.samples)
    n = len(x)
    if n < length:
        raise ValueError(f"signal has {n} samples; cannot resample up to {length}")
    if n == length:
        return BasebandSignal(x.copy(), sig.scheme, sig.seed, sig.sample_rate_hz)
    factor = n / length
    ntaps = 8 * math.ceil(factor) + 1
    taps = sps.firwin(ntaps, 1.0 / factor)
    taps = taps / taps.sum()
    half = ntaps // 2
    padded = np.pad(x, half, mode="edge")
    filtered = np.convolve(padded, taps, mode="valid")
    keep = (np.arange(length) * n) // length
    return BasebandSignal(filtered[keep], sig.scheme, sig.seed, sig.sample_rate_hz / factor)


def noise_variance(signal_power: float, snr_db: float) -> float:
    return signal_power / 10.0 ** (snr_db / 10.0)


def apply_awgn(sig: BasebandSignal, snr_db: float, seed: int) -> ChannelDraw:
    """Add complex white Gaussian noise at ``snr_db`` relative to the measured signal power.

    The returned ``noise`` is the exact realised difference ``noisy - clean``.
    """
    x = np.asarray(sig.samples, dtype=np.complex128)
    if x.size == 0:
        raise ValueError("empty signal")
    p_s = float(np.mean(np.abs(x) ** 2))
    if not p_s > 0 or not math.isfinite(p_s):
        raise ValueError("signal has zero (or non-finite) power; SNR undefined")
    sigma = math.sqrt(noise_variance(p_s, snr_db) / 2.0)
    g = _rng.stream(seed, "awgn").standard_normal((2, x.size))
    noisy = x + sigma * (g[0] + 1j * g[1])
    noise = noisy - x
    return ChannelDraw(
        float(snr_db),
        BasebandSignal(x, sig.scheme, sig.seed, sig.sample_rate_hz),
        BasebandSignal(noisy, sig.scheme, sig.seed, sig.sample_rate_hz),
        noise,
    )


def measure_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    """10 log10(P_clean / P_(noisy - clean)); ``inf`` when the inputs are identical."""
    clean = np.asarray(clean)
    noisy = np.asarray(noisy)
    if clean.shape != noisy.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {noisy.shape}")
    p_n = float(np.mean(np.abs(noisy - clean) ** 2))
    if p_n == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.mean(np.abs(clean) ** 2)) / p_n)


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights [n_out, n_in]."""
    if n_out == n_in:
        return np.eye(n_in)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), lo] = 1.0 - frac
    w[np.arange(n_out), lo + 1] += frac
    return w


def minmax(image: np.ndarray) -> np.ndarray:
    """Affine map to [0, 1]; constant input maps to zeros."""
    lo, hi = float(image.min()), float(image.max())
    if hi == lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def signal_to_image(series: np.ndarray, side: int = 224) -> np.ndarray:
    """Reshape 1024 reals to 32x32, interpolate to side x side, replicate to 3 channels.

    Returns float32 [3, side, side] scaled to [0, 1].
    """
    series = np.asarray(series)
    if np.iscomplexobj(series):
        raise TypeError("signal_to_image expects real samples (take the in-phase part first)")
    if series.shape != (BASE_LENGTH,):
        raise ValueError(f"expected {BASE_LENGTH} samples, got shape {series.shape}")
    if side < IMAGE_GRID:
        raise ValueError(f"side must be >= {IMAGE_GRID}, got {side}")
    s1 = series.astype(np.float64).reshape(IMAGE_GRID, IMAGE_GRID)
    w = _bilinear_matrix(IMAGE_GRID, side)
    s2 = minmax(w @ s1 @ w.T).astype(np.float32)
    return np.repeat(s2[None], 3, axis=0)
