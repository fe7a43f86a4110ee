"""Synthetic I/Q frames for linear digital modulation schemes.

Frames are root-raised-cosine shaped, normalized to unit average power and
optionally passed through AWGN. Every frame draws from its own generator
seeded by ``(dataset seed, class, snr, index)`` so generation order never
changes the bytes produced.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

MAGIC = b"MODIL"
VERSION = 1
TRAIN, TEST = 0, 1

CATALOG = (
    "OOK", "4ASK", "8ASK", "BPSK", "QPSK", "8PSK", "16PSK", "32PSK",
    "16QAM", "32QAM", "64QAM", "128QAM", "256QAM", "16APSK", "32APSK", "OQPSK",
)


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModScheme:
    name: str
    constellation: np.ndarray
    bits_per_symbol: int
    family: str
    offset_q: bool = False

    def __post_init__(self):
        if len(self.constellation) != 2 ** self.bits_per_symbol:
            raise ValueError(f"{self.name}: {len(self.constellation)} points for {self.bits_per_symbol} bits")


@dataclass
class IqFrame:
    samples: np.ndarray  # (2, L) float32, row 0 = I, row 1 = Q
    label: int
    snr_db: int


def gray(n):
    return n ^ (n >> 1)


def _normalize(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.complex128)
    return points / np.sqrt(np.mean(np.abs(points) ** 2))


def _gray_order(positions: np.ndarray) -> np.ndarray:
    """Reorder points given in natural position order so that index i holds the
    point whose bit label is i."""
    m = len(positions)
    out = np.empty(m, dtype=np.complex128)
    for p in range(m):
        out[gray(p)] = positions[p]
    return out


def _pam_levels(m: int) -> np.ndarray:
    return np.arange(-(m - 1), m, 2, dtype=float)


def _psk(m: int) -> np.ndarray:
    offset = np.pi / 4 if m == 4 else 0.0
    pos = np.exp(1j * (2 * np.pi * np.arange(m) / m + offset))
    return _gray_order(pos)


def _square_qam(m: int) -> np.ndarray:
    side = int(round(np.sqrt(m)))
    half = side.bit_length() - 1
    levels = _gray_order(_pam_levels(side).astype(np.complex128)).real
    pts = np.empty(m, dtype=np.complex128)
    for label in range(m):
        pts[label] = levels[label >> half] + 1j * levels[label & (side - 1)]
    return pts


def _cross_qam(m: int) -> np.ndarray:
    # 32 -> 6x6 grid minus 1x1 corners, 128 -> 12x12 grid minus 2x2 corners
    side = {32: 6, 128: 12}[m]
    corner = {32: 1, 128: 2}[m]
    levels = _pam_levels(side)
    pts = []
    for qi, q in enumerate(levels[::-1]):
        for ii, i in enumerate(levels):
            in_row_corner = qi < corner or qi >= side - corner
            in_col_corner = ii < corner or ii >= side - corner
            if not (in_row_corner and in_col_corner):
                pts.append(i + 1j * q)
    return np.array(pts)


def _apsk(rings: list[tuple[int, float, float]]) -> np.ndarray:
    pts = []
    for count, radius, phase in rings:
        pts.extend(radius * np.exp(1j * (2 * np.pi * np.arange(count) / count + phase)))
    return np.array(pts)


def constellation_for(name: str) -> ModScheme:
    """Unit-average-power constellation for a catalog scheme name."""
    key = name.upper()
    if key == "OOK":
        return ModScheme("OOK", _normalize([0.0, 1.0]), 1, "ASK")
    if key in ("4ASK", "8ASK"):
        m = int(key[0])
        levels = _gray_order(np.arange(m, dtype=np.complex128))
        return ModScheme(key, _normalize(levels), m.bit_length() - 1, "ASK")
    if key == "BPSK":
        return ModScheme("BPSK", np.array([1.0 + 0j, -1.0 + 0j]), 1, "PSK")
    if key in ("QPSK", "OQPSK"):
        return ModScheme(key, _normalize(_psk(4)), 2, "PSK", offset_q=key == "OQPSK")
    if key in ("8PSK", "16PSK", "32PSK"):
        m = int(key[:-3])
        return ModScheme(key, _normalize(_psk(m)), m.bit_length() - 1, "PSK")
    if key in ("16QAM", "64QAM", "256QAM"):
        m = int(key[:-3])
        return ModScheme(key, _normalize(_square_qam(m)), m.bit_length() - 1, "QAM")
    if key in ("32QAM", "128QAM"):
        m = int(key[:-3])
        return ModScheme(key, _normalize(_cross_qam(m)), m.bit_length() - 1, "QAM")
    if key == "16APSK":
        pts = _apsk([(4, 1.0, np.pi / 4), (12, 2.85, np.pi / 12)])
        return ModScheme(key, _normalize(pts), 4, "APSK")
    if key == "32APSK":
        pts = _apsk([(4, 1.0, np.pi / 4), (12, 2.84, np.pi / 12), (16, 5.27, 0.0)])
        return ModScheme(key, _normalize(pts), 5, "APSK")
    raise KeyError(f"unknown modulation scheme: {name!r}")


@lru_cache(maxsize=32)
def _rrc_cached(beta: float, sps: int, span: int) -> np.ndarray:
    taps = _rrc(beta, sps, span)
    taps.flags.writeable = False
    return taps


def rrc_taps(beta: float = 0.35, sps: int = 8, span: int = 8) -> np.ndarray:
    """Root-raised-cosine taps with unit energy, ``span * sps + 1`` long.

    The singular points t = 0 and t = +-1/(4 beta) use their analytic limits.
    """
    return _rrc_cached(float(beta), int(sps), int(span))


def _rrc(beta, sps, span):
    if not 0 < beta <= 1:
        raise ValueError(f"rolloff must be in (0, 1], got {beta}")
    if sps < 2:
        raise ValueError(f"samples per symbol must be >= 2, got {sps}")
    if span < 4:
        raise ValueError(f"span must be >= 4 symbols, got {span}")
    n = span * sps
    t = (np.arange(n + 1) - n / 2) / sps
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if np.isclose(ti, 0.0):
            h[i] = 1 - beta + 4 * beta / np.pi
        elif np.isclose(abs(ti), 1 / (4 * beta)):
            h[i] = beta / np.sqrt(2) * (
                (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
                + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
            )
        else:
            h[i] = (np.sin(np.pi * ti * (1 - beta)) + 4 * beta * ti * np.cos(np.pi * ti * (1 + beta))) / (
                np.pi * ti * (1 - (4 * beta * ti) ** 2)
            )
    return h / np.sqrt(np.sum(h ** 2))


def bits_to_symbols(scheme: ModScheme, bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64).reshape(-1, scheme.bits_per_symbol)
    weights = 1 << np.arange(scheme.bits_per_symbol - 1, -1, -1)
    return scheme.constellation[bits @ weights]


def modulate_symbols(scheme: ModScheme, rng: np.random.Generator, length: int, sps: int = 8,
                     beta: float = 0.35, span: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Shaped baseband frame plus the symbols it carries.

    Symbol ``i`` of the returned array is centred on sample ``i * sps``. Guard
    symbols on both sides keep the filter transient out of the frame.
    """
    if length % sps:
        raise ValueError(f"frame length {length} not divisible by sps {sps}")
    n_sym = length // sps
    guard = span
    taps = rrc_taps(beta, sps, span)
    delay = (len(taps) - 1) // 2
    m = len(scheme.constellation)
    while True:
        idx = rng.integers(0, m, size=n_sym + 2 * guard)
        symbols = scheme.constellation[idx]
        up = np.zeros(len(symbols) * sps, dtype=np.complex128)
        up[::sps] = symbols
        shaped = np.convolve(up, taps)
        start = guard * sps + delay
        if scheme.offset_q:
            half = sps // 2
            i_part = shaped.real[start:start + length]
            q_part = shaped.imag[start - half:start - half + length]
            frame = i_part + 1j * q_part
        else:
            frame = shaped[start:start + length]
        power = np.mean(np.abs(frame) ** 2)
        if power > 0:
            break
    return frame / np.sqrt(power), symbols[guard:guard + n_sym]


def modulate(scheme: ModScheme, seed, length: int = 1024, sps: int = 8, beta: float = 0.35,
             span: int = 8) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return modulate_symbols(scheme, rng, length, sps, beta, span)[0]


def add_awgn(frame: np.ndarray, snr_db: float, seed) -> np.ndarray:
    """Add circular complex Gaussian noise at the requested per-sample SNR."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    power = np.mean(np.abs(frame) ** 2)
    if power <= 0:
        raise ValueError("frame has zero power")
    var = power / 10 ** (snr_db / 10)
    noise = rng.standard_normal(len(frame)) + 1j * rng.standard_normal(len(frame))
    return frame + np.sqrt(var / 2) * noise


def matched_filter_symbols(frame: np.ndarray, sps: int = 8, beta: float = 0.35, span: int = 8,
                           offset_q: bool = False) -> np.ndarray:
    """Matched-filter a frame and sample it at the symbol instants."""
    taps = rrc_taps(beta, sps, span)
    if offset_q:
        half = sps // 2
        q = np.concatenate([frame.imag[half:], np.zeros(half)])
        frame = frame.real + 1j * q
    y = np.convolve(frame, taps, mode="same")
    return y[::sps]


def ml_classify(frame: np.ndarray, candidates: list[ModScheme], snr_db: float | None = None,
                sps: int = 8, beta: float = 0.35, span: int = 8) -> int:
    """Minimum-distance likelihood classifier over matched-filter samples.

    Used as a reference for how separable the generated classes are; it knows
    the pulse shape and symbol timing, which a learned model does not.
    """
    best, best_ll = 0, -np.inf
    for ci, scheme in enumerate(candidates):
        r = matched_filter_symbols(frame, sps, beta, span, scheme.offset_q)
        # trim edge symbols where the matched filter sees a truncated pulse
        r = r[span // 2:len(r) - span // 2]
        if snr_db is None:
            sigma2 = 1e-3
        else:
            sigma2 = max(1.0 / (sps * 10 ** (snr_db / 10)), 1e-3)
        r = r / np.sqrt(np.mean(np.abs(r) ** 2)) * np.sqrt(1 + sigma2)
        d2 = np.abs(r[:, None] - scheme.constellation[None, :]) ** 2
        ll = np.logaddexp.reduce(-d2 / sigma2, axis=1) - np.log(len(scheme.constellation))
        total = ll.sum()
        if total > best_ll:
            best, best_ll = ci, total
    return best


def frame_seed(seed: int, label: int, snr_db: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, label, snr_db + 1000, index])


@dataclass
class Dataset:
    """Balanced collection of frames, stored as parallel arrays."""

    samples: np.ndarray  # (N, 2, L) float32
    labels: np.ndarray  # (N,) int64
    snr_db: np.ndarray  # (N,) int64
    split: np.ndarray  # (N,) uint8, TRAIN or TEST
    class_names: list[str]
    seed: int = 0
    frames_per_class_per_snr: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def frame_length(self) -> int:
        return self.samples.shape[2]

    def frame(self, i: int) -> IqFrame:
        return IqFrame(self.samples[i], int(self.labels[i]), int(self.snr_db[i]))

    def __iter__(self):
        return (self.frame(i) for i in range(len(self)))

    @property
    def balanced(self) -> bool:
        counts = np.bincount(self.labels, minlength=len(self.class_names))
        return bool(np.all(counts == counts[0]))

    def indices(self, split: int | None = None, classes=None, snr_db: int | None = None) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        if split is not None:
            mask &= self.split == split
        if classes is not None:
            mask &= np.isin(self.labels, list(classes))
        if snr_db is not None:
            mask &= self.snr_db == snr_db
        return np.flatnonzero(mask)

    def checksum(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()


def make_dataset(catalog, snr_list=(20,), frames_per_class_per_snr: int = 500, length: int = 256,
                 seed: int = 0, test_fraction: float = 0.2, sps: int = 8, beta: float = 0.35,
                 span: int = 8) -> Dataset:
    catalog = list(catalog)
    if not catalog:
        raise ValueError("catalog is empty")
    if frames_per_class_per_snr < 1:
        raise ValueError("frames_per_class_per_snr must be >= 1")
    schemes = [constellation_for(name) for name in catalog]
    n_test = int(round(test_fraction * frames_per_class_per_snr))
    n = len(schemes) * len(snr_list) * frames_per_class_per_snr
    samples = np.empty((n, 2, length), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    snrs = np.empty(n, dtype=np.int64)
    split = np.empty(n, dtype=np.uint8)
    row = 0
    for label, scheme in enumerate(schemes):
        for snr in snr_list:
            for i in range(frames_per_class_per_snr):
                rng = np.random.default_rng(frame_seed(seed, label, int(snr), i))
                x = modulate(scheme, rng, length, sps, beta, span)
                x = add_awgn(x, snr, rng)
                samples[row, 0] = x.real
                samples[row, 1] = x.imag
                labels[row] = label
                snrs[row] = snr
                split[row] = TEST if i >= frames_per_class_per_snr - n_test else TRAIN
                row += 1
    return Dataset(samples, labels, snrs, split, [s.name for s in schemes], seed,
                   frames_per_class_per_snr,
                   {"sps": sps, "beta": beta, "span": span, "test_fraction": test_fraction,
                    "snr_list": [int(s) for s in snr_list]})


def _record_dtype(length: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("snr", "<i2"), ("split", "u1"), ("iq", "<f4", (2, length))])


def to_bytes(ds: Dataset) -> bytes:
    head = [MAGIC, struct.pack("<B", VERSION), struct.pack("<H", len(ds.class_names))]
    for name in ds.class_names:
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
    head.append(struct.pack("<II", len(ds), ds.frame_length))
    rec = np.empty(len(ds), dtype=_record_dtype(ds.frame_length))
    rec["label"] = ds.labels
    rec["snr"] = ds.snr_db
    rec["split"] = ds.split
    rec["iq"] = ds.samples
    return b"".join(head) + rec.tobytes()


def write_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(to_bytes(ds))


def from_bytes(buf: bytes) -> Dataset:
    if buf[:5] != MAGIC:
        raise DatasetFormatError("bad magic: not a MODIL dataset file")
    if len(buf) < 6 or buf[5] != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {buf[5] if len(buf) > 5 else None}")
    try:
        pos = 6
        (n_classes,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        names = []
        for _ in range(n_classes):
            (k,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            names.append(buf[pos:pos + k].decode("utf-8"))
            pos += k
        n, length = struct.unpack_from("<II", buf, pos)
        pos += 8
    except struct.error as exc:
        raise DatasetFormatError(f"truncated header: {exc}") from None
    dt = _record_dtype(length)
    if len(buf) - pos != n * dt.itemsize:
        raise DatasetFormatError(f"expected {n} frames of {dt.itemsize} bytes, found {len(buf) - pos} bytes")
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=pos)
    labels = rec["label"].astype(np.int64)
    if n and labels.max() >= n_classes:
        raise DatasetFormatError("frame label outside class table")
    return Dataset(np.array(rec["iq"], dtype=np.float32), labels, rec["snr"].astype(np.int64),
                   rec["split"].copy(), names)


def read_dataset(path) -> Dataset:
    return from_bytes(Path(path).read_bytes())
