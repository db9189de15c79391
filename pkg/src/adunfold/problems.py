"""Seeded generation of sparse linear inverse problems y = A x + n.

All generators are pure functions of their seed arguments.  Per-batch seeds are
derived from ``(master_seed, batch_index)`` through :class:`numpy.random.SeedSequence`
so any batch can be regenerated on its own.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

MATRIX_KINDS = ("gaussian", "rademacher", "qpsk_stacked")


class DimensionError(ValueError):
    """Raised when array shapes or sizes are inconsistent."""


class ParameterError(ValueError):
    """Raised when a scalar parameter is outside its valid range."""


class FormatError(ValueError):
    """Raised when a data or checkpoint file is malformed."""


def rng_for(*key: int) -> np.random.Generator:
    """Generator keyed by a tuple of non-negative integers (O(1) to derive)."""
    seed, *spawn = (int(k) for k in key)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(spawn))))


@dataclass(frozen=True)
class MeasurementMatrix:
    entries: np.ndarray
    kind: str
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


@dataclass(frozen=True)
class SparseSignal:
    values: np.ndarray
    sparsity: int


@dataclass(frozen=True)
class ProblemInstance:
    matrix: MeasurementMatrix
    signal: SparseSignal
    measurement: np.ndarray
    snr_db: Optional[float] = None

    @property
    def A(self) -> np.ndarray:
        return self.matrix.entries

    @property
    def x(self) -> np.ndarray:
        return self.signal.values

    @property
    def y(self) -> np.ndarray:
        return self.measurement


@dataclass
class Batch:
    """A mini-batch sharing one measurement matrix; rows of X and Y are samples."""

    matrix: MeasurementMatrix
    X: np.ndarray
    Y: np.ndarray
    sparsity: np.ndarray
    snr_db: Optional[float] = None

    @property
    def A(self) -> np.ndarray:
        return self.matrix.entries

    def __len__(self) -> int:
        return self.X.shape[0]

    def instance(self, i: int) -> ProblemInstance:
        return ProblemInstance(
            self.matrix, SparseSignal(self.X[i], int(self.sparsity[i])), self.Y[i], self.snr_db
        )

    def subset(self, mask) -> "Batch":
        return Batch(self.matrix, self.X[mask], self.Y[mask], self.sparsity[mask], self.snr_db)


@dataclass
class BatchConfig:
    n: int
    m: int
    s_min: int
    s_max: int
    batch_size: int = 256
    n_batches: int = 1
    snr_db: Optional[float] = None
    matrix_kind: str = "gaussian"
    master_seed: int = 0
    matrix_seed: Optional[int] = None
    signal_kind: str = "uniform"  # or "clustered"
    cluster_width: Optional[int] = None

    def __post_init__(self):
        if not 1 <= self.s_min <= self.s_max <= self.m:
            raise ParameterError(
                f"need 1 <= s_min <= s_max <= m, got s_min={self.s_min}, s_max={self.s_max}, m={self.m}"
            )
        if self.batch_size < 1 or self.n_batches < 0:
            raise ParameterError("batch_size must be >= 1 and n_batches >= 0")
        if self.matrix_kind not in MATRIX_KINDS:
            raise ParameterError(f"unknown matrix kind {self.matrix_kind!r}")
        if self.signal_kind not in ("uniform", "clustered"):
            raise ParameterError(f"unknown signal kind {self.signal_kind!r}")

    @property
    def signal_dim(self) -> int:
        """Length of the real signal vector (doubled for stacked complex problems)."""
        return 2 * self.m if self.matrix_kind == "qpsk_stacked" else self.m

    def matrix(self) -> MeasurementMatrix:
        seed = self.master_seed if self.matrix_seed is None else self.matrix_seed
        return gen_matrix(self.matrix_kind, self.n, self.m, seed)


def complex_to_real_stack(re, im) -> np.ndarray:
    """Real embedding [[Re, -Im], [Im, Re]] of the complex matrix ``re + 1j*im``."""
    re = np.atleast_2d(np.asarray(re, dtype=float))
    im = np.atleast_2d(np.asarray(im, dtype=float))
    if re.shape != im.shape:
        raise DimensionError(f"real part {re.shape} and imaginary part {im.shape} differ")
    return np.block([[re, -im], [im, re]])


def stack_vector(z) -> np.ndarray:
    z = np.asarray(z)
    return np.concatenate([z.real, z.imag], axis=-1).astype(float)


def gen_matrix(kind: str, n: int, m: int, seed: int, normalize: bool = True) -> MeasurementMatrix:
    """Measurement matrix with unit-norm columns.

    For ``qpsk_stacked`` the dimensions are complex: the result is the 2n x 2m real
    stacking of an n x m matrix with i.i.d. entries in {1, -1, 1j, -1j}.
    ``normalize=False`` keeps raw N(0, 1) / +-1 entries (used by the theory checks).
    """
    if n < 1 or m < 1:
        raise DimensionError(f"matrix dimensions must be positive, got {n}x{m}")
    rng = rng_for(seed, 0x4D41)
    if kind == "gaussian":
        A = rng.standard_normal((n, m))
    elif kind == "rademacher":
        A = rng.choice([-1.0, 1.0], size=(n, m))
    elif kind == "qpsk_stacked":
        symbols = np.array([1.0, -1.0, 1j, -1j])
        C = symbols[rng.integers(0, 4, size=(n, m))]
        A = complex_to_real_stack(C.real, C.imag)
    else:
        raise ParameterError(f"unknown matrix kind {kind!r}")
    if normalize:
        A = A / np.linalg.norm(A, axis=0, keepdims=True)
    return MeasurementMatrix(A, kind, seed)


def _sparse_rows(rng: np.random.Generator, count: int, m: int, s_min: int, s_max: int):
    s = rng.integers(s_min, s_max + 1, size=count)
    # rank of a uniform key gives a uniform random subset of size s per row
    ranks = np.argsort(np.argsort(rng.random((count, m)), axis=1), axis=1)
    support = ranks < s[:, None]
    X = np.where(support, rng.standard_normal((count, m)), 0.0)
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X, s


def _clustered_rows(rng: np.random.Generator, count: int, m: int, c_min: int, c_max: int,
                    width: Optional[int]):
    """Signals made of c ~ U[c_min, c_max] clusters of ``width`` adjacent (circular)
    bins; a stand-in for angular-domain channels with grouped scatterers."""
    width = max(1, round(m / 18)) if width is None else width
    clusters = rng.integers(c_min, c_max + 1, size=count)
    X = np.zeros((count, m))
    for i, c in enumerate(clusters):
        starts = rng.integers(0, m, size=c)
        idx = (starts[:, None] + np.arange(width)).ravel() % m
        X[i, idx] = rng.standard_normal(idx.size)
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X, np.count_nonzero(X, axis=1)


def gen_sparse_signal(m: int, s_min: int, s_max: int, seed: int) -> SparseSignal:
    if not 1 <= s_min <= s_max <= m:
        raise ParameterError(f"empty sparsity range [{s_min}, {s_max}] for m={m}")
    X, s = _sparse_rows(rng_for(seed, 0x5347), 1, m, s_min, s_max)
    return SparseSignal(X[0], int(s[0]))


def _add_noise(rng: np.random.Generator, clean: np.ndarray, snr_db: float) -> np.ndarray:
    clean = np.atleast_2d(clean)
    power = np.sum(clean**2, axis=1, keepdims=True)
    if np.any(power == 0):
        raise ParameterError("SNR is undefined for a zero noiseless measurement")
    noise = rng.standard_normal(clean.shape)
    noise *= np.sqrt(power / np.sum(noise**2, axis=1, keepdims=True) / 10 ** (snr_db / 10))
    return clean + noise


def gen_measurement(matrix: MeasurementMatrix, signal: SparseSignal, snr_db=None, seed: int = 0) -> ProblemInstance:
    A = matrix.entries
    x = np.asarray(signal.values, dtype=float)
    if A.shape[1] != x.shape[0]:
        raise DimensionError(f"matrix {A.shape} cannot multiply signal of length {x.shape[0]}")
    y = A @ x
    if snr_db is not None:
        y = _add_noise(rng_for(seed, 0x4E5A), y, snr_db)[0]
    return ProblemInstance(matrix, signal, y, snr_db)


def make_batch(config: BatchConfig, index: int, matrix: Optional[MeasurementMatrix] = None) -> Batch:
    """Batch ``index`` of the stream described by ``config``."""
    matrix = config.matrix() if matrix is None else matrix
    rng = rng_for(config.master_seed, 0x4254, index)
    m = matrix.entries.shape[1]
    if config.matrix_kind == "qpsk_stacked":
        # complex user activity: s active users out of m/2, complex Gaussian gains
        mc = m // 2
        Xr, s = _sparse_rows(rng, config.batch_size, mc, config.s_min, config.s_max)
        phase = np.exp(2j * np.pi * rng.random(Xr.shape))
        X = stack_vector(Xr * phase)
    elif config.signal_kind == "clustered":
        X, s = _clustered_rows(rng, config.batch_size, m, config.s_min, config.s_max,
                               config.cluster_width)
    else:
        X, s = _sparse_rows(rng, config.batch_size, m, config.s_min, config.s_max)
    Y = X @ matrix.entries.T
    if config.snr_db is not None:
        Y = _add_noise(rng, Y, config.snr_db)
    return Batch(matrix, X, Y, s, config.snr_db)


def batch_stream(config: BatchConfig) -> Iterator[Batch]:
    matrix = config.matrix()
    for i in range(config.n_batches):
        yield make_batch(config, i, matrix)


def realized_snr_db(batch: Batch) -> np.ndarray:
    clean = batch.X @ batch.A.T
    noise = batch.Y - clean
    return 10 * np.log10(np.sum(clean**2, axis=1) / np.sum(noise**2, axis=1))


# -- dataset dump ------------------------------------------------------------

DATASET_MAGIC = b"ADUN"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sIIIIiB")
_NOISELESS = -(2**31)
_KIND_CODES = {k: i for i, k in enumerate(MATRIX_KINDS)}


def write_batch(path, batch: Batch) -> None:
    """One file per batch: header, then little-endian f64 A (row-major), then per-sample (x, y)."""
    A = batch.A
    snr = _NOISELESS if batch.snr_db is None else int(round(batch.snr_db * 100))
    header = _DATASET_HEADER.pack(
        DATASET_MAGIC, DATASET_VERSION, A.shape[0], A.shape[1], len(batch), snr,
        _KIND_CODES[batch.matrix.kind],
    )
    body = np.concatenate([A.ravel(), np.hstack([batch.X, batch.Y]).ravel()]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def read_batch(path) -> Batch:
    raw = Path(path).read_bytes()
    if len(raw) < _DATASET_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, m, size, snr, kind = _DATASET_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        raise FormatError(f"{path}: not an ADUN v{DATASET_VERSION} dataset file")
    data = np.frombuffer(raw, dtype="<f8", offset=_DATASET_HEADER.size).astype(float)
    if data.size != n * m + size * (m + n):
        raise FormatError(f"{path}: payload size does not match header")
    A = data[: n * m].reshape(n, m)
    rows = data[n * m :].reshape(size, m + n)
    X, Y = rows[:, :m].copy(), rows[:, m:].copy()
    if kind >= len(MATRIX_KINDS):
        raise FormatError(f"{path}: unknown matrix kind code {kind}")
    matrix = MeasurementMatrix(A, MATRIX_KINDS[kind], -1)
    if matrix.kind == "qpsk_stacked":
        # one complex entry per user: count users, not real coordinates
        half = m // 2
        sparsity = np.count_nonzero(np.abs(X[:, :half]) + np.abs(X[:, half:]), axis=1)
    else:
        sparsity = np.count_nonzero(X, axis=1)
    return Batch(matrix, X, Y, sparsity, None if snr == _NOISELESS else snr / 100)
