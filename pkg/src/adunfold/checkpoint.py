"""Binary checkpoints for unfolded networks and their halting branch.

Layout (little-endian)::

    header   magic "ADNW", version u32, kind u8, L u32, n u32, m u32, sharing u8
    f64      A (n x m, row-major)
    f64      W blocks (lista only; 1 if shared else L, each m x m)
    f64      B blocks (same count, each m x n)
    f64      thresholds (L)
    f64      support fractions (L, lista_cpss only)
    u8       has_halting
    halting  design u8, h_last f64, phi (L), psi (L),
             then Q (n x n) for learned_q, or per layer W1 (2n x n), b1 (2n), w2 (2n)
             followed by b2 (L) for mlp2
"""

from __future__ import annotations

import io
import struct
from typing import Optional

import numpy as np

from .halting import HALTING_DESIGNS, HaltingParams
from .nets import NET_KINDS, UnfoldedNet
from .problems import FormatError

MAGIC = b"ADNW"
VERSION = 1
_HEADER = struct.Struct("<4sIBIIIB")


def _put(fh, arr) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, raw: bytes, offset: int):
        self.raw, self.pos = raw, offset

    def take(self, *shape) -> np.ndarray:
        count = int(np.prod(shape))
        if self.pos + 8 * count > len(self.raw):
            raise FormatError("checkpoint is truncated")
        out = np.frombuffer(self.raw, dtype="<f8", count=count, offset=self.pos).astype(float)
        self.pos += 8 * count
        return out.reshape(shape) if shape else out

    def byte(self) -> int:
        if self.pos >= len(self.raw):
            raise FormatError("checkpoint is truncated")
        b = self.raw[self.pos]
        self.pos += 1
        return b


def save_checkpoint(path, net: UnfoldedNet, hp: Optional[HaltingParams] = None) -> None:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, NET_KINDS.index(net.kind), net.depth, net.n, net.m,
                           int(net.shared)))
    _put(buf, net.A)
    for W in net.weights_W:
        _put(buf, W)
    for B in net.weights_B:
        _put(buf, B)
    _put(buf, net.thresholds)
    if net.kind == "lista_cpss":
        _put(buf, net.cpss_support_fractions)
    buf.write(bytes([hp is not None]))
    if hp is not None:
        buf.write(bytes([HALTING_DESIGNS.index(hp.design)]))
        _put(buf, [hp.h_last])
        _put(buf, hp.phi)
        _put(buf, hp.psi)
        if hp.design == "learned_q":
            _put(buf, hp.Q)
        elif hp.design == "mlp2":
            for W1, b1, w2 in zip(hp.mlp_W1, hp.mlp_b1, hp.mlp_w2):
                _put(buf, W1)
                _put(buf, b1)
                _put(buf, w2)
            _put(buf, hp.mlp_b2)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(net, hp)``; ``hp`` is None when the file has no halting block."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, kind, L, n, m, shared = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise FormatError(f"{path}: not an ADNW v{VERSION} checkpoint")
    if kind >= len(NET_KINDS):
        raise FormatError(f"{path}: unknown network kind code {kind}")
    kind = NET_KINDS[kind]
    r = _Reader(raw, _HEADER.size)
    count = 1 if shared else L
    A = r.take(n, m)
    Ws = [r.take(m, m) for _ in range(count)] if kind == "lista" else []
    Bs = [r.take(m, n) for _ in range(count)]
    lam = r.take(L)
    fractions = r.take(L) if kind == "lista_cpss" else None
    net = UnfoldedNet(kind, L, A, Bs, lam, Ws, bool(shared), fractions)
    hp = None
    if r.byte():
        design = HALTING_DESIGNS[r.byte()]
        h_last = float(r.take(1)[0])
        phi, psi = r.take(L), r.take(L)
        kw = {}
        if design == "learned_q":
            kw["Q"] = r.take(n, n)
        elif design == "mlp2":
            W1, b1, w2 = [], [], []
            for _ in range(L):
                W1.append(r.take(2 * n, n))
                b1.append(r.take(2 * n))
                w2.append(r.take(2 * n))
            kw.update(mlp_W1=W1, mlp_b1=b1, mlp_w2=w2, mlp_b2=r.take(L))
        hp = HaltingParams(design, L, n, phi, psi, h_last=h_last, **kw)
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return net, hp
