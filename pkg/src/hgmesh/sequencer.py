"""Canonical mesh <-> token sequence conversion.

Vertices are compared and emitted as (y, z, x). Within a face the three vertices
are fully sorted ascending, faces are sorted ascending by their 9-tuples, and the
coordinate stream is framed by nine S tokens in front and nine E tokens behind.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .mesh_io import QuantizedMesh

GROUP = 9
YZX = [1, 2, 0]

MTOK_MAGIC = b"MTOK"
MTOK_VERSION = 1
_MTOK_HEADER = struct.Struct("<4sIIQ")


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class VocabSpec:
    quant_level: int

    @property
    def S(self) -> int:
        return self.quant_level

    @property
    def E(self) -> int:
        return self.quant_level + 1

    @property
    def P(self) -> int:
        return self.quant_level + 2

    @property
    def size(self) -> int:
        return self.quant_level + 3

    def is_coord(self, tok) -> bool:
        return 0 <= tok < self.quant_level


@dataclass
class Segment:
    tokens: np.ndarray
    offset: int  # absolute position of tokens[0] in the source sequence
    valid: int  # number of non-padding tokens


def canonical_faces(mesh: QuantizedMesh) -> np.ndarray:
    """Ordered faces as an (N, 9) array of yzx coordinates, duplicates removed."""
    if mesh.num_faces == 0:
        return np.zeros((0, GROUP), dtype=np.int64)
    coords = mesh.vertices[:, YZX][mesh.faces]  # (N, 3 vertices, 3 coords)
    # sort vertices within each face by their (y, z, x) key
    q = mesh.quant_level
    key = (coords[..., 0] * q + coords[..., 1]) * q + coords[..., 2]
    order = np.argsort(key, axis=1, kind="stable")
    coords = np.take_along_axis(coords, order[..., None], axis=1)
    flat = coords.reshape(-1, GROUP)
    flat = np.unique(flat, axis=0)  # lexicographic sort + dedup in one pass
    return flat


def canonical_order(mesh: QuantizedMesh) -> list[tuple[tuple[int, int, int], ...]]:
    """Ordered face list; each face is three (x, y, z) vertices in sorted order."""
    out = []
    for row in canonical_faces(mesh):
        verts = row.reshape(3, 3)
        out.append(tuple((int(v[2]), int(v[0]), int(v[1])) for v in verts))
    return out


def encode(mesh: QuantizedMesh) -> np.ndarray:
    faces = canonical_faces(mesh)
    if len(faces) == 0:
        raise SequenceError("cannot encode an empty mesh")
    vocab = VocabSpec(mesh.quant_level)
    return np.concatenate([
        np.full(GROUP, vocab.S, dtype=np.int64),
        faces.reshape(-1),
        np.full(GROUP, vocab.E, dtype=np.int64),
    ])


def coordinate_span(tokens, vocab: VocabSpec) -> tuple[int, int]:
    """Validate framing and return the [start, stop) range of coordinate tokens."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    if n and (tokens.min() < 0 or tokens.max() >= vocab.size):
        bad = int(np.flatnonzero((tokens < 0) | (tokens >= vocab.size))[0])
        raise SequenceError(f"token {int(tokens[bad])} at position {bad} outside vocabulary")
    if n < 2 * GROUP or not np.all(tokens[:GROUP] == vocab.S):
        raise SequenceError("sequence must start with 9 S tokens")
    rest = tokens[GROUP:]
    is_e = np.flatnonzero(rest == vocab.E)
    if len(is_e) == 0:
        raise SequenceError("missing E group")
    stop = int(is_e[0])
    if stop % GROUP:
        raise SequenceError(f"E token at position {GROUP + stop} is not on a face boundary")
    if len(rest) < stop + GROUP or not np.all(rest[stop:stop + GROUP] == vocab.E):
        raise SequenceError("E group must hold 9 consecutive E tokens")
    tail = rest[stop + GROUP:]
    if np.any(tail != vocab.P):
        raise SequenceError("only P tokens may follow the E group")
    body = rest[:stop]
    if np.any(body >= vocab.quant_level):
        bad = int(np.flatnonzero(body >= vocab.quant_level)[0])
        raise SequenceError(f"special token inside the coordinate stream at position {GROUP + bad}")
    return GROUP, GROUP + stop


def decode(tokens, quant_level: int) -> QuantizedMesh:
    vocab = VocabSpec(quant_level)
    tokens = np.asarray(tokens, dtype=np.int64)
    start, stop = coordinate_span(tokens, vocab)
    coords = tokens[start:stop].reshape(-1, 3)[:, [2, 0, 1]]  # yzx -> xyz
    if len(coords) == 0:
        return QuantizedMesh(quant_level, np.zeros((0, 3)), np.zeros((0, 3)))
    verts, inverse = np.unique(coords, axis=0, return_inverse=True)
    faces = inverse.reshape(-1, 3)
    s = np.sort(faces, axis=1)
    ok = (s[:, 0] != s[:, 1]) & (s[:, 1] != s[:, 2])
    faces, s = faces[ok], s[ok]
    _, keep = np.unique(s, axis=0, return_index=True)
    faces = faces[np.sort(keep)]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return QuantizedMesh(quant_level, verts[used], remap[faces])


def chunk(tokens, window: int, stride: int, pad_token: int) -> list[Segment]:
    """Cut a sequence into fixed-length, face-aligned, P-padded training segments."""
    if window < GROUP or window % GROUP or stride % GROUP or stride <= 0:
        raise SequenceError(f"window ({window}) and stride ({stride}) must be positive multiples of 9")
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    segments = []
    for off in range(0, max(n - window, 0) + stride, stride):
        if off >= n:
            break
        piece = tokens[off:off + window]
        valid = len(piece)
        if valid < window:
            piece = np.concatenate([piece, np.full(window - valid, pad_token, dtype=np.int64)])
        segments.append(Segment(piece, off, valid))
        if off + window >= n:
            break
    return segments


# ------------------------------------------------------------------ file format


def write_mtok(path: str | os.PathLike, tokens, quant_level: int) -> None:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() > 0xFFFF):
        raise SequenceError("token ids must fit in u16")
    with open(path, "wb") as fh:
        fh.write(_MTOK_HEADER.pack(MTOK_MAGIC, MTOK_VERSION, quant_level, len(tokens)))
        fh.write(tokens.astype("<u2").tobytes())


def read_mtok(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        head = fh.read(_MTOK_HEADER.size)
        if len(head) < _MTOK_HEADER.size:
            raise SequenceError(f"{path}: truncated header")
        magic, version, quant_level, count = _MTOK_HEADER.unpack(head)
        if magic != MTOK_MAGIC:
            raise SequenceError(f"{path}: bad magic {magic!r}")
        if version != MTOK_VERSION:
            raise SequenceError(f"{path}: unsupported format version {version}")
        payload = fh.read()
    if len(payload) != 2 * count:
        raise SequenceError(f"{path}: expected {count} tokens, found {len(payload) // 2}")
    return np.frombuffer(payload, dtype="<u2").astype(np.int64), quant_level
