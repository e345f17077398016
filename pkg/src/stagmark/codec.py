"""Rotation-closed lexicode marker libraries.

A marker codeword is read off the marker with an unknown quarter-turn, so a
library must keep every pair of codewords (including all four circular
rotations of each) at least ``min_hamming_distance`` apart, and every codeword
must also differ from its own non-trivial rotations by that much.

Bit ``i`` of a codeword integer is coding disk ``i``. A quarter-turn of the
marker moves disk ``i`` to disk ``i + code_length/4``, which is the circular
shift implemented by :func:`rotate`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

ROTATIONS = 4
SUB_CODE_LENGTH = 12
FILE_MAGIC = "STAGLIB"
FILE_VERSION = "v1"


def _mask(n: int) -> int:
    return (1 << n) - 1


def rotate(word: int, r: int, code_length: int) -> int:
    """Circularly shift ``word`` by ``r`` quarter-turns (bit i -> bit i + r*n/4)."""
    step = (r % ROTATIONS) * (code_length // ROTATIONS)
    if step == 0:
        return word
    m = _mask(code_length)
    return ((word << step) | (word >> (code_length - step))) & m


def hamming_distance(a: int, b: int) -> int:
    return (int(a) ^ int(b)).bit_count()


@dataclass(frozen=True)
class Codeword:
    bits: int
    width: int

    def __post_init__(self):
        if self.bits < 0 or self.bits >> self.width:
            raise ValueError(f"codeword {self.bits:#x} does not fit in {self.width} bits")

    def rotate(self, r: int) -> "Codeword":
        return Codeword(rotate(self.bits, r, self.width), self.width)

    def bit_array(self) -> np.ndarray:
        return np.array([(self.bits >> i) & 1 for i in range(self.width)], dtype=np.uint8)

    @classmethod
    def from_bits(cls, bits) -> "Codeword":
        value = 0
        for i, b in enumerate(bits):
            if b:
                value |= 1 << i
        return cls(value, len(bits))

    def hex(self) -> str:
        return f"{self.bits:0{(self.width + 3) // 4}X}"


@dataclass(frozen=True)
class DecodeResult:
    marker_id: int
    rotation: int
    hamming_distance: int


@dataclass(frozen=True)
class MarkerLibrary:
    code_length: int
    min_hamming_distance: int
    codewords: tuple[int, ...]
    rotation_count: int = ROTATIONS
    _variants: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "codewords", tuple(int(c) for c in self.codewords))
        # rows: codeword id, columns: rotation
        table = np.array(
            [[rotate(c, r, self.code_length) for r in range(ROTATIONS)] for c in self.codewords],
            dtype=np.uint64,
        ).reshape(len(self.codewords), ROTATIONS)
        table.setflags(write=False)
        object.__setattr__(self, "_variants", table)

    def __len__(self) -> int:
        return len(self.codewords)

    def __getitem__(self, i: int) -> Codeword:
        return Codeword(self.codewords[i], self.code_length)

    @property
    def max_correctable(self) -> int:
        return max((self.min_hamming_distance - 1) // 2, 0)

    @property
    def variants(self) -> np.ndarray:
        """(len, 4) uint64 array of every codeword under every rotation."""
        return self._variants

    def save(self, path) -> None:
        Path(path).write_text(dumps_library(self))

    @classmethod
    def load(cls, path) -> "MarkerLibrary":
        return loads_library(Path(path).read_text())


def dumps_library(library: MarkerLibrary) -> str:
    digits = (library.code_length + 3) // 4
    lines = [f"{FILE_MAGIC} {FILE_VERSION} {library.code_length} {library.min_hamming_distance}"]
    lines += [f"{c:0{digits}X}" for c in library.codewords]
    return "\n".join(lines) + "\n"


def loads_library(text: str) -> MarkerLibrary:
    rows = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not rows:
        raise ValueError("empty library file")
    head = rows[0].split()
    if len(head) != 4 or head[0] != FILE_MAGIC or head[1] != FILE_VERSION:
        raise ValueError(f"bad library header: {rows[0]!r}")
    code_length, min_hd = int(head[2]), int(head[3])
    words = [int(r, 16) for r in rows[1:]]
    for w in words:
        if w >> code_length:
            raise ValueError(f"codeword {w:X} wider than {code_length} bits")
    return MarkerLibrary(code_length, min_hd, tuple(words))


# ---------------------------------------------------------------------------
# generation


@njit(cache=True)
def _popcount64(x):
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (x * np.uint64(0x0101010101010101)) >> np.uint64(56)


@njit(cache=True)
def _rot(x, s, n):
    if s == 0:
        return x
    mask = (np.uint64(1) << np.uint64(n)) - np.uint64(1)
    return ((x << np.uint64(s)) | (x >> np.uint64(n - s))) & mask


@njit(cache=True)
def _direct_lexicode(n, d, with_rotations):
    step = n // 4
    total = 1 << n
    out = np.empty(total, np.uint64)
    nout = 0
    variants = np.empty(4 * total, np.uint64)
    nv = 0
    for c in range(total):
        w = np.uint64(c)
        ok = True
        if with_rotations:
            for r in range(1, 4):
                if _popcount64(w ^ _rot(w, r * step, n)) < d:
                    ok = False
                    break
        if not ok:
            continue
        # recent acceptances are the likeliest conflicts
        for k in range(nv - 1, -1, -1):
            if _popcount64(w ^ variants[k]) < d:
                ok = False
                break
        if ok:
            out[nout] = w
            nout += 1
            if with_rotations:
                for r in range(4):
                    variants[nv] = _rot(w, r * step, n)
                    nv += 1
            else:
                variants[nv] = w
                nv += 1
    return out[:nout]


@njit(cache=True)
def _assemble_blocks(dist, nbr_idx, nbr_dist, d, capacity, tuples):
    """Greedy lexicographic scan over 4-tuples of sub-codeword indices.

    ``dist[a, b]`` is the Hamming distance between sub-codewords a and b, so the
    distance between two tuples is the sum over positions, and a quarter-turn
    of the full word is a cyclic shift of the tuple. ``nbr_idx[a]`` lists all
    sub-codewords sorted by distance to ``a`` (``nbr_dist`` holds the distances).

    For each (i0, i1) prefix the remaining 65k (i2, i3) completions are handled
    as a grid: every accepted variant forbids the completions it is too close
    to, then the grid is scanned in order.

    ``tuples``: 0 allows repeated blocks, 1 requires distinct blocks, 2 requires
    strictly increasing block indices (unordered combinations).
    """
    m = dist.shape[0]
    vt = np.empty((capacity * 4, 4), np.int32)  # accepted variants as tuples
    nv = 0
    out = np.empty((capacity, 4), np.int32)
    nout = 0
    s0 = np.empty(capacity * 4, np.int32)
    act0 = np.empty(capacity * 4, np.int32)
    forbidden = np.zeros((m, m), np.uint8)
    tup = np.empty(4, np.int32)

    for i0 in range(m):
        n0 = 0
        for v in range(nv):
            s = dist[i0, vt[v, 0]]
            if s < d:
                act0[n0] = v
                s0[n0] = s
                n0 += 1
        for i1 in range(i0 + 1 if tuples == 2 else 0, m):
            forbidden[:, :] = 0
            for k in range(n0):
                v = act0[k]
                need = d - s0[k] - dist[i1, vt[v, 1]]
                if need > 0:
                    _mark(forbidden, nbr_idx, nbr_dist, vt[v, 2], vt[v, 3], need)
            for i2 in range(i1 + 1 if tuples == 2 else 0, m):
                for i3 in range(i2 + 1 if tuples == 2 else 0, m):
                    if forbidden[i2, i3]:
                        continue
                    if tuples == 2 and not (i0 < i1 < i2 < i3):
                        continue
                    if tuples == 1 and (i0 == i1 or i0 == i2 or i0 == i3 or i1 == i2 or i1 == i3 or i2 == i3):
                        continue
                    tup[0] = i0
                    tup[1] = i1
                    tup[2] = i2
                    tup[3] = i3
                    ok = True
                    for r in range(1, 4):
                        s = 0
                        for p in range(4):
                            s += dist[tup[p], tup[(p + r) % 4]]
                        if s < d:
                            ok = False
                            break
                    if not ok:
                        continue
                    if nout == capacity:
                        return out[:nout], False
                    for p in range(4):
                        out[nout, p] = tup[p]
                    nout += 1
                    for r in range(4):
                        for p in range(4):
                            vt[nv, p] = tup[(p + r) % 4]
                        # new variant also constrains the rest of this prefix
                        need = d - dist[i0, vt[nv, 0]] - dist[i1, vt[nv, 1]]
                        if need > 0:
                            _mark(forbidden, nbr_idx, nbr_dist, vt[nv, 2], vt[nv, 3], need)
                        s = dist[i0, vt[nv, 0]]
                        if s < d:
                            act0[n0] = nv
                            s0[n0] = s
                            n0 += 1
                        nv += 1
    return out[:nout], True


@njit(cache=True)
def _mark(forbidden, nbr_idx, nbr_dist, a, b, need):
    m = nbr_idx.shape[1]
    for j in range(m):
        da = nbr_dist[a, j]
        if da >= need:
            break
        i2 = nbr_idx[a, j]
        rest = need - da
        for k in range(m):
            if nbr_dist[b, k] >= rest:
                break
            forbidden[i2, nbr_idx[b, k]] = 1


_TUPLE_MODES = {"ordered": 0, "distinct": 1, "combinations": 2}


def default_sub_distance(min_hd: int) -> int:
    """Stage-1 (12-bit) minimum distance used by hierarchical generation.

    Capped at 4: larger block distances starve the tuple search and give
    libraries far smaller than the direct greedy construction would.
    """
    return min(math.ceil(min_hd / 4), 4)


def lexicode(code_length: int, min_hd: int, rotation_closed: bool = True) -> list[int]:
    """Exhaustive greedy lexicode over all ``2**code_length`` words."""
    if code_length > 24:
        raise ValueError("exhaustive lexicode generation is limited to 24 bits")
    if min_hd > code_length:
        return []
    if rotation_closed and code_length % 4:
        raise ValueError("code_length must be divisible by 4")
    return [int(w) for w in _direct_lexicode(code_length, min_hd, rotation_closed)]


def generate_library(
    code_length: int,
    min_hd: int,
    mode: str = "hierarchical",
    sub_min_hd: int | None = None,
    capacity: int = 1 << 17,
    tuples: str = "combinations",
) -> MarkerLibrary:
    """Greedy rotation-closed lexicode.

    ``direct`` scans every word in ascending order (code_length <= 16).
    ``hierarchical`` first builds a plain 12-bit lexicode with distance
    ``sub_min_hd`` and then scans 4-tuples of it in lexicographic order,
    accepting each against the full rotation-closed constraint. ``tuples``
    picks the candidate set: "combinations" (strictly increasing block
    indices, the default), "distinct" or "ordered" (repeats allowed).
    """
    if tuples not in _TUPLE_MODES:
        raise ValueError(f"unknown tuple mode {tuples!r}")
    if code_length <= 0 or code_length % 4:
        raise ValueError("code_length must be a positive multiple of 4")
    if min_hd < 1:
        raise ValueError("min_hd must be >= 1")
    if mode == "direct":
        if code_length > 16:
            raise ValueError("direct mode is limited to code_length <= 16")
        return MarkerLibrary(code_length, min_hd, tuple(lexicode(code_length, min_hd)))
    if mode != "hierarchical":
        raise ValueError(f"unknown mode {mode!r}")
    if code_length != 4 * SUB_CODE_LENGTH:
        raise ValueError("hierarchical mode builds 48-bit codes from 12-bit blocks")
    if min_hd > code_length:
        return MarkerLibrary(code_length, min_hd, ())

    sub_hd = default_sub_distance(min_hd) if sub_min_hd is None else sub_min_hd
    sub = np.array(lexicode(SUB_CODE_LENGTH, sub_hd, rotation_closed=False), dtype=np.int64)
    dist = np.array([[bin(int(a) ^ int(b)).count("1") for b in sub] for a in sub], dtype=np.int32)
    nbr_idx = np.argsort(dist, axis=1, kind="stable").astype(np.int32)
    nbr_dist = np.take_along_axis(dist, nbr_idx, axis=1).astype(np.int32)
    blocks, complete = _assemble_blocks(dist, nbr_idx, nbr_dist, min_hd, capacity, _TUPLE_MODES[tuples])
    if not complete:
        raise RuntimeError(f"library exceeded capacity {capacity}")
    words = []
    for t in blocks:
        w = 0
        for p in range(4):
            # block 0 is most significant so tuple order equals numeric order
            w |= int(sub[t[p]]) << (SUB_CODE_LENGTH * (3 - p))
        words.append(w)
    return MarkerLibrary(code_length, min_hd, tuple(words))


# ---------------------------------------------------------------------------
# verification and decoding


@njit(cache=True)
def _min_distance_all(variants, self_only_skip):
    """Smallest distance between any word and any other word/rotation."""
    n = variants.shape[0]
    best = 1 << 30
    for i in range(n):
        w = variants[i, 0]
        for r in range(1, 4):
            s = _popcount64(w ^ variants[i, r])
            if s < best:
                best = s
        for j in range(i + 1, n):
            for r in range(4):
                s = _popcount64(w ^ variants[j, r])
                if s < best:
                    best = s
    return best


def library_min_distance(library: MarkerLibrary) -> int:
    """Exhaustive rotation-closed minimum distance (brute force over all pairs)."""
    if len(library) == 0:
        return library.code_length + 1
    return int(_min_distance_all(library.variants, 0))


def check_library(library: MarkerLibrary) -> bool:
    return library_min_distance(library) >= library.min_hamming_distance


@njit(cache=True)
def _best_match(variants, word):
    best = 1 << 30
    best_i = -1
    best_r = -1
    for i in range(variants.shape[0]):
        for r in range(4):
            s = _popcount64(word ^ variants[i, r])
            if s < best:
                best = s
                best_i = i
                best_r = r
    return best_i, best_r, best


def decode(read_word, library: MarkerLibrary, max_correct: int | None = None) -> DecodeResult | None:
    """Nearest codeword rotation to ``read_word`` within ``max_correct`` bits, else None."""
    if isinstance(read_word, Codeword):
        if read_word.width != library.code_length:
            raise ValueError("read word width differs from library code length")
        read_word = read_word.bits
    if max_correct is None:
        max_correct = library.max_correctable
    if len(library) == 0:
        return None
    i, r, dist = _best_match(library.variants, np.uint64(read_word))
    if dist > max_correct:
        return None
    return DecodeResult(int(i), int(r), int(dist))


def max_ber_correction(library: MarkerLibrary) -> float:
    if len(library) == 0:
        raise ValueError("empty library")
    return library.max_correctable / library.code_length
