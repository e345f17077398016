"""Independent reference implementations used as test oracles.

Deliberately naive: bit lists, explicit loops, no shared code with the package.
"""

import itertools

import numpy as np


def bits_of(w, n):
    return [(w >> i) & 1 for i in range(n)]


def word_of(bits):
    return sum(b << i for i, b in enumerate(bits))


def hamming_loop(a, b, n):
    return sum(x != y for x, y in zip(bits_of(a, n), bits_of(b, n)))


def rotate_list(w, r, n):
    """Quarter-turn as a list rotation: bit i moves to position i + r*n/4."""
    b = bits_of(w, n)
    k = (r % 4) * (n // 4)
    out = [0] * n
    for i in range(n):
        out[(i + k) % n] = b[i]
    return word_of(out)


def brute_lexicode(n, d):
    """Greedy rotation-closed lexicode over all 2^n words, checked pair by pair."""
    acc = []
    for w in range(2 ** n):
        if any(hamming_loop(w, rotate_list(w, r, n), n) < d for r in (1, 2, 3)):
            continue
        if all(hamming_loop(w, rotate_list(c, r, n), n) >= d for c in acc for r in range(4)):
            acc.append(w)
    return acc


def brute_min_distance(words, n):
    best = n + 1
    for w in words:
        for r in (1, 2, 3):
            best = min(best, hamming_loop(w, rotate_list(w, r, n), n))
    for a, b in itertools.combinations(words, 2):
        for r in range(4):
            best = min(best, hamming_loop(a, rotate_list(b, r, n), n))
    return best


def brute_decode(word, words, n):
    """(id, rotation, distance) minimizing distance over every stored rotation."""
    best = None
    for i, c in enumerate(words):
        for r in range(4):
            d = hamming_loop(word, rotate_list(c, r, n), n)
            if best is None or d < best[2]:
                best = (i, r, d)
    return best


def sample_ellipse(cx, cy, a, b, theta, n):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    c, s = np.cos(theta), np.sin(theta)
    x, y = a * np.cos(t), b * np.sin(t)
    return np.column_stack([cx + c * x - s * y, cy + s * x + c * y])


def homography_dlt_plain(src, dst):
    """Unnormalized 4-point solve with h33 = 1 (different route from the package)."""
    A, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    h = np.linalg.solve(np.array(A, float), np.array(rhs, float))
    return np.append(h, 1.0).reshape(3, 3)


def project_points(H, pts):
    p = np.column_stack([pts, np.ones(len(pts))]) @ np.asarray(H).T
    return p[:, :2] / p[:, 2:3]
