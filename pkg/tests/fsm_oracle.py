"""Brute-force completion oracle for the ordering constraints.

Works on whole-vertex integers ``(y*Q + z)*Q + x``: a token is admissible iff
some completion of the current face exists with strictly increasing vertices
and a face strictly greater than the previous one. For the vertex that the new
token belongs to, every possible value is enumerated; later vertices take the
largest values that still leave room, which is the completion most likely to
beat the previous face.
"""

import numpy as np


def admissible_tokens(face_prefix, prev_face, q):
    """Bool array over the q coordinate tokens for the next slot."""
    k = len(face_prefix)
    j, r = divmod(k, 3)  # vertex index and slot of the new token
    top = q ** 3 - 1
    known = [_vertex(face_prefix[3 * i:3 * i + 3], q) for i in range(j)]
    partial = face_prefix[3 * j:k]

    free = 3 - (r + 1)  # digits left in vertex j after the new token
    head = np.zeros((q, 1), dtype=np.int64)
    for t in partial:
        head = head * q + t
    head = head * q + np.arange(q)[:, None]  # (q, 1)
    tails = np.arange(q ** free)[None, :]
    vj = head * q ** free + tails  # (q, q**free) candidate vertex values

    ok = vj <= top - (2 - j)
    if j >= 1:
        ok &= vj > known[-1]
    if prev_face is not None:
        prev = [_vertex(prev_face[3 * i:3 * i + 3], q) for i in range(3)]
        later = [top - (2 - i) for i in range(j + 1, 3)]
        # lexicographic (known..., vj, later...) > prev
        gt = np.zeros_like(ok)
        eq = np.ones_like(ok)
        for i in range(3):
            if i < j:
                a = np.full_like(vj, known[i])
            elif i == j:
                a = vj
            else:
                a = np.full_like(vj, later[i - j - 1])
            gt |= eq & (a > prev[i])
            eq &= a == prev[i]
        ok &= gt
    return ok.any(axis=1)


def _vertex(tokens, q):
    y, z, x = (int(t) for t in tokens)
    return (y * q + z) * q + x
