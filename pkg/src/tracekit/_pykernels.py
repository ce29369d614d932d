"""Pure-Python implementations of the numeric kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
reference the compiled versions are tested against.
"""

from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def hash_features(tokens: list[str], dim: int) -> np.ndarray:
    """Signed hashing-trick bag of tokens, l2-normalised.

    Bucket comes from the hash modulo ``dim``; the sign from the top bit.
    An empty token list maps to the zero vector.
    """
    out = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        h = fnv1a64(tok.encode("utf-8"))
        out[h % dim] += -1.0 if h >> 63 else 1.0
    norm = float(np.sqrt(np.dot(out, out)))
    if norm > 0.0:
        out /= norm
    return out


def clipped_surrogate(
    logits: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    advantages: np.ndarray,
    weights: np.ndarray,
    clip_eps: float,
    temperature: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Clipped surrogate loss and its gradient w.r.t. the raw logits.

    Each row is one action token. ``weights`` carries the 1/(|B| T) factor of
    the token's trajectory. Returns ``(loss, grad_logits, new_logp)``.
    """
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp_all = z - lse[:, None]
    rows = np.arange(len(actions))
    new_logp = logp_all[rows, actions]
    ratio = np.exp(new_logp - old_logp)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    unclipped_obj = ratio * advantages
    clipped_obj = clipped * advantages
    loss = -float(np.sum(weights * np.minimum(unclipped_obj, clipped_obj)))

    # gradient flows only through the unclipped branch when it is the min
    active = unclipped_obj <= clipped_obj
    coef = np.where(active, -weights * advantages * ratio, 0.0)
    probs = np.exp(logp_all)
    grad = -probs * coef[:, None]
    grad[rows, actions] += coef
    grad /= temperature
    return loss, grad, new_logp
