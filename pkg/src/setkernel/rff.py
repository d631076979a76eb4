"""Random Fourier feature map approximating the RBF kernel.

The map is phi(x) = sqrt(2/D) * [sin(W^T x) || cos(W^T x)] with the columns
of W drawn i.i.d. from N(0, 1/gamma), so that phi(x)^T phi(x') is an unbiased
estimate of exp(-||x - x'||^2 / (2 gamma)). Frequencies are sampled once per
model and frozen; the sampling algorithm is fixed (Box-Muller over Philox
uniforms) so a serialized map can be regenerated from (d, D, gamma, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import MASK64

GENERATOR_NAME = "philox4x64-boxmuller"


@dataclass(frozen=True)
class RffMap:
    """Frozen random-feature map: frequencies W (d x D/2), bandwidth gamma."""

    W: np.ndarray
    gamma: float
    D: int
    seed: int
    scale: float

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if self.D < 2 or self.D % 2 != 0:
            raise ValueError(f"D must be even and >= 2, got {self.D}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if W.ndim != 2 or W.shape[1] != self.D // 2:
            raise ValueError(f"W must be d x D/2, got shape {W.shape} for D={self.D}")
        if not np.all(np.isfinite(W)):
            raise ValueError("W contains non-finite entries")
        W = W.copy()
        W.setflags(write=False)
        object.__setattr__(self, "W", W)

    @property
    def d(self) -> int:
        return self.W.shape[0]


def philox_rng(seed: int) -> np.random.Generator:
    """Counter-based 64-bit generator keyed directly by the (masked) seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & MASK64))


def gaussian_draws(count: int, seed: int) -> np.ndarray:
    """count standard normals via Box-Muller over Philox uniform doubles."""
    rng = philox_rng(seed)
    pairs = (count + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1]; keeps log finite
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:count]


def sample_frequencies(d: int, D: int, gamma: float, seed: int) -> RffMap:
    """Draw the d x D/2 frequency matrix with entries ~ N(0, 1/gamma)."""
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if D < 2 or D % 2 != 0:
        raise ValueError(f"D must be even and >= 2, got {D}")
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    W = gaussian_draws(d * (D // 2), seed).reshape(d, D // 2) / np.sqrt(gamma)
    return RffMap(W=W, gamma=float(gamma), D=int(D), seed=int(seed) & MASK64,
                  scale=float(np.sqrt(2.0 / D)))


def featurize_batch(rmap: RffMap, X: np.ndarray) -> np.ndarray:
    """Feature map for an (n, d) matrix of cells; returns (n, D)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != rmap.d:
        raise ValueError(f"input has d={X.shape[1]}, map expects d={rmap.d}")
    Z = X @ rmap.W
    out = np.empty((X.shape[0], rmap.D))
    half = rmap.D // 2
    np.sin(Z, out=out[:, :half])
    np.cos(Z, out=out[:, half:])
    out *= rmap.scale
    return out


def featurize(rmap: RffMap, x: np.ndarray) -> np.ndarray:
    """Feature map for a single cell; first D/2 sines, then D/2 cosines."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return featurize_batch(rmap, x[None, :])[0]


def featurize_jacobian(rmap: RffMap, x: np.ndarray) -> np.ndarray:
    """d(phi)/dx at x, shape (D, d).

    Row j (j < D/2) is scale * cos(w_j^T x) * w_j^T; row D/2 + j is
    -scale * sin(w_j^T x) * w_j^T.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != rmap.d:
        raise ValueError(f"input has d={x.shape[0]}, map expects d={rmap.d}")
    z = x @ rmap.W
    Wt = rmap.W.T  # (D/2, d), rows are frequencies
    top = rmap.scale * np.cos(z)[:, None] * Wt
    bottom = -rmap.scale * np.sin(z)[:, None] * Wt
    return np.concatenate([top, bottom], axis=0)


def kernel_exact(x: np.ndarray, x2: np.ndarray, gamma: float) -> float:
    """RBF kernel exp(-||x - x'||^2 / (2 gamma))."""
    x = np.asarray(x, dtype=np.float64).ravel()
    x2 = np.asarray(x2, dtype=np.float64).ravel()
    if x.shape != x2.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {x2.shape}")
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    delta = x - x2
    return float(np.exp(-float(delta @ delta) / (2.0 * gamma)))
