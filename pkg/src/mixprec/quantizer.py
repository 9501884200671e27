"""Uniform symmetric quantization with MSE-calibrated scale factors.

A weight vector is mapped onto the signed integer grid
``{-2**(bits-1), ..., 2**(bits-1) - 1}`` stretched by a positive step
size.  The step size is picked per tensor from a fixed candidate grid
by minimizing the mean squared error against the float weights, so the
whole pipeline stays deterministic and backprop-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LayerSpec",
    "QuantizedView",
    "quantize",
    "quantize_view",
    "calibrate_scale_mse",
    "perturbation",
]

# Candidate step sizes scan this relative span around max|w| / 2**(bits-1).
SCALE_SPAN_LO = 0.01
SCALE_SPAN_HI = 1.2
SCALE_CANDIDATES = 200


@dataclass(frozen=True)
class LayerSpec:
    """A named flat weight vector; the unit of bit-width assignment."""

    name: str
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.size < 1:
            raise ValueError(f"layer {self.name!r} has no weights")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def count(self) -> int:
        return int(self.weights.size)


@dataclass(frozen=True)
class QuantizedView:
    """Integer codes plus the positive scale that dequantizes them."""

    scale: float
    bits: int
    values: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def dequantize(self) -> np.ndarray:
        return self.values * self.scale


def _check_bits_scale(bits: int, scale: float) -> None:
    if int(bits) != bits or bits < 2:
        raise ValueError(f"bits must be an integer >= 2, got {bits!r}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale!r}")


def _codes(w: np.ndarray, bits: int, scale: float) -> np.ndarray:
    # np.round is round-half-to-even, which keeps results platform-stable.
    lo = -(2 ** (bits - 1))
    hi = 2 ** (bits - 1) - 1
    return np.clip(np.round(w / scale), lo, hi)


def quantize(w, bits: int, scale: float) -> np.ndarray:
    """Map ``w`` to the nearest representable values at the given step size."""
    _check_bits_scale(bits, scale)
    w = np.asarray(w, dtype=np.float64)
    return _codes(w, bits, scale) * scale


def quantize_view(w, bits: int, scale: float) -> QuantizedView:
    """Like :func:`quantize` but returning integer codes with the scale."""
    _check_bits_scale(bits, scale)
    w = np.asarray(w, dtype=np.float64)
    codes = _codes(w, bits, scale).astype(np.int64)
    return QuantizedView(scale=float(scale), bits=int(bits), values=codes)


def _candidate_scales(amax: float, bits: int) -> np.ndarray:
    base = amax / 2 ** (bits - 1)
    grid = np.geomspace(SCALE_SPAN_LO * base, SCALE_SPAN_HI * base, SCALE_CANDIDATES)
    # Both min-max conventions are appended so neither clipping the top
    # code away nor using the full signed range is ever outside the search.
    return np.concatenate([grid, [base, amax / (2 ** (bits - 1) - 1)]])


def calibrate_scale_mse(w, bits: int) -> float:
    """Return the candidate scale minimizing ``||w - quantize(w, bits, s)||^2``.

    The search is a fixed deterministic grid, so the result depends only on
    the weight values and the bit-width.  An all-zero vector is represented
    exactly by every grid, so it calibrates to the sentinel scale 1.0.
    """
    _check_bits_scale(bits, 1.0)
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("cannot calibrate an empty vector")
    amax = float(np.max(np.abs(w)))
    if amax == 0.0:
        return 1.0
    cands = _candidate_scales(amax, bits)
    lo = -(2 ** (bits - 1))
    hi = 2 ** (bits - 1) - 1
    q = np.clip(np.round(w[None, :] / cands[:, None]), lo, hi) * cands[:, None]
    mse = np.mean((q - w[None, :]) ** 2, axis=1)
    return float(cands[int(np.argmin(mse))])


def perturbation(layer, bits: int) -> np.ndarray:
    """Quantization error ``quantize(w, bits, s*) - w`` at the calibrated scale."""
    w = layer.weights if isinstance(layer, LayerSpec) else np.asarray(layer, dtype=np.float64).ravel()
    scale = calibrate_scale_mse(w, bits)
    return quantize(w, bits, scale) - w
