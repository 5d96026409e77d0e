"""Image formation with fine-grained shading.

Maps are float32 arrays laid out channel-first: reflectance is (3, H, W), every
shading-type map (unified, direct, ambient, shadow) is (1, H, W). Shadow carries the
physical sign, i.e. it is <= 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32

# Shading values are snapped to this dyadic grid so that sums and differences of maps
# (all well below 2**3) are exact in float32.
SHADING_GRID = 2.0**-20


class PhysicalValidityError(ValueError):
    pass


@dataclass(frozen=True)
class LightEnvironment:
    direction: tuple[float, float, float]  # unit vector from surface toward the light
    e_d: float
    e_a: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError(f"light direction must be unit length, got norm {np.linalg.norm(d)}")
        if self.e_d < 0 or self.e_a < 0:
            raise ValueError("light intensities must be non-negative")


@dataclass
class NormalMap:
    values: np.ndarray  # (3, H, W)
    mask: np.ndarray  # (H, W) bool, True where a surface was hit

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3 or self.values.shape[0] != 3:
            raise ValueError(f"normals must be (3, H, W), got {self.values.shape}")
        if self.mask.shape != self.values.shape[1:]:
            raise ValueError("normal mask must match the map's H x W")


def quantize_shading(s: np.ndarray) -> np.ndarray:
    return (np.round(np.asarray(s, dtype=np.float64) / SHADING_GRID) * SHADING_GRID).astype(DTYPE)


def _as_map(a, channels: int | None, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or (channels is not None and a.shape[0] != channels):
        raise ValueError(f"{what} must be ({channels}, H, W), got {a.shape}")
    return a


def _same_size(*maps: np.ndarray) -> None:
    sizes = {m.shape[1:] for m in maps}
    if len(sizes) != 1:
        raise ValueError(f"map sizes differ: {sorted(sizes)}")


def compose_unified(rho, s_u) -> np.ndarray:
    """I = rho * s_u with the single shading channel broadcast over color."""
    rho = _as_map(rho, 3, "reflectance")
    s_u = _as_map(s_u, 1, "unified shading")
    _same_size(rho, s_u)
    return rho * s_u


def direct_shading(normals: NormalMap, light: LightEnvironment, tol: float = 1e-4) -> np.ndarray:
    """e_d * max(0, n . l) on valid pixels, 0 elsewhere."""
    n = normals.values
    m = normals.mask
    norms = np.sqrt((n.astype(np.float64) ** 2).sum(axis=0))
    bad = m & (np.abs(norms - 1.0) > tol)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise ValueError(f"non-unit normal at pixel ({y}, {x}): norm {norms[y, x]:.6f}")
    l = np.asarray(light.direction, dtype=np.float64)
    cos = np.tensordot(l, n.astype(np.float64), axes=(0, 0))
    s = light.e_d * np.maximum(cos, 0.0) * m
    return s.astype(DTYPE)[None]


def compose_full(rho, s_d, ambient, shadow, tol: float = 1e-6) -> np.ndarray:
    """I = rho * (s_d + ambient + shadow); a total below -tol is rejected."""
    rho = _as_map(rho, 3, "reflectance")
    s_d = _as_map(s_d, 1, "direct shading")
    ambient = _as_map(ambient, 1, "ambient")
    shadow = _as_map(shadow, 1, "shadow")
    _same_size(rho, s_d, ambient, shadow)
    total = s_d + ambient + shadow
    if (total < -tol).any():
        _, y, x = np.argwhere(total < -tol)[0]
        raise PhysicalValidityError(
            f"negative total shading {float(total[0, y, x]):.6g} at pixel ({y}, {x})")
    return rho * np.maximum(total, 0)


def split_indirect(s_u, s_d) -> tuple[np.ndarray, np.ndarray]:
    """Residual s_u - s_d split by sign into (ambient >= 0, shadow <= 0)."""
    s_u = _as_map(s_u, 1, "unified shading")
    s_d = _as_map(s_d, 1, "direct shading")
    _same_size(s_u, s_d)
    r = s_u - s_d
    # + 0.0 turns -0.0 into +0.0 so the zero pixels compare and serialize identically
    return np.maximum(r, 0) + DTYPE(0), np.minimum(r, 0) + DTYPE(0)


def reconstruct_direct(s_u, ambient, shadow) -> np.ndarray:
    s_u = _as_map(s_u, 1, "unified shading")
    ambient = _as_map(ambient, 1, "ambient")
    shadow = _as_map(shadow, 1, "shadow")
    _same_size(s_u, ambient, shadow)
    return s_u - ambient - shadow
