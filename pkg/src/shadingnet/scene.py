"""Procedural desk-scale scenes ray-cast into intrinsic ground truth.

World is y-up. A scene is a ground plane plus Lambertian spheres, lit by one
directional light and a uniform sky. Shadow casters ("occluders") are listed
separately from the visible geometry: an occluder may coincide with a visible sphere
or be invisible geometry (e.g. a canopy slab outside the view).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .physics import (DTYPE, LightEnvironment, NormalMap, compose_unified, direct_shading,
                      quantize_shading, split_indirect)

EPS = 1e-4
AO_SAMPLES = 16


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class Occluder:
    kind: str  # "sphere" or "slab"
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.0
    lo: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hi: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def sphere(cls, center, radius) -> "Occluder":
        return cls("sphere", center=tuple(map(float, center)), radius=float(radius))

    @classmethod
    def slab(cls, lo, hi) -> "Occluder":
        return cls("slab", lo=tuple(map(float, lo)), hi=tuple(map(float, hi)))


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    fov_deg: float


@dataclass(frozen=True)
class SceneSpec:
    ground_height: float
    ground_albedo: tuple[float, float, float]
    spheres: tuple[Sphere, ...]
    occluders: tuple[Occluder, ...]
    light: LightEnvironment
    camera: Camera
    seed: int = 0

    def __post_init__(self):
        albedos = [self.ground_albedo] + [s.albedo for s in self.spheres]
        for a in albedos:
            if len(a) != 3 or min(a) < 0 or max(a) > 1:
                raise ValueError(f"albedo {a} outside [0, 1]")
        for s in self.spheres:
            if s.radius <= 0:
                raise ValueError(f"sphere radius must be positive, got {s.radius}")
        for o in self.occluders:
            if o.kind == "sphere" and o.radius <= 0:
                raise ValueError("occluder sphere radius must be positive")
            if o.kind == "slab" and not all(l < h for l, h in zip(o.lo, o.hi)):
                raise ValueError("slab lo corner must be below hi corner on every axis")
            if o.kind not in ("sphere", "slab"):
                raise ValueError(f"unknown occluder kind {o.kind!r}")
        if not 10.0 < self.camera.fov_deg < 120.0:
            raise ValueError(f"field of view {self.camera.fov_deg} outside (10, 120) degrees")


@dataclass
class IntrinsicSample:
    composite: np.ndarray  # (3, H, W)
    reflectance: np.ndarray  # (3, H, W)
    shading_unified: np.ndarray  # (1, H, W)
    shading_direct: np.ndarray
    ambient: np.ndarray
    shadow: np.ndarray  # <= 0
    normals: np.ndarray  # (3, H, W)
    mask: np.ndarray  # (1, H, W), 1.0 on surface hits

    MAPS = ("reflectance", "shading_unified", "shading_direct", "ambient", "shadow",
            "normals", "mask")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.composite.shape[1], self.composite.shape[2]

    def violations(self, composite_tol: float = 1e-6) -> list[str]:
        """Names of the ground-truth invariants this sample breaks (empty when valid)."""
        out = []
        if not np.array_equal(self.shading_unified,
                              self.shading_direct + self.ambient + self.shadow):
            out.append("unified != direct + ambient + shadow")
        if np.any(self.ambient * self.shadow != 0):
            out.append("ambient and shadow overlap")
        if np.any(self.ambient < 0) or np.any(self.shadow > 0):
            out.append("ambient/shadow sign")
        if np.any(self.shading_direct < 0) or np.any(self.shading_unified < 0):
            out.append("negative shading")
        if np.any(self.reflectance < 0) or np.any(self.reflectance > 1):
            out.append("reflectance outside [0, 1]")
        err = np.abs(self.composite - compose_unified(self.reflectance, self.shading_unified))
        if err.max(initial=0.0) > composite_tol:
            out.append(f"composite != rho * s_u (max err {err.max():.3g})")
        for name in ("composite",) + self.MAPS:
            if not np.all(np.isfinite(getattr(self, name))):
                out.append(f"{name} not finite")
        return out


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_scene(seed: int) -> SceneSpec:
    rng = np.random.default_rng(seed)
    ground = float(rng.uniform(-0.2, 0.2))
    spheres = []
    for _ in range(int(rng.integers(1, 7))):
        r = float(rng.uniform(0.3, 0.9))
        lift = float(rng.uniform(0.0, 0.6)) if rng.random() < 0.4 else 0.0
        c = (float(rng.uniform(-2.2, 2.2)), ground + r + lift, float(rng.uniform(-1.0, 2.5)))
        spheres.append(Sphere(c, r, tuple(float(a) for a in rng.uniform(0.1, 0.9, 3))))

    occluders = []
    for _ in range(int(rng.integers(0, 4))):
        pick = rng.random()
        if pick < 0.5:
            s = spheres[int(rng.integers(len(spheres)))]
            occluders.append(Occluder.sphere(s.center, s.radius))
        elif pick < 0.8:
            # invisible canopy overhead
            x0, z0 = rng.uniform(-3.0, 2.0), rng.uniform(-1.0, 3.0)
            y0 = ground + rng.uniform(2.0, 3.0)
            occluders.append(Occluder.slab((x0, y0, z0), (x0 + rng.uniform(0.5, 2.0), y0 + 0.2,
                                                          z0 + rng.uniform(0.5, 2.0))))
        else:
            # invisible post or wall standing on the ground
            x0, z0 = rng.uniform(-3.0, 3.0), rng.uniform(3.0, 5.0)
            occluders.append(Occluder.slab((x0, ground + 0.01, z0),
                                           (x0 + rng.uniform(0.2, 1.5), ground + rng.uniform(0.5, 2.0),
                                            z0 + rng.uniform(0.1, 0.5))))

    elev = np.radians(rng.uniform(15.0, 75.0))
    azim = rng.uniform(0.0, 2 * np.pi)
    direction = _unit((np.cos(elev) * np.sin(azim), np.sin(elev), np.cos(elev) * np.cos(azim)))
    light = LightEnvironment(tuple(float(v) for v in direction),
                             e_d=float(rng.uniform(0.5, 1.2)), e_a=float(rng.uniform(0.05, 0.4)))
    camera = Camera(
        position=(float(rng.uniform(-1.0, 1.0)), ground + float(rng.uniform(1.2, 2.5)),
                  float(rng.uniform(-6.0, -4.5))),
        look_at=(0.0, ground + float(rng.uniform(0.2, 0.8)), 0.8),
        fov_deg=float(rng.uniform(40.0, 60.0)),
    )
    return SceneSpec(ground, tuple(float(a) for a in rng.uniform(0.2, 0.8, 3)), tuple(spheres),
                     tuple(occluders), light, camera, seed=int(seed))


def _camera_rays(cam: Camera, h: int, w: int):
    pos = np.asarray(cam.position, dtype=np.float64)
    fwd = np.asarray(cam.look_at, dtype=np.float64) - pos
    if np.linalg.norm(fwd) < 1e-12:
        raise ValueError("degenerate camera: look_at coincides with position")
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 0.0, 1.0])
    right = _unit(np.cross(fwd, up))
    cam_up = np.cross(right, fwd)
    half = np.tan(np.radians(cam.fov_deg) / 2)
    ys = (1 - 2 * (np.arange(h) + 0.5) / h) * half
    xs = (2 * (np.arange(w) + 0.5) / w - 1) * half * (w / h)
    d = fwd + xs[None, :, None] * right + ys[:, None, None] * cam_up
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return pos, d.reshape(-1, 3)


def _hit_sphere(o, d, center, radius):
    """Nearest positive ray parameter per ray (inf on miss). ``o`` broadcasts against ``d``."""
    oc = o - np.asarray(center)
    b = np.einsum("...i,...i->...", oc, d)
    c = np.einsum("...i,...i->...", oc, oc) - radius * radius
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > EPS, t0, np.where(t1 > EPS, t1, np.inf))
    return np.where(disc >= 0, t, np.inf)


def _hit_slab(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (np.asarray(lo) - o) * inv
        tb = (np.asarray(hi) - o) * inv
    tnear = np.nanmax(np.minimum(ta, tb), axis=-1)
    tfar = np.nanmin(np.maximum(ta, tb), axis=-1)
    hit = (tfar >= np.maximum(tnear, EPS))
    return np.where(hit, np.maximum(tnear, EPS), np.inf)


def _blocked(origins, dirs, occluders) -> np.ndarray:
    blocked = np.zeros(dirs.shape[:-1], dtype=bool)
    for occ in occluders:
        if occ.kind == "sphere":
            t = _hit_sphere(origins, dirs, occ.center, occ.radius)
        else:
            t = _hit_slab(origins, dirs, occ.lo, occ.hi)
        blocked |= np.isfinite(t)
    return blocked


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def pixel_uniforms(seed: int, h: int, w: int, salt: int) -> np.ndarray:
    """Deterministic per-pixel uniforms in [0, 1) from (seed, y, x, salt)."""
    yy, xx = np.meshgrid(np.arange(h, dtype=np.uint64), np.arange(w, dtype=np.uint64), indexing="ij")
    key = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        x = _splitmix64(_splitmix64(key ^ np.uint64(salt)) ^ (yy << np.uint64(32)) ^ xx)
    return ((x >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(-1)


def hemisphere_directions(normals: np.ndarray, jitter: np.ndarray, n_samples: int) -> np.ndarray:
    """Cosine-weighted stratified directions around each normal: (P, n_samples, 3)."""
    side = int(np.ceil(np.sqrt(n_samples)))
    idx = np.arange(n_samples)
    u1 = ((idx // side) + 0.5) / side
    u2 = ((idx % side) + 0.5) / side
    # Cranley-Patterson rotation per pixel keeps strata but decorrelates neighbours
    u1 = np.mod(u1[None, :] + jitter[:, :1], 1.0)
    u2 = np.mod(u2[None, :] + jitter[:, 1:], 1.0)
    r = np.sqrt(u1)
    phi = 2 * np.pi * u2
    local = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(1.0 - u1)], axis=-1)
    helper = np.where(np.abs(normals[:, 1:2]) < 0.9, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
    t = np.cross(helper, normals)
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    b = np.cross(normals, t)
    return (local[..., :1] * t[:, None] + local[..., 1:2] * b[:, None]
            + local[..., 2:] * normals[:, None])


def render(spec: SceneSpec, resolution: tuple[int, int], ao_samples: int = AO_SAMPLES) -> IntrinsicSample:
    h, w = resolution
    if h < 8 or w < 8:
        raise ValueError(f"resolution must be at least 8x8, got {h}x{w}")
    origin, dirs = _camera_rays(spec.camera, h, w)
    p_count = h * w
    t_best = np.full(p_count, np.inf)
    albedo = np.zeros((p_count, 3))
    normal = np.zeros((p_count, 3))

    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = (spec.ground_height - origin[1]) / dirs[:, 1]
    t_plane = np.where(t_plane > EPS, t_plane, np.inf)
    hit = t_plane < t_best
    t_best[hit] = t_plane[hit]
    albedo[hit] = spec.ground_albedo
    normal[hit] = (0.0, 1.0, 0.0)

    for s in spec.spheres:
        t = _hit_sphere(origin, dirs, s.center, s.radius)
        hit = t < t_best
        t_best[hit] = t[hit]
        albedo[hit] = s.albedo
        pts = origin + t[hit, None] * dirs[hit]
        normal[hit] = (pts - np.asarray(s.center)) / s.radius

    valid = np.isfinite(t_best)
    normal[valid] /= np.linalg.norm(normal[valid], axis=-1, keepdims=True)
    pts = origin + np.where(valid, t_best, 0.0)[:, None] * dirs
    start = pts + EPS * 10 * normal

    light = spec.light
    ldir = np.asarray(light.direction, dtype=np.float64)
    visible = ~_blocked(start, np.broadcast_to(ldir, start.shape), spec.occluders)

    if spec.occluders and ao_samples > 0:
        jitter = np.stack([pixel_uniforms(spec.seed, h, w, 1), pixel_uniforms(spec.seed, h, w, 2)], -1)
        occ_frac = np.zeros(p_count)
        vidx = np.flatnonzero(valid)
        hemi = hemisphere_directions(normal[vidx], jitter[vidx], ao_samples)
        occ_frac[vidx] = _blocked(start[vidx, None, :], hemi, spec.occluders).mean(axis=1)
    else:
        occ_frac = np.zeros(p_count)

    normals_chw = normal.T.reshape(3, h, w).astype(DTYPE)
    mask2d = valid.reshape(h, w)
    s_d = quantize_shading(direct_shading(NormalMap(normals_chw, mask2d), light))
    indirect = (light.e_a * (1.0 - occ_frac) * valid).reshape(1, h, w)
    s_u_raw = quantize_shading(s_d * visible.reshape(1, h, w) + indirect)

    ambient, shadow = split_indirect(s_u_raw, s_d)
    s_u = s_d + ambient + shadow
    rho = (albedo * valid[:, None]).T.reshape(3, h, w).astype(DTYPE)
    return IntrinsicSample(
        composite=compose_unified(rho, s_u),
        reflectance=rho,
        shading_unified=s_u,
        shading_direct=s_d,
        ambient=ambient,
        shadow=shadow,
        normals=normals_chw,
        mask=mask2d.astype(DTYPE)[None],
    )
