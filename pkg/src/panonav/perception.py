"""Depth observation pipeline.

Four pinhole depth cameras at cardinal yaw offsets are rendered by analytic
ray casting against spheres (static obstacles plus neighbor agents) and the
ground plane, then stitched into one equirectangular panorama:

* panorama pixel (u, v) maps to bearing theta = 2*pi*u/W and declination
  phi = (v/H - 1/2) * alpha_v (positive phi looks down);
* each covering camera samples the pixel by pinhole reprojection
  c_x = f*tan(dtheta) + W0/2, c_y = f*sin(phi)/(cos(phi)*cos(dtheta)) + H0/2
  with bilinear interpolation;
* samples blend with cosine-squared azimuthal weights, normalized per pixel.

Cameras whose reprojected row falls outside the image are dropped from the
blend; pixels where every covering camera drops fall back to border-clamped
sampling and are flagged in the frame's ``clamped`` provenance mask (with the
default geometry that only happens in the outermost rows).

Rendering happens in the yaw-aligned frame and its outputs are constants with
respect to differentiation; training gradients flow through the state path
only.
"""

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import kernels
from .errors import ConfigError

D_RENDER_MAX = 100.0  # far-plane / failed-camera fill, m

CAMERA_NAMES = {"front": 0, "left": 1, "back": 2, "right": 3}


@dataclass(frozen=True)
class CameraRig:
    yaws: tuple = (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi)
    fov: float = math.radians(100.0)   # horizontal, radians
    width: int = 64
    height: int = 64

    @property
    def focal(self):
        return self.width / (2.0 * math.tan(self.fov / 2.0))

    @property
    def n_cameras(self):
        return len(self.yaws)

    def key(self):
        return (tuple(float(y) for y in self.yaws), float(self.fov),
                self.width, self.height)


@dataclass(frozen=True)
class PanoramaConfig:
    width: int = 128
    height: int = 32
    # Vertical span chosen so every row except the outermost ones stays
    # inside all contributing cameras' images at every bearing.
    alpha_v: float = math.radians(90.0)

    def key(self):
        return (self.width, self.height, float(self.alpha_v))


@dataclass
class PanoramaFrame:
    depth: np.ndarray          # (H, W), meters
    alpha_v: float
    clamped: np.ndarray = None  # (H, W) bool: border-clamped provenance


@dataclass
class PreprocessConfig:
    d_min: float = 0.3
    d_max: float = 24.0
    beta: float = None    # defaults to d_min
    gamma: float = None   # defaults to d_min / d_max
    noise_std: float = 0.02
    pool: int = 2

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ConfigError("need 0 < d_min < d_max")
        if self.beta is None:
            self.beta = self.d_min
        if self.gamma is None:
            self.gamma = self.d_min / self.d_max


# ---------------------------------------------------------------------------
# rays


def ray_sphere_depth(origin, direction, center, radius):
    """Nearest positive hit distance; inf on miss; 0 if the origin is inside."""
    oc = np.asarray(center, dtype=float) - np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    b = float(d @ oc)
    disc = b * b - (float(oc @ oc) - radius * radius)
    if disc < 0.0:
        return math.inf
    s = math.sqrt(disc)
    t1 = b - s
    if t1 > 1e-9:
        return t1
    if b + s > 1e-9:
        return 0.0
    return math.inf


def equirect_direction(u, v, width, height, alpha_v):
    """(theta, phi) bearing/declination of panorama pixel (u, v)."""
    theta = 2.0 * np.pi * np.asarray(u) / width
    phi = (np.asarray(v) / height - 0.5) * alpha_v
    return theta, phi


def reproject_to_camera(theta, phi, cam_yaw, focal, width, height):
    """Continuous pixel coordinates of bearing (theta, phi) in one camera."""
    dt = _wrap_angle(np.asarray(theta) - cam_yaw)
    c_x = focal * np.tan(dt) + width / 2.0
    c_y = focal * np.sin(phi) / (np.cos(phi) * np.cos(dt)) + height / 2.0
    return c_x, c_y


def blend_weight(theta, cam_yaw, fov):
    """Cosine-squared azimuthal weight; zero outside the camera's FOV."""
    dt = _wrap_angle(np.asarray(theta) - cam_yaw)
    w = np.cos(np.pi * dt / fov) ** 2
    return np.where(np.abs(dt) < fov / 2.0, w, 0.0)


def _wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


_RAY_CACHE = {}
_PANO_RAY_CACHE = {}
_STITCH_CACHE = {}


def camera_ray_dirs(rig):
    """(K, H0, W0, 3) unit ray directions in the yaw-aligned frame."""
    key = rig.key()
    if key not in _RAY_CACHE:
        f = rig.focal
        ix = np.arange(rig.width, dtype=float)
        iy = np.arange(rig.height, dtype=float)
        ax = (ix - rig.width / 2.0) / f        # along camera right
        ay = (iy - rig.height / 2.0) / f       # along world down
        dirs = np.empty((rig.n_cameras, rig.height, rig.width, 3))
        for k, yaw in enumerate(rig.yaws):
            fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
            right = np.array([-math.sin(yaw), math.cos(yaw), 0.0])
            down = np.array([0.0, 0.0, -1.0])
            d = (fwd[None, None, :]
                 + ax[None, :, None] * right[None, None, :]
                 + ay[:, None, None] * down[None, None, :])
            dirs[k] = d / np.linalg.norm(d, axis=-1, keepdims=True)
        _RAY_CACHE[key] = dirs
    return _RAY_CACHE[key]


def pano_ray_dirs(pano):
    """(H, W, 3) unit ray directions of the equirectangular grid."""
    key = pano.key()
    if key not in _PANO_RAY_CACHE:
        u = np.arange(pano.width, dtype=float)
        v = np.arange(pano.height, dtype=float)
        theta, phi = equirect_direction(u[None, :], v[:, None],
                                        pano.width, pano.height, pano.alpha_v)
        dirs = np.stack([np.cos(theta) * np.cos(phi),
                         np.sin(theta) * np.cos(phi),
                         -np.sin(phi) * np.ones_like(theta)], axis=-1)
        _PANO_RAY_CACHE[key] = dirs
    return _PANO_RAY_CACHE[key]


# ---------------------------------------------------------------------------
# rendering


def _cast(origin, dirs_world, spheres, far, ground):
    spheres = np.asarray(spheres, dtype=float).reshape(-1, 4)
    flat = np.ascontiguousarray(dirs_world.reshape(-1, 3))
    depth = kernels.raycast_depth(np.asarray(origin, dtype=float), flat,
                                  spheres, 0.0, bool(ground), float(far))
    return depth.reshape(dirs_world.shape[:-1])


def prune_spheres(origin, spheres, radius):
    """Drop spheres entirely farther than ``radius`` from the origin."""
    spheres = np.asarray(spheres, dtype=float).reshape(-1, 4)
    if radius is None or spheres.shape[0] == 0:
        return spheres
    d = np.linalg.norm(spheres[:, :3] - np.asarray(origin), axis=1)
    return spheres[d - spheres[:, 3] <= radius]


def render_depth(origin, R_yaw, rig, spheres, far=D_RENDER_MAX, ground=True,
                 prune=None):
    """(K, H0, W0) depth images for all rig cameras from one pose."""
    local = camera_ray_dirs(rig)
    world = local @ np.asarray(R_yaw).T
    return _cast(origin, world, prune_spheres(origin, spheres, prune),
                 far, ground)


def render_scene_views(origins, frames, rig, spheres, skip=None,
                       far=D_RENDER_MAX, ground=True, prune=None):
    """(A, K, H0, W0) depth images for A poses in one shared scene.

    One kernel call covers every pose and camera; ``skip[a]`` names the
    sphere that is pose a's own body and is excluded from its views.
    ``prune`` drops spheres farther than that radius from every pose.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    frames = np.asarray(frames, dtype=float).reshape(-1, 3, 3)
    a_n = origins.shape[0]
    spheres = np.asarray(spheres, dtype=float).reshape(-1, 4)
    if skip is None:
        skip = np.full(a_n, -1, dtype=np.int64)
    else:
        skip = np.asarray(skip, dtype=np.int64)
    if prune is not None and spheres.shape[0]:
        d = np.linalg.norm(spheres[None, :, :3] - origins[:, None, :],
                           axis=-1) - spheres[:, 3]
        keep = (d <= prune).any(axis=0)
        keep[skip[skip >= 0]] = True  # renumbering must preserve skip targets
        remap = np.cumsum(keep) - 1
        skip = np.where(skip >= 0, remap[np.clip(skip, 0, None)], -1)
        spheres = spheres[keep]
    local = np.ascontiguousarray(camera_ray_dirs(rig).reshape(-1, 3))
    depth = kernels.raycast_scene(origins, frames, local, spheres, skip,
                                  0.0, bool(ground), float(far))
    return depth.reshape(a_n, rig.n_cameras, rig.height, rig.width)


def direct_equirect_render(origin, R_yaw, pano, spheres, far=D_RENDER_MAX,
                           ground=True):
    """Oracle renderer: one ray per panorama pixel, no stitching."""
    local = pano_ray_dirs(pano)
    world = local @ np.asarray(R_yaw).T
    depth = _cast(origin, world, spheres, far, ground)
    return PanoramaFrame(depth=depth, alpha_v=pano.alpha_v,
                         clamped=np.zeros(depth.shape, dtype=bool))


# ---------------------------------------------------------------------------
# stitching


class StitchTable:
    """Precomputed per-(rig, panorama) sampling and blending tables.

    Arrays are (K, H, W): integer bilinear taps y0/x0, fractional weights
    fy/fx, normalized blend weights wn (summing to 1 over K at every pixel),
    and the pixel-level ``clamped`` provenance mask.
    """

    def __init__(self, rig, pano):
        K, H, W = rig.n_cameras, pano.height, pano.width
        H0, W0, f = rig.height, rig.width, rig.focal
        u = np.arange(W, dtype=float)
        v = np.arange(H, dtype=float)
        theta, phi = equirect_direction(u[None, :], v[:, None], W, H,
                                        pano.alpha_v)
        theta = np.broadcast_to(theta, (H, W))
        phi = np.broadcast_to(phi, (H, W))

        support = np.zeros((K, H, W), dtype=bool)
        vfit = np.zeros((K, H, W), dtype=bool)
        w_azim = np.zeros((K, H, W))
        cx = np.zeros((K, H, W))
        cy = np.zeros((K, H, W))
        for k, yaw in enumerate(rig.yaws):
            dt = _wrap_angle(theta - yaw)
            sup = np.abs(dt) < rig.fov / 2.0
            support[k] = sup
            w_azim[k] = np.where(sup, np.cos(np.pi * dt / rig.fov) ** 2, 0.0)
            with np.errstate(invalid="ignore"):
                cxk = f * np.tan(dt) + W0 / 2.0
                cyk = f * np.sin(phi) / (np.cos(phi) * np.cos(dt)) + H0 / 2.0
            cx[k] = np.where(sup, cxk, 0.0)
            cy[k] = np.where(sup, cyk, 0.0)
            vfit[k] = sup & (cy[k] >= 0.0) & (cy[k] <= H0 - 1.0)

        if not support.any(axis=0).all():
            raise ConfigError(
                "panorama bearing not covered by any camera; the rig FOVs "
                "must jointly span 360 degrees")

        # prefer cameras whose vertical sample is inside the image; pixels
        # none cover fall back to border-clamped sampling and are flagged
        any_fit = vfit.any(axis=0)
        use = np.where(any_fit[None], vfit, support)
        self.clamped = ~any_fit
        w = np.where(use, w_azim, 0.0)
        wsum = w.sum(axis=0)
        self.wn = w / wsum[None]

        cx = np.clip(cx, 0.0, W0 - 1.0)
        cy = np.clip(cy, 0.0, H0 - 1.0)
        x0 = np.clip(np.floor(cx).astype(np.int64), 0, max(W0 - 2, 0))
        y0 = np.clip(np.floor(cy).astype(np.int64), 0, max(H0 - 2, 0))
        self.x0, self.y0 = x0, y0
        self.fx = np.clip(cx - x0, 0.0, 1.0)
        self.fy = np.clip(cy - y0, 0.0, 1.0)
        self.alpha_v = pano.alpha_v
        self.shape = (K, H, W)
        self.cam_shape = (H0, W0)

        # compact per-pixel form: with cardinal 100-degree cameras at most
        # two weights are nonzero, so sampling only those halves the gathers
        self.n_active = int((self.wn > 0).sum(axis=0).max(initial=1))
        if self.n_active <= 2:
            order = np.argsort(-self.wn, axis=0)[:2]          # (2, H, W)
            self.c_k = order
            self.c_w = np.take_along_axis(self.wn, order, axis=0)
            self.c_x0 = np.take_along_axis(x0, order, axis=0)
            self.c_y0 = np.take_along_axis(y0, order, axis=0)
            self.c_fx = np.take_along_axis(self.fx, order, axis=0)
            self.c_fy = np.take_along_axis(self.fy, order, axis=0)
        else:
            self.c_k = None

    def sample(self, images):
        """Blend (K, H0, W0) camera images into an (H, W) panorama."""
        images = np.asarray(images)
        if images.shape != (self.shape[0],) + self.cam_shape:
            raise ConfigError(
                f"stitch expects images of shape "
                f"{(self.shape[0],) + self.cam_shape}, got {images.shape}")
        return self.sample_batch(images[None])[0]

    def sample_batch(self, images):
        """Blend (N, K, H0, W0) image stacks into (N, H, W) panoramas."""
        images = np.asarray(images)
        if images.shape[1:] != (self.shape[0],) + self.cam_shape:
            raise ConfigError(
                f"stitch expects image stacks of shape "
                f"(N, {self.shape[0]}, {self.cam_shape[0]}, "
                f"{self.cam_shape[1]}), got {images.shape}")
        if self.c_k is not None:
            k_idx, x0, y0 = self.c_k, self.c_x0, self.c_y0
            fx, fy, wgt = self.c_fx, self.c_fy, self.c_w[None]
        else:
            k_idx = np.arange(self.shape[0])[:, None, None]
            x0, y0, fx, fy = self.x0, self.y0, self.fx, self.fy
            wgt = self.wn[None]
        i00 = images[:, k_idx, y0, x0]
        i01 = images[:, k_idx, y0, x0 + 1]
        i10 = images[:, k_idx, y0 + 1, x0]
        i11 = images[:, k_idx, y0 + 1, x0 + 1]
        samp = (i00 * (1 - fy) * (1 - fx) + i01 * (1 - fy) * fx
                + i10 * fy * (1 - fx) + i11 * fy * fx)
        return (wgt * samp).sum(axis=1)


def get_stitch_table(rig, pano):
    key = (rig.key(), pano.key())
    if key not in _STITCH_CACHE:
        _STITCH_CACHE[key] = StitchTable(rig, pano)
    return _STITCH_CACHE[key]


def stitch(images, rig, pano):
    """Blend per-camera depth images into an equirectangular PanoramaFrame."""
    table = get_stitch_table(rig, pano)
    return PanoramaFrame(depth=table.sample(images), alpha_v=pano.alpha_v,
                         clamped=table.clamped.copy())


def apply_camera_failure(images, failed, fill=D_RENDER_MAX):
    """Overwrite failed cameras (names or indices) with a constant reading."""
    images = np.array(images)
    for f in failed:
        k = CAMERA_NAMES[f] if isinstance(f, str) else int(f)
        images[k] = fill
    return images


# ---------------------------------------------------------------------------
# preprocessing


def inverse_depth(d, cfg):
    """beta / clamp(d) - gamma; strictly decreasing, ~[0, 1] over the range."""
    return cfg.beta / np.clip(d, cfg.d_min, cfg.d_max) - cfg.gamma


def preprocess(depth, cfg, rng=None, dtype=np.float64):
    """Network input: MaxPool(inverse_depth(depth) + noise).

    depth: (H, W) or (B, H, W); returns the pooled array with a leading
    batch axis preserved.  Deterministic when cfg.noise_std == 0 or rng is
    None.
    """
    d = np.asarray(depth, dtype=np.float64)
    squeeze = d.ndim == 2
    if squeeze:
        d = d[None]
    x = inverse_depth(d, cfg)
    if cfg.noise_std > 0 and rng is not None:
        x = x + rng.normal(0.0, cfg.noise_std, size=x.shape)
    k = cfg.pool
    if k > 1:
        b, h, w = x.shape
        if h % k or w % k:
            raise ConfigError(f"pool {k} does not divide panorama {h}x{w}")
        x = x.reshape(b, h // k, k, w // k, k).max(axis=(2, 4))
    x = x.astype(dtype)
    return x[0] if squeeze else x


# ---------------------------------------------------------------------------
# image dumps


def save_depth_png(path, depth, meta=None):
    """16-bit grayscale, millimeter-quantized, with a sidecar text header."""
    mm = np.clip(np.round(np.asarray(depth) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm, mode="I;16").save(path)
    lines = [f"height {mm.shape[0]}", f"width {mm.shape[1]}",
             "units millimeters"]
    for key, val in (meta or {}).items():
        lines.append(f"{key} {val}")
    with open(str(path) + ".txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_depth_png(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0
