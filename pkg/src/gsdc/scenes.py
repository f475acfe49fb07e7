"""Seeded synthetic three-frame scenes and plane-sweep cost volumes.

A scene is a stack of textured fronto-parallel planes defined in the
target camera: a far wall, stepped ground bands, a few buildings, and
``n_objects`` nearer rectangles that slide sideways between frames.
Every frame is ray-cast exactly, so ground-truth depth, poses, and the
moving-object mask are known.

Layer colours encode coarse inverse depth (red/green balance, with
per-layer jitter) and moving objects carry a strong blue component; these
are the single-frame cues the pseudo cost volume can learn from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T

TEX_MARGIN = 64


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 128
    n_objects: int = 2
    motion_range: tuple = (8.0, 14.0)
    camera_translation: tuple = (0.8, 0.0, 0.0)
    depth_bins: int = 32
    d_min: float = 2.0
    d_max: float = 80.0
    object_height: tuple = (12, 22)
    object_width: tuple = (16, 34)
    color_jitter: float = 0.08

    @property
    def intrinsics(self):
        f = self.width / 2.0
        return Intrinsics(f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0)

    @property
    def mask_fraction_bounds(self):
        """Range of the dynamic-pixel fraction implied by the object sizes."""
        hw = self.height * self.width
        lo = self.object_height[0] * self.object_width[0] / hw if self.n_objects else 0.0
        hi = self.n_objects * self.object_height[1] * self.object_width[1] / hw
        return lo, min(hi, 1.0)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class Scene:
    frame_prev: np.ndarray
    frame: np.ndarray
    frame_next: np.ndarray
    depth: np.ndarray
    dyn_mask: np.ndarray
    pose_prev: np.ndarray  # target camera coords -> previous camera coords
    pose_next: np.ndarray  # target camera coords -> next camera coords
    intrinsics: Intrinsics
    objects: list = field(default_factory=list)


@dataclass
class CostVolume:
    values: object  # np.ndarray or Tensor, HxWxD
    bins: np.ndarray


class ConfigError(ValueError):
    pass


def depth_bins(n=32, d_min=2.0, d_max=80.0):
    """``n`` depths uniform in inverse depth, increasing from d_min to d_max."""
    b = 1.0 / np.linspace(1.0 / d_min, 1.0 / d_max, n)
    b[0], b[-1] = d_min, d_max
    return b


def nearest_bin(bins, depth):
    """Index of the bin closest to ``depth`` in inverse depth."""
    inv = 1.0 / np.asarray(bins)
    return np.abs(1.0 / np.asarray(depth)[..., None] - inv).argmin(-1)


def translation_pose(t):
    p = np.eye(4)
    p[:3, 3] = t
    return p


# --- scene generation ----------------------------------------------------


def _texture(rng, h, w):
    noise = ndimage.gaussian_filter(rng.random((h, w)), sigma=1.0)
    lo, hi = np.percentile(noise, [1, 99])
    return np.clip((noise - lo) / (hi - lo), 0.0, 1.0)


def _color(rng, depth, cfg, dynamic):
    inv = (1.0 / depth - 1.0 / cfg.d_max) / (1.0 / cfg.d_min - 1.0 / cfg.d_max)
    t = float(np.clip(inv + rng.normal(0.0, cfg.color_jitter), 0.0, 1.0))
    return np.array([0.2 + 0.7 * t, 0.9 - 0.7 * t, 0.85 if dynamic else 0.1])


def _layer(rng, cfg, depth, box, dynamic=False, shifts=(0.0, 0.0)):
    H, W = cfg.height, cfg.width
    return {
        "depth": float(depth),
        "box": tuple(float(b) for b in box),  # u0, u1, v0, v1 in target pixels
        "tex": _texture(rng, H + 2 * TEX_MARGIN, W + 2 * TEX_MARGIN),
        "color": _color(rng, depth, cfg, dynamic),
        "dynamic": dynamic,
        "shifts": shifts,  # horizontal displacement in (prev, next) frames
    }


def _render(layers, pose, K, shape, frame_index):
    """Ray-cast the layers into a camera with ``pose`` (target -> camera)."""
    H, W = shape
    R, t = pose[:3, :3], pose[:3, 3]
    centre = -R.T @ t
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    rays = np.stack([u, v, np.ones_like(u)], -1) @ np.linalg.inv(K).T @ R
    fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
    best = np.full((H, W), np.inf)
    img = np.zeros((H, W, 3))
    owner = np.full((H, W), -1)
    for li, L in enumerate(layers):
        Z = L["depth"]
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (Z - centre[2]) / rays[..., 2]
        px = centre[0] + lam * rays[..., 0]
        py = centre[1] + lam * rays[..., 1]
        ut = fx * px / Z + cx
        vt = fy * py / Z + cy
        if frame_index is not None:
            ut = ut - L["shifts"][frame_index]
        u0, u1, v0, v1 = L["box"]
        hit = (lam > 0) & (ut >= u0) & (ut < u1) & (vt >= v0) & (vt < v1) & (lam < best)
        if not hit.any():
            continue
        tex = ndimage.map_coordinates(
            L["tex"], [vt[hit] + TEX_MARGIN, ut[hit] + TEX_MARGIN], order=1, mode="nearest")
        img[hit] = L["color"] * (0.3 + 0.7 * tex)[:, None]
        best[hit] = lam[hit]
        owner[hit] = li
    return img, owner


def generate_scene(seed, config: SceneConfig = SceneConfig()) -> Scene:
    """Deterministic three-frame scene for ``seed``."""
    cfg = config
    rng = np.random.default_rng(seed)
    H, W = cfg.height, cfg.width
    inf = np.inf
    horizon = int(round(0.4 * H))

    layers = [_layer(rng, cfg, rng.uniform(30.0, 45.0), (-inf, inf, -inf, inf))]
    for _ in range(rng.integers(2, 4)):
        w = rng.uniform(16, 48)
        u0 = rng.uniform(-10, W)
        top = rng.uniform(0.05 * H, 0.3 * H)
        layers.append(_layer(rng, cfg, rng.uniform(10.0, 25.0), (u0, u0 + w, top, horizon)))
    edges = horizon + (H - horizon) * np.array([0.0, 0.2, 0.45, 0.7, 1.0])
    edges[1:-1] += rng.uniform(-1.5, 1.5, 3)
    edges[-1] = inf
    for k, z in enumerate((20.0, 12.0, 8.0, 5.0)):
        layers.append(_layer(rng, cfg, z * rng.uniform(0.85, 1.15), (-inf, inf, edges[k], edges[k + 1])))

    K = cfg.intrinsics.K
    ident = np.eye(4)
    _, owner = _render(layers, ident, K, (H, W), None)
    bg_depth = np.array([L["depth"] for L in layers])[owner]

    objects = []
    for _ in range(cfg.n_objects):
        h = rng.integers(cfg.object_height[0], cfg.object_height[1] + 1)
        w = rng.integers(cfg.object_width[0], cfg.object_width[1] + 1)
        bottom = rng.integers(min(horizon + 8 + h, H - 2), H - 1)
        top = max(bottom - h, 0)
        u0 = rng.integers(2, max(W - w - 2, 3))
        footprint = bg_depth[top:bottom, u0:u0 + w]
        z = max(footprint.min() * rng.uniform(0.45, 0.75), cfg.d_min + 0.5)
        mag = rng.uniform(*cfg.motion_range) if cfg.motion_range[1] > 0 else 0.0
        delta = mag * rng.choice([-1.0, 1.0])
        box = (float(u0), float(u0 + w), float(top), float(bottom))
        layers.append(_layer(rng, cfg, z, box, dynamic=True, shifts=(-delta, delta)))
        objects.append({"box": box, "depth": z, "displacement": delta})

    # nearest layers first so that equal-depth ties favour objects
    order = sorted(range(len(layers)), key=lambda i: (layers[i]["depth"], -i))
    layers = [layers[i] for i in order]

    tx = np.asarray(cfg.camera_translation, dtype=np.float64)
    pose_next = translation_pose(-tx)
    pose_prev = translation_pose(tx)
    frame, owner = _render(layers, ident, K, (H, W), None)
    frame_prev, _ = _render(layers, pose_prev, K, (H, W), 0)
    frame_next, _ = _render(layers, pose_next, K, (H, W), 1)
    depth = np.array([L["depth"] for L in layers])[owner]
    dyn = np.array([L["dynamic"] for L in layers])[owner]

    f32 = np.float32
    return Scene(
        frame_prev=frame_prev.astype(f32),
        frame=frame.astype(f32),
        frame_next=frame_next.astype(f32),
        depth=np.clip(depth, cfg.d_min, cfg.d_max)[..., None].astype(f32),
        dyn_mask=dyn[..., None].astype(f32),
        pose_prev=pose_prev,
        pose_next=pose_next,
        intrinsics=cfg.intrinsics,
        objects=objects,
    )


# --- plane sweep ---------------------------------------------------------


def warp_frame(src, depth_hyp, pose, intrinsics: Intrinsics):
    """Inverse-warp ``src`` into the target camera at constant depth.

    ``pose`` maps target camera coordinates to source camera coordinates.
    Samples outside the source frame read zero.
    """
    src = np.asarray(src)
    H, W, _ = src.shape
    K = intrinsics.K
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    pix = np.stack([u.ravel(), v.ravel(), np.ones(H * W)])
    pts = pose[:3, :3] @ (np.linalg.inv(K) @ pix * depth_hyp) + pose[:3, 3:4]
    proj = K @ pts
    xy = (proj[:2] / proj[2:3]).T
    behind = pts[2] <= 0
    xy[behind] = -1e6
    out = T.bilinear_sample(T.Tensor(src), T.Tensor(xy.astype(src.dtype))).data
    return out.reshape(H, W, -1)


def ssim(a, b, c1=0.01 ** 2, c2=0.03 ** 2):
    """Per-pixel, per-channel SSIM with 3x3 mean pooling (mirror padding)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)

    def pool(x):
        return ndimage.uniform_filter(x, size=(3, 3, 1), mode="mirror")

    mu_a, mu_b = pool(a), pool(b)
    var_a = pool(a * a) - mu_a ** 2
    var_b = pool(b * b) - mu_b ** 2
    cov = pool(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def photometric_error(target, warped, alpha=0.85):
    dssim = np.clip((1.0 - ssim(target, warped)) / 2.0, 0.0, 1.0)
    l1 = np.abs(np.asarray(target, np.float64) - warped)
    return np.clip((alpha * dssim + (1 - alpha) * l1).mean(-1), 0.0, 1.0)


def build_cost_volume(target, source, pose, intrinsics, bins, alpha=0.85):
    """HxWxD photometric cost of matching ``target`` to ``source`` per depth."""
    vol = np.stack([photometric_error(target, warp_frame(source, d, pose, intrinsics), alpha)
                    for d in bins], axis=-1)
    return CostVolume(vol.astype(np.float32), np.asarray(bins))


def concat_adjacent(cv_prev: CostVolume, cv_next: CostVolume):
    """Stack the two adjacent-frame volumes along depth, previous first."""
    if not np.array_equal(cv_prev.bins, cv_next.bins):
        raise ConfigError("adjacent cost volumes use different depth bins")
    a, b = cv_prev.values, cv_next.values
    if a.shape != b.shape:
        raise ConfigError(f"cost volume shapes differ: {a.shape} vs {b.shape}")
    if isinstance(a, T.Tensor) or isinstance(b, T.Tensor):
        return T.concat([a, b], axis=-1)
    return np.concatenate([a, b], axis=-1)


# --- pseudo cost volume --------------------------------------------------

PSEUDO_LAYERS = ((3, 16, 2), (16, 32, 2), (32, 32, 1), (32, 32, 1))


def init_pseudo_params(rng, n_bins=32):
    """Four 3x3 conv layers (two strided) and a zero-initialised 1x1 head."""
    p = {}
    for i, (cin, cout, _) in enumerate(PSEUDO_LAYERS):
        p[f"conv{i}.w"] = rng.normal(0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout))
        p[f"conv{i}.b"] = np.zeros(cout)
    p["head.w"] = np.zeros((1, 1, 32, n_bins))
    p["head.b"] = np.zeros(n_bins)
    return p


def pseudo_cost_volume(image, params, prefix="pcv."):
    """Single-frame HxWxD depth-bin scores from the micro-encoder."""
    x = T.as_tensor(image)
    for i, (_, _, stride) in enumerate(PSEUDO_LAYERS):
        x = T.relu(T.conv2d(x, params[f"{prefix}conv{i}.w"], stride=stride, pad=1)
                   + params[f"{prefix}conv{i}.b"])
    x = T.conv2d(x, params[f"{prefix}head.w"]) + params[f"{prefix}head.b"]
    return T.upsample_bilinear(x, 4)
