"""Procedural segmentation scenes: thin cracks, blob-shaped damage, bridge components.

Masks are exact by construction.  Image ``i`` of a dataset draws only from the
keyed stream ``(seed, task, i)``, so generation order does not matter.
"""

from dataclasses import dataclass

import numpy as np

from .rng import keyed_generator

TASKS = {"crack": 1, "damage": 2, "component": 3}
NUM_CLASSES = {"crack": 2, "damage": 2, "component": 6}
CLASS_NAMES = {
    "crack": ("background", "crack"),
    "damage": ("background", "damage"),
    "component": ("background", "superstructure", "column", "cap beam", "foundation", "abutment"),
}
MAX_RETRIES = 50
# dataset-level pixel frequency of each non-background class at the default
# 64x96 size: every seed is expected to land inside these (lo, hi) bands
FREQUENCY_BANDS = {
    "crack": {1: (0.015, 0.024)},
    "damage": {1: (0.06, 0.2)},
    "component": {1: (0.08, 0.15), 2: (0.015, 0.05), 3: (0.01, 0.035), 4: (0.005, 0.03), 5: (0.01, 0.03)},
}


class GenerationError(RuntimeError):
    """An imbalance target could not be met within the retry budget."""


@dataclass(frozen=True)
class SceneSpec:
    task: str = "crack"
    width: int = 96
    height: int = 64
    count: int = 60
    seed: int = 0
    crack_fraction: tuple = (0.005, 0.025)
    rare_fraction_max: float = 0.03

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {sorted(TASKS)}, got {self.task!r}")
        if self.width < 8 or self.height < 8:
            raise ValueError(f"scenes must be at least 8x8, got {self.width}x{self.height}")
        if self.count < 1:
            raise ValueError(f"count must be positive, got {self.count}")
        lo, hi = self.crack_fraction
        if not 0 < lo < hi < 1:
            raise ValueError(f"crack_fraction must satisfy 0 < lo < hi < 1, got {self.crack_fraction}")

    @property
    def num_classes(self):
        return NUM_CLASSES[self.task]

    def header_lines(self):
        return [f"task = {self.task}", f"width = {self.width}", f"height = {self.height}",
                f"count = {self.count}", f"seed = {self.seed}",
                f"crack_fraction = {self.crack_fraction[0]},{self.crack_fraction[1]}",
                f"rare_fraction_max = {self.rare_fraction_max}"]


# ---------------------------------------------------------------------------
# texture helpers


def _upsample(grid, h, w):
    gy = np.linspace(0, grid.shape[0] - 1, h)
    gx = np.linspace(0, grid.shape[1] - 1, w)
    y0 = np.clip(np.floor(gy).astype(int), 0, grid.shape[0] - 2)
    x0 = np.clip(np.floor(gx).astype(int), 0, grid.shape[1] - 2)
    fy, fx = (gy - y0)[:, None], (gx - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def value_noise(rng, h, w, octaves=3, base_cells=4):
    """Sum of bilinearly upsampled random grids, roughly in [-1, 1]."""
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = base_cells * 2 ** o
        grid = rng.uniform(-1, 1, size=(cells + 1, int(cells * w / h) + 2))
        out += amp * _upsample(grid, h, w)
        total += amp
        amp *= 0.5
    return out / total


def _coords(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return yy + 0.5, xx + 0.5


def convex_polygon(h, w, vertices):
    """Boolean mask of pixel centres inside a convex polygon given as (y, x) vertices."""
    yy, xx = _coords(h, w)
    v = np.asarray(vertices, dtype=np.float64)
    area = 0.5 * np.sum(v[:, 1] * np.roll(v[:, 0], -1) - np.roll(v[:, 1], -1) * v[:, 0])
    sign = 1.0 if area >= 0 else -1.0
    inside = np.ones((h, w), dtype=bool)
    for (y0, x0), (y1, x1) in zip(v, np.roll(v, -1, axis=0)):
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        inside &= sign * cross >= 0
    return inside


def irregular_blob(rng, h, w, cy, cx, ry, rx, roughness=0.25):
    """Ellipse whose radius is modulated by a few random harmonics."""
    yy, xx = _coords(h, w)
    dy, dx = (yy - cy) / ry, (xx - cx) / rx
    theta = np.arctan2(dy, dx)
    radius = np.ones_like(theta)
    for k in range(2, 6):
        radius += roughness / k * rng.uniform(-1, 1) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return np.hypot(dy, dx) <= radius


# ---------------------------------------------------------------------------
# crack scenes


def _crack_walk(rng, h, w, mask):
    y, x = rng.uniform(0, h), rng.uniform(0, w)
    angle = rng.uniform(0, 2 * np.pi)
    length = int(rng.integers(min(h, w) // 2, max(h, w)))
    wide = rng.random() < 0.4
    for _ in range(length):
        angle += rng.normal(0, 0.25)
        y += np.sin(angle)
        x += np.cos(angle)
        if not (0 <= y < h and 0 <= x < w):
            break
        r, c = int(y), int(x)
        mask[r, c] = True
        if wide:
            if abs(np.cos(angle)) > abs(np.sin(angle)):
                mask[min(r + 1, h - 1), c] = True
            else:
                mask[r, min(c + 1, w - 1)] = True


def _surface(rng, h, w, base, amp=0.12, grain=0.035):
    tex = value_noise(rng, h, w, octaves=3, base_cells=3)
    tint = np.asarray(base)[None, None, :] * (1 + 0.08 * rng.uniform(-1, 1, size=3))
    img = tint + amp * tex[..., None] + grain * rng.standard_normal((h, w, 3))
    return img


def crack_scene(rng, h, w, fraction=(0.005, 0.025)):
    lo, hi = fraction
    target = rng.uniform(lo + 0.3 * (hi - lo), lo + 0.65 * (hi - lo))
    for _ in range(MAX_RETRIES):
        mask = np.zeros((h, w), dtype=bool)
        while mask.mean() < target:
            _crack_walk(rng, h, w, mask)
        if lo <= mask.mean() <= hi:
            break
    else:
        raise GenerationError(f"crack fraction {mask.mean():.4f} outside [{lo}, {hi}] after {MAX_RETRIES} retries")
    img = _surface(rng, h, w, (0.52, 0.5, 0.47), amp=0.16, grain=0.05)
    # stains: dark low-contrast blobs that are not cracks
    for _ in range(int(rng.integers(2, 6))):
        stain = irregular_blob(rng, h, w, rng.uniform(0, h), rng.uniform(0, w),
                               rng.uniform(1.5, 6), rng.uniform(1.5, 9), roughness=0.6)
        img[stain] *= rng.uniform(0.65, 0.88)
    darkness = rng.uniform(0.62, 0.85)
    img[mask] = img[mask] * darkness + 0.03 * rng.standard_normal((int(mask.sum()), 3))
    return np.clip(img, 0, 1).astype(np.float32), mask.astype(np.int64)


# ---------------------------------------------------------------------------
# damage scenes


def damage_scene(rng, h, w):
    img = _surface(rng, h, w, (0.58, 0.57, 0.54), amp=0.14, grain=0.05)
    # clutter: instrument-like bars and wires
    for _ in range(int(rng.integers(1, 4))):
        y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
        dy, dx = rng.uniform(-h / 2, h / 2), rng.uniform(-w / 3, w / 3)
        t = rng.uniform(1.0, 2.5)
        n = np.hypot(dy, dx) + 1e-9
        oy, ox = -dx / n * t, dy / n * t
        bar = convex_polygon(h, w, [(y0, x0), (y0 + dy, x0 + dx), (y0 + dy + oy, x0 + dx + ox), (y0 + oy, x0 + ox)])
        img[bar] = np.asarray([0.3, 0.3, 0.33]) * rng.uniform(0.7, 1.3)
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        mask |= irregular_blob(rng, h, w, rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.15 * w, 0.85 * w),
                               rng.uniform(0.08 * h, 0.25 * h), rng.uniform(0.06 * w, 0.2 * w), roughness=0.45)
    rough = value_noise(rng, h, w, octaves=2, base_cells=8)
    spall = np.asarray([0.53, 0.49, 0.45]) * rng.uniform(0.85, 1.1)
    dmg = spall + 0.14 * rough[..., None] + 0.07 * rng.standard_normal((h, w, 3))
    # partial blending: damage fades into the surrounding surface
    blend = np.clip(0.75 + 0.35 * value_noise(rng, h, w, 2, 4), 0.45, 1.0)[..., None]
    img = np.where(mask[..., None], blend * dmg + (1 - blend) * img, img)
    # weathering patches look like damage but are unlabeled
    for _ in range(int(rng.integers(1, 4))):
        patch = irregular_blob(rng, h, w, rng.uniform(0, h), rng.uniform(0, w),
                               rng.uniform(3, 9), rng.uniform(3, 12), roughness=0.4) & ~mask
        mix = rng.uniform(0.35, 0.7)
        img[patch] = img[patch] * (1 - mix) + dmg[patch] * mix
    # uneven lighting
    yy, xx = np.mgrid[0:h, 0:w]
    light = 1 + rng.uniform(-0.2, 0.2) * (yy / h - 0.5) + rng.uniform(-0.2, 0.2) * (xx / w - 0.5)
    img = img * light[..., None]
    return np.clip(img, 0, 1).astype(np.float32), mask.astype(np.int64)


# ---------------------------------------------------------------------------
# bridge component scenes


def _quad(y0, y1, x0, x1, skew=0.0):
    return [(y0, x0 + skew), (y0, x1 + skew), (y1, x1), (y1, x0)]


def component_scene(rng, h, w, rare_max=0.03):
    for _ in range(MAX_RETRIES):
        labels = np.zeros((h, w), dtype=np.int64)
        horizon = rng.uniform(0.62, 0.8) * h
        deck_top = rng.uniform(0.08, 0.22) * h
        deck_bot = deck_top + rng.uniform(0.08, 0.14) * h
        tilt = rng.uniform(-0.06, 0.06) * h
        deck = convex_polygon(h, w, [(deck_top, -1), (deck_top + tilt, w + 1),
                                     (deck_bot + tilt, w + 1), (deck_bot, -1)])
        cap_h = rng.uniform(0.05, 0.08) * h
        n_cols = int(rng.integers(1, 4))
        centres = np.sort(rng.uniform(0.2 * w, 0.8 * w, size=n_cols))
        col_w = rng.uniform(0.04, 0.07) * w
        found_h = rng.uniform(0.03, 0.06) * h
        for cx in centres:
            slope_y = deck_bot + tilt * cx / w
            cap = convex_polygon(h, w, _quad(slope_y, slope_y + cap_h, cx - 2.2 * col_w, cx + 2.2 * col_w))
            col = convex_polygon(h, w, _quad(slope_y + cap_h, horizon, cx - col_w / 2, cx + col_w / 2))
            fnd = convex_polygon(h, w, _quad(horizon - found_h, horizon + found_h * 0.5,
                                             cx - 1.1 * col_w, cx + 1.1 * col_w))
            labels[col] = 2
            labels[cap] = 3
            labels[fnd] = 4
        side = rng.integers(0, 2)
        ab_w = rng.uniform(0.03, 0.06) * w
        ab_top = deck_bot + (tilt if side else 0)
        x0, x1 = (w - ab_w, w + 1) if side else (-1, ab_w)
        abut = convex_polygon(h, w, [(ab_top, x0), (ab_top, x1), (horizon, x1 + (ab_w if not side else 0)),
                                     (horizon, x0 - (ab_w if side else 0))])
        labels[abut] = 5
        labels[deck] = 1
        fracs = np.bincount(labels.ravel(), minlength=6) / labels.size
        if fracs[4] <= rare_max and fracs[5] <= rare_max and fracs[4] > 0 and fracs[5] > 0:
            break
    else:
        raise GenerationError(f"rare component fractions {fracs[4]:.4f}/{fracs[5]:.4f} exceed {rare_max}")

    yy = np.arange(h)[:, None, None] / h
    sky = np.asarray([0.55, 0.7, 0.88]) * (1 - 0.25 * yy)
    ground = np.asarray([0.36, 0.42, 0.26]) + np.zeros_like(yy)
    backdrop = np.where(yy * h < horizon, sky, ground)
    backdrop = backdrop + 0.08 * value_noise(rng, h, w, 3, 3)[..., None]
    palette = {
        1: (0.5, 0.5, 0.55),
        2: (0.64, 0.62, 0.58),
        3: (0.6, 0.58, 0.56),
        4: (0.46, 0.42, 0.36),
        5: (0.56, 0.53, 0.47),
    }
    img = np.broadcast_to(backdrop, (h, w, 3)).copy()
    shade = 0.06 * value_noise(rng, h, w, 2, 6)
    for cls, colour in palette.items():
        sel = labels == cls
        jitter = rng.uniform(0.9, 1.1)
        img[sel] = np.asarray(colour) * jitter + shade[sel][:, None]
    img += 0.03 * rng.standard_normal((h, w, 3))
    return np.clip(img, 0, 1).astype(np.float32), labels


# ---------------------------------------------------------------------------


def generate_one(spec, index):
    rng = keyed_generator(spec.seed, TASKS[spec.task], index)
    if spec.task == "crack":
        return crack_scene(rng, spec.height, spec.width, spec.crack_fraction)
    if spec.task == "damage":
        return damage_scene(rng, spec.height, spec.width)
    return component_scene(rng, spec.height, spec.width, spec.rare_fraction_max)


def generate(spec):
    """``(images, masks)`` lists: float32 ``(H, W, 3)`` in [0, 1] and int64 ``(H, W)`` labels."""
    images, masks = [], []
    for i in range(spec.count):
        img, mask = generate_one(spec, i)
        images.append(img)
        masks.append(mask)
    return images, masks
