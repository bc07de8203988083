"""Deterministic synthetic inspection bench.

Renders a textured disk-shaped object under a discrete set of in-plane poses
with directional illumination, optional specular glare, an optional occluding
sector, and sensor noise. The pixel model is

    image = clip(reflectance(pose) * illumination + glare, 0, 1) * occluder + noise

so the multiplicative decomposition holds exactly whenever glare, occluder and
noise are off. Ground-truth illumination and defect masks are recorded with
every render, which lets the photometric stage be scored directly.

Glare is keyed to the pose: its center sits at image angle 2*(pose - azimuth),
so re-orienting the object slides the highlight across the surface. That is
what makes "hard" cases solvable by moving: a defect hidden under glare at the
initial pose is clear of it at some other pose, certified by an exhaustive
sweep at generation time.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import read_tensors, write_tensors
from .rng import substream

K_POSES = 12
IMAGE_SIZE = 32
OBJECT_RADIUS = 13.5
BACKGROUND = 0.25        # mat albedo; bright enough that mat pixels reveal the light field over sensor noise
INTERIOR_ALBEDO = 0.56   # mean object albedo, midpoint of the base-level draw below
NOISE_SIGMA = 0.01
HIDE_THRESHOLD = 0.5   # glare intensity above which a defect pixel counts as hidden
HIDDEN_FRAC = 0.80     # fraction of mask pixels that must be hidden at the initial pose
EXPOSED_FRAC = 0.10    # some pose must have less mask-glare overlap than this


@dataclass(frozen=True)
class Pose:
    index: int
    count: int = K_POSES

    def __post_init__(self):
        if not 0 <= self.index < self.count:
            raise ValueError(f"pose index {self.index} outside 0..{self.count - 1}")

    @property
    def angle(self) -> float:
        return 2.0 * math.pi * self.index / self.count


@dataclass(frozen=True)
class Defect:
    cx: float          # pose-0 center, image coordinates
    cy: float
    radius: float      # px, 1..3
    contrast: float    # reflectance drop inside the disk, 0.15..0.4


@dataclass(frozen=True)
class SceneState:
    object_id: int
    seed: int
    base_level: float
    stripe_freq: float
    stripe_angle: float
    stripe_phase: float
    stripe_amp: float
    blobs: tuple            # (dx, dy, sigma, amp) per blob, relative to center
    defect: Optional[Defect]

    @property
    def defect_mask(self) -> np.ndarray:
        """Ground-truth mask at pose 0."""
        return _defect_mask(self.defect, Pose(0))


@dataclass(frozen=True)
class Condition:
    light_azimuth: float
    gain: float
    glare_enabled: bool = False
    glare_intensity: float = 0.5
    glare_sigma: float = 3.0
    glare_dist: float = 6.0
    occluder_enabled: bool = False
    occluder_start: float = 0.0
    occluder_span: float = 0.8
    noise_sigma: float = NOISE_SIGMA
    noise_seed: int = 0


@dataclass
class Observation:
    image: np.ndarray
    illumination_field: np.ndarray
    defect_mask: np.ndarray
    pose: Pose
    scene: SceneState
    condition: Condition


def albedo_prior(size: int = IMAGE_SIZE) -> np.ndarray:
    """Design albedo map of the rig: mat outside the object, mean base inside.

    A calibration constant of the bench (not per-image ground truth); the
    photometric warm-up divides observed brightness by it to get a noisy but
    unbiased illumination target.
    """
    _, _, r, _, _ = _grid(size)
    edge = np.clip((OBJECT_RADIUS - r) / 1.5 + 0.5, 0.0, 1.0)
    return (BACKGROUND + (INTERIOR_ALBEDO - BACKGROUND) * edge).astype(np.float32)


_GRID_CACHE: dict[int, tuple] = {}


def _grid(size: int = IMAGE_SIZE):
    if size not in _GRID_CACHE:
        c = (size - 1) / 2.0
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
        u = xs - c
        v = ys - c
        _GRID_CACHE[size] = (u, v, np.hypot(u, v), np.arctan2(v, u), c)
    return _GRID_CACHE[size]


def sample_scene(seed: int, with_defect: bool) -> SceneState:
    """Deterministic procedural object; same seed always gives the same scene."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & 0x7FFFFFFF, spawn_key=(zlib.crc32(b"scene"),)))
    # Texture energy sits above the stripe period so short-range averages of
    # the surface are stable (a local estimator can tell texture from light);
    # blobs stay low-amplitude for the same reason.
    base = rng.uniform(0.52, 0.60)
    freq = rng.uniform(6.0, 10.0)
    angle = rng.uniform(0.0, math.pi)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    amp = rng.uniform(0.06, 0.12)
    blobs = []
    for _ in range(rng.integers(2, 4)):
        br = 9.0 * math.sqrt(rng.uniform())
        ba = rng.uniform(0.0, 2.0 * math.pi)
        blobs.append((br * math.cos(ba), br * math.sin(ba), rng.uniform(2.5, 4.0), rng.uniform(-0.045, 0.045)))
    defect = None
    if with_defect:
        dr = math.sqrt(rng.uniform(0.09, 1.0)) * 10.0  # area-uniform over 3..10 px from center
        da = rng.uniform(0.0, 2.0 * math.pi)
        c = (IMAGE_SIZE - 1) / 2.0
        defect = Defect(
            cx=c + dr * math.cos(da),
            cy=c + dr * math.sin(da),
            radius=rng.uniform(1.0, 3.0),
            contrast=rng.uniform(0.15, 0.40),
        )
    return SceneState(
        object_id=int(seed),
        seed=int(seed),
        base_level=base,
        stripe_freq=freq,
        stripe_angle=angle,
        stripe_phase=phase,
        stripe_amp=amp,
        blobs=tuple(blobs),
        defect=defect,
    )


def _base_reflectance(s: SceneState, size: int = IMAGE_SIZE) -> np.ndarray:
    """Pose-0 reflectance, defect not painted."""
    u, v, r, _, _ = _grid(size)
    d = (u * math.cos(s.stripe_angle) + v * math.sin(s.stripe_angle)) / size
    tex = s.base_level + s.stripe_amp * np.sin(2.0 * math.pi * s.stripe_freq * d + s.stripe_phase)
    for bx, by, sigma, amp in s.blobs:
        tex = tex + amp * np.exp(-((u - bx) ** 2 + (v - by) ** 2) / (2.0 * sigma * sigma))
    tex = np.clip(tex, 0.20, 0.95)
    edge = np.clip((OBJECT_RADIUS - r) / 1.5 + 0.5, 0.0, 1.0)
    return BACKGROUND + (tex - BACKGROUND) * edge


def _rotate_bilinear(img: np.ndarray, angle: float, fill: float) -> np.ndarray:
    """Rotate `img` by `angle` about its center with bilinear resampling."""
    if angle == 0.0:
        return img.copy()
    size = img.shape[0]
    u, v, _, _, c = _grid(size)
    ca, sa = math.cos(angle), math.sin(angle)
    xs = ca * u + sa * v + c    # inverse rotation of output coords
    ys = -sa * u + ca * v + c
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.full_like(img, fill)
    valid = (x0 >= 0) & (x0 < size - 1) & (y0 >= 0) & (y0 < size - 1)
    x0v, y0v = x0[valid], y0[valid]
    fxv, fyv = fx[valid], fy[valid]
    out[valid] = (
        img[y0v, x0v] * (1 - fxv) * (1 - fyv)
        + img[y0v, x0v + 1] * fxv * (1 - fyv)
        + img[y0v + 1, x0v] * (1 - fxv) * fyv
        + img[y0v + 1, x0v + 1] * fxv * fyv
    )
    return out


def _rotated_defect_center(defect: Defect, pose: Pose, size: int = IMAGE_SIZE) -> tuple[float, float]:
    c = (size - 1) / 2.0
    ca, sa = math.cos(pose.angle), math.sin(pose.angle)
    dx, dy = defect.cx - c, defect.cy - c
    return c + ca * dx - sa * dy, c + sa * dx + ca * dy


def _defect_mask(defect: Optional[Defect], pose: Pose, size: int = IMAGE_SIZE) -> np.ndarray:
    if defect is None:
        return np.zeros((size, size), dtype=bool)
    gx, gy = _rotated_defect_center(defect, pose, size)
    ys, xs = np.mgrid[0:size, 0:size]
    return (xs - gx) ** 2 + (ys - gy) ** 2 <= defect.radius**2


def illumination_field(pose: Pose, c: Condition, size: int = IMAGE_SIZE) -> np.ndarray:
    """Directional multiplicative light: gain * (0.6 + 0.4 * alignment).

    `alignment` is the radial projection of each pixel direction onto the
    light azimuth, cos(theta - azimuth) scaled by normalized radius: a linear
    ramp from the dark rim to the lit rim, smooth through the center.
    """
    u, v, _, _, ctr = _grid(size)
    align = (u * math.cos(c.light_azimuth) + v * math.sin(c.light_azimuth)) / ctr
    return c.gain * (0.6 + 0.4 * np.clip(align, -1.0, 1.0))


GLARE_WOBBLE = 0.8   # radians of swing around the lit direction
GLARE_PHASE = 0.7


def glare_visibility(pose: Pose, c: Condition) -> float:
    """How strongly the highlight reflects toward the camera at this pose.

    Zero on half the orientation circle: like a real specular reflection,
    the highlight exists only when the surface normal lines up, which is
    what makes re-orientation able to remove it entirely.
    """
    return max(0.0, math.cos(pose.angle - c.light_azimuth + GLARE_PHASE))


def glare_field(pose: Pose, c: Condition, size: int = IMAGE_SIZE) -> np.ndarray:
    """Additive highlight riding the lit side, sliding as the pose turns.

    The center sits at angle azimuth + wobble*sin(pose - azimuth + phase):
    a specular reflection stays near the light direction but the reflecting
    surface point changes with orientation, so re-posing moves the highlight
    across the object (and on or off a defect). Its strength is scaled by
    the pose-dependent visibility.
    """
    if not c.glare_enabled:
        return np.zeros((size, size), dtype=np.float64)
    vis = glare_visibility(pose, c)
    if vis == 0.0:
        return np.zeros((size, size), dtype=np.float64)
    u, v, _, _, ctr = _grid(size)
    gamma = c.light_azimuth + GLARE_WOBBLE * math.sin(pose.angle - c.light_azimuth + GLARE_PHASE)
    gx = c.glare_dist * math.cos(gamma)
    gy = c.glare_dist * math.sin(gamma)
    return vis * c.glare_intensity * np.exp(-((u - gx) ** 2 + (v - gy) ** 2) / (2.0 * c.glare_sigma**2))


def _occluder_mask(c: Condition, size: int = IMAGE_SIZE) -> np.ndarray:
    """True on pixels zeroed by the occluding sector (static in image coords)."""
    if not c.occluder_enabled:
        return np.zeros((size, size), dtype=bool)
    _, _, _, theta, _ = _grid(size)
    rel = np.mod(theta - c.occluder_start, 2.0 * math.pi)
    return rel <= c.occluder_span


def render(s: SceneState, p: Pose, c: Condition, size: int = IMAGE_SIZE) -> Observation:
    base = _base_reflectance(s, size)
    refl = _rotate_bilinear(base, p.angle, fill=BACKGROUND)
    mask = _defect_mask(s.defect, p, size)
    if s.defect is not None:
        refl = np.where(mask, np.clip(refl - s.defect.contrast, 0.02, 1.0), refl)

    light = illumination_field(p, c, size)
    img = refl * light + glare_field(p, c, size)
    img = np.clip(img, 0.0, 1.0)
    if c.occluder_enabled:
        img = img * ~_occluder_mask(c, size)
    if c.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=int(c.noise_seed) & 0x7FFFFFFF, spawn_key=(p.index,)))
        img = np.clip(img + rng.normal(0.0, c.noise_sigma, size=img.shape), 0.0, 1.0)

    return Observation(
        image=img.astype(np.float32),
        illumination_field=light.astype(np.float32),
        defect_mask=mask,
        pose=p,
        scene=s,
        condition=c,
    )


# -- dataset generation ---------------------------------------------------------


def sample_condition(item_seed: int, hard: bool) -> Condition:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(item_seed) & 0x7FFFFFFF, spawn_key=(zlib.crc32(b"cond"),)))
    return draw_condition(rng, hard)


# The static splits stay glare-free, matching a controlled inspection
# protocol; glare enters through training augmentation (where the model
# must learn it as nuisance) and through the hard split (strong, saturating,
# the adversarial regime the active loop is for).
STANDARD_GLARE_RATE = 0.0
TRAIN_GLARE_RATE = 0.50
STRONG_GLARE_FRACTION = 0.50  # share of augmentation glare drawn at hard-case strength
OCCLUDER_RATE = 0.0           # occluders stay available to the renderer and the API


def draw_condition(rng: np.random.Generator, hard: bool, glare_rate: float = STANDARD_GLARE_RATE) -> Condition:
    """Draw a condition from the bench distribution using the given stream."""
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    gain = rng.uniform(0.5, 1.0)
    noise_seed = int(rng.integers(0, 2**31 - 1))
    if hard:
        # Oversized, saturating highlight at full strength regardless of the
        # source gain; reconstruction error rises wherever it lands.
        return Condition(
            light_azimuth=azimuth,
            gain=gain,
            glare_enabled=True,
            glare_intensity=rng.uniform(0.9, 1.3),
            glare_sigma=rng.uniform(3.5, 5.0),
            glare_dist=6.0,  # overwritten to track the defect ring
            noise_seed=noise_seed,
        )
    glare = rng.uniform() < glare_rate
    if rng.uniform() < STRONG_GLARE_FRACTION:
        # Same family as the hard split: saturating and wide.
        g_int = rng.uniform(0.8, 1.3)
        g_sig = rng.uniform(3.5, 5.0)
        g_dist = rng.uniform(4.0, 10.0)
    else:
        # Reflected source light scales with the source: after photometric
        # normalization the highlight has a stable, learnable magnitude.
        g_int = gain * rng.uniform(0.25, 0.50)
        g_sig = rng.uniform(2.0, 3.5)
        g_dist = rng.uniform(4.0, 8.0)
    occ = rng.uniform() < OCCLUDER_RATE
    o_start = rng.uniform(0.0, 2.0 * math.pi)
    o_span = rng.uniform(math.radians(25), math.radians(60))
    return Condition(
        light_azimuth=azimuth,
        gain=gain,
        glare_enabled=glare,
        glare_intensity=g_int,
        glare_sigma=g_sig,
        glare_dist=g_dist,
        occluder_enabled=occ,
        occluder_start=o_start,
        occluder_span=o_span,
        noise_seed=noise_seed,
    )


def draw_pair_condition(rng: np.random.Generator) -> Condition:
    """Clean illumination redraw for invariance pairs: new light, no nuisances.

    Keeping glare and occluder out of the pair views makes the latent
    mismatch attributable to illumination and pose alone, which is the
    signal the invariance penalty is meant to squeeze out.
    """
    return Condition(
        light_azimuth=rng.uniform(0.0, 2.0 * math.pi),
        gain=rng.uniform(0.5, 1.0),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def _overlap_fraction(s: SceneState, p: Pose, c: Condition, size: int = IMAGE_SIZE) -> float:
    """Fraction of defect-mask pixels sitting under glare brighter than 0.5."""
    mask = _defect_mask(s.defect, p, size)
    if not mask.any():
        return 0.0
    g = glare_field(p, c, size)
    return float(np.mean(g[mask] > HIDE_THRESHOLD))


def certify_hard_case(s: SceneState, c: Condition) -> list[float]:
    """Mask-glare overlap at every pose; the stored, re-checkable certificate."""
    return [_overlap_fraction(s, Pose(k), c) for k in range(K_POSES)]


def _defect_contrast_gone(s: SceneState, p: Pose, c: Condition, frac: float = 0.85) -> bool:
    """True when the defect's rendered contrast vanishes (saturated over)."""
    twin = dataclasses.replace(s, defect=None)
    with_d = render(s, p, c).image
    without = render(twin, p, c).image
    mask = _defect_mask(s.defect, p)
    return bool(np.mean(np.abs(with_d[mask] - without[mask]) < 0.02) >= frac)


def generate_hard_case(item_seed: int, max_attempts: int = 200):
    """Defect hidden under strong glare at the initial pose, exposed elsewhere.

    Hiding is checked photometrically (the defect's pixel contrast must be
    clipped away, verified against a defect-free twin render), on top of the
    mask-glare overlap certificate swept over every pose.

    Returns (scene, initial pose, condition, per-pose overlap certificate).
    """
    for attempt in range(max_attempts):
        sub = int(item_seed) ^ (attempt * 0x9E3779B1 & 0x7FFFFFFF)
        s = sample_scene(sub, with_defect=True)
        c = sample_condition(sub, hard=True)
        if s.defect is None:
            continue
        ctr = (IMAGE_SIZE - 1) / 2.0
        r_d = math.hypot(s.defect.cx - ctr, s.defect.cy - ctr)
        if r_d < 5.0:
            continue
        c = dataclasses.replace(c, glare_dist=r_d)
        cert = certify_hard_case(s, c)
        k0 = int(np.argmax(cert))
        if cert[k0] >= HIDDEN_FRAC and min(cert) < EXPOSED_FRAC and _defect_contrast_gone(s, Pose(k0), c):
            return s, Pose(k0), c, cert
    raise RuntimeError(f"no valid hard case found for seed {item_seed}")


@dataclass
class DatasetItem:
    id: str
    split: str
    seed: int
    pose: int
    scene: SceneState
    condition: Condition
    observation: Observation
    certificate: Optional[list[float]] = None


@dataclass
class DatasetConfig:
    train_normal: int = 200
    test_normal: int = 50
    test_defect: int = 50
    hard_cases: int = 50

    def validate(self):
        for name in ("train_normal", "test_normal", "test_defect", "hard_cases"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def regenerate_item(item_seed: int, split: str) -> tuple[SceneState, Pose, Condition, Optional[list[float]]]:
    """Rebuild scene/pose/condition from a manifest row; pure function of the seed."""
    if split == "hard":
        s, p, c, cert = generate_hard_case(item_seed)
        return s, p, c, cert
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(item_seed) & 0x7FFFFFFF, spawn_key=(zlib.crc32(b"pose"),)))
    pose = Pose(int(rng.integers(0, K_POSES)))
    with_defect = split == "test_defect"
    s = sample_scene(item_seed, with_defect=with_defect)
    c = sample_condition(item_seed, hard=False)
    return s, pose, c, None


def make_dataset(cfg: DatasetConfig, seed: int) -> list[DatasetItem]:
    cfg.validate()
    rng = substream(seed, "sim")
    items: list[DatasetItem] = []
    plan = [
        ("train", "train_normal", cfg.train_normal),
        ("test_normal", "test_normal", cfg.test_normal),
        ("test_defect", "test_defect", cfg.test_defect),
        ("hard", "hard", cfg.hard_cases),
    ]
    for split, _, count in plan:
        for i in range(count):
            item_seed = int(rng.integers(0, 2**31 - 1))
            s, pose, cond, cert = regenerate_item(item_seed, split)
            obs = render(s, pose, cond)
            items.append(
                DatasetItem(
                    id=f"{split}_{i:04d}",
                    split=split,
                    seed=item_seed,
                    pose=pose.index,
                    scene=s,
                    condition=cond,
                    observation=obs,
                    certificate=cert,
                )
            )
    return items


MANIFEST_FIELDS = ["id", "split", "seed", "pose", "defect", "defect_cx", "defect_cy", "defect_r", "glare", "occluder"]


def save_dataset(items: list[DatasetItem], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for it in items:
            d = it.scene.defect
            writer.writerow(
                [
                    it.id,
                    it.split,
                    it.seed,
                    it.pose,
                    int(d is not None),
                    f"{d.cx:.4f}" if d else "",
                    f"{d.cy:.4f}" if d else "",
                    f"{d.radius:.4f}" if d else "",
                    int(it.condition.glare_enabled),
                    int(it.condition.occluder_enabled),
                ]
            )
    tensors = {}
    for it in items:
        tensors[f"obs.{it.id}.image"] = it.observation.image
        tensors[f"obs.{it.id}.light"] = it.observation.illumination_field
        tensors[f"obs.{it.id}.mask"] = it.observation.defect_mask.astype(np.float32)
    write_tensors(out_dir / "observations.pico", tensors, {"items": len(items)})

    hard = [it for it in items if it.certificate is not None]
    if hard:
        with open(out_dir / "certificates.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "initial_pose"] + [f"overlap_{k}" for k in range(K_POSES)])
            for it in hard:
                writer.writerow([it.id, it.pose] + [f"{o:.6f}" for o in it.certificate])


class Dataset:
    """Manifest-backed view of a generated dataset directory."""

    def __init__(self, rows: list[dict], arrays: dict[str, np.ndarray], root: Path):
        self.rows = rows
        self.arrays = arrays
        self.root = root

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        with open(root / "manifest.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        arrays, _ = read_tensors(root / "observations.pico")
        return cls(rows, arrays, root)

    def split(self, *names: str) -> list[dict]:
        return [r for r in self.rows if r["split"] in names]

    def image(self, item_id: str) -> np.ndarray:
        return self.arrays[f"obs.{item_id}.image"]

    def light(self, item_id: str) -> np.ndarray:
        return self.arrays[f"obs.{item_id}.light"]

    def mask(self, item_id: str) -> np.ndarray:
        return self.arrays[f"obs.{item_id}.mask"] > 0.5

    def scene_and_condition(self, row: dict) -> tuple[SceneState, Pose, Condition]:
        s, p, c, _ = regenerate_item(int(row["seed"]), row["split"])
        return s, p, c


def write_pgm(path, arr: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    """8-bit binary PGM for quick human inspection."""
    if hi <= lo:
        hi = lo + 1.0
    scaled = np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    data = (scaled * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
