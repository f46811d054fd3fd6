"""Sample ingestion, patient-level splitting and synthetic phantoms.

Real data arrives as two directories of 8-bit images with matching stems: CT
slices (grayscale or 24-bit) and masks (binary, or color annotations where the
target is drawn in pure red). Everything is normalized into a sample store:

    out/
      images/<id>.png   8-bit grayscale, value = round(255 * intensity)
      masks/<id>.png    8-bit, 0 background / 255 foreground
      manifest.json
"""

import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import PairingError, ValidationError

MANIFEST_FORMAT = "dbifaunet-manifest-v1"
SHAPES = ("crescent", "ellipse", "annular-ring")
IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")

# red on OpenCV's 0-179 hue scale
HSV_LOWER = (0, 200, 200)
HSV_UPPER = (10, 255, 255)


@dataclass
class SamplePair:
    image: np.ndarray
    mask: np.ndarray
    patient_id: str
    source: str = "imported"
    sample_id: str = ""

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValidationError(f"image {self.image.shape} and mask {self.mask.shape} differ")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValidationError("mask must be binary")


@dataclass
class SplitManifest:
    train: list
    val: list
    test: list
    ratios: tuple
    seed: int

    def split(self, name):
        if name not in ("train", "val", "test"):
            raise ValidationError(f"unknown split {name!r}")
        return getattr(self, name)

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test),
                "ratios": list(self.ratios), "seed": self.seed}


@dataclass
class PhantomSpec:
    size: int = 64
    shape: str = None  # None: drawn from the seed
    lesion_mean: float = 0.65
    lesion_std: float = 0.03
    background_mean: float = 0.40
    background_std: float = 0.08
    blur_radius: float = 2.0
    noise_std: float = 0.05
    seed: int = 0
    radius: float = None  # lesion radius as a fraction of the canvas
    center: tuple = None  # (row, col) in pixels

    def __post_init__(self):
        for name in ("lesion_mean", "lesion_std", "background_mean", "background_std"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.blur_radius < 0:
            raise ValidationError(f"blur_radius must be >= 0, got {self.blur_radius}")
        if self.noise_std < 0:
            raise ValidationError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.shape is not None and self.shape not in SHAPES:
            raise ValidationError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.size < 8:
            raise ValidationError(f"size must be >= 8, got {self.size}")


# -- masks and pairing -------------------------------------------------------

def extract_mask_hsv(color_mask):
    """Binary {0,1} mask of pure-red annotation pixels in an RGB uint8 image."""
    color_mask = np.asarray(color_mask)
    if color_mask.ndim != 3 or color_mask.shape[-1] != 3:
        raise ValidationError(f"expected an (H, W, 3) color image, got shape {color_mask.shape}")
    hsv = cv2.cvtColor(color_mask.astype(np.uint8), cv2.COLOR_RGB2HSV)
    fg = cv2.inRange(hsv, HSV_LOWER, HSV_UPPER)  # 0 / 255
    return (fg > 0).astype(np.uint8)


def load_gray(path):
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.uint8)


def load_mask(path):
    img = Image.open(path)
    if img.mode in ("L", "1", "I", "I;16"):
        return (np.asarray(img) > 0).astype(np.uint8)
    rgb = np.asarray(img.convert("RGB"))
    if (rgb[..., 0] == rgb[..., 1]).all() and (rgb[..., 1] == rgb[..., 2]).all():
        return (rgb[..., 0] > 0).astype(np.uint8)
    return extract_mask_hsv(rgb)


def patient_from_stem(stem, pattern=r"^([^_]+)_"):
    m = re.match(pattern, stem)
    return m.group(1) if m else stem


def pair_and_normalize(image_path, mask_path, patient_id=None, source="imported"):
    image_path, mask_path = Path(image_path), Path(mask_path)
    if image_path.stem != mask_path.stem:
        raise PairingError(f"stem mismatch: {image_path.name} vs {mask_path.name}")
    image = load_gray(image_path).astype(np.float64) / 255.0
    mask = load_mask(mask_path)
    if image.shape != mask.shape:
        raise PairingError(f"{image_path.name}: image {image.shape} vs mask {mask.shape}")
    return SamplePair(image=image, mask=mask,
                      patient_id=patient_id or patient_from_stem(image_path.stem),
                      source=source, sample_id=image_path.stem)


def _listing(directory):
    return {p.stem: p for p in sorted(Path(directory).iterdir())
            if p.suffix.lower() in IMAGE_SUFFIXES}


def pair_directories(images_dir, masks_dir, patient_pattern=r"^([^_]+)_"):
    images, masks = _listing(images_dir), _listing(masks_dir)
    missing = sorted(set(images) ^ set(masks))
    if missing:
        raise PairingError(f"unpaired files: {', '.join(missing)}")
    return [pair_and_normalize(images[s], masks[s], patient_from_stem(s, patient_pattern))
            for s in sorted(images)]


# -- splitting ----------------------------------------------------------------

_EXHAUSTIVE_LIMIT = 10


def stratified_split(pairs, ratios=(0.8, 0.1, 0.1), seed=0):
    """Assign whole patients to train/val/test, approaching the image-count ratios.

    Up to ten patients every assignment is enumerated: the train count is
    matched first, then the total deviation; remaining ties are broken by the
    seed. Larger cohorts are assigned greedily in seeded order.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValidationError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    groups = {}
    for p in pairs:
        if not p.patient_id:
            raise ValidationError(f"sample {p.sample_id!r} has no patient id")
        groups.setdefault(p.patient_id, []).append(p.sample_id)
    patients = sorted(groups)
    sizes = np.array([len(groups[p]) for p in patients])
    active = [i for i, r in enumerate(ratios) if r > 0]
    if len(patients) < len(active):
        raise ValidationError(f"{len(patients)} patients cannot fill {len(active)} splits")
    targets = np.array(ratios) * sizes.sum()
    rng = np.random.default_rng(seed)

    if len(active) == 1:
        assign = np.full(len(patients), active[0])
    elif len(patients) <= _EXHAUSTIVE_LIMIT:
        assign = _exhaustive_assign(sizes, targets, active, rng)
    else:
        assign = _greedy_assign(sizes, targets, active, rng)

    out = {0: [], 1: [], 2: []}
    for pid, s in zip(patients, assign):
        out[int(s)].extend(sorted(groups[pid]))
    return SplitManifest(train=out[0], val=out[1], test=out[2], ratios=ratios, seed=seed)


def _exhaustive_assign(sizes, targets, active, rng):
    combos = np.array(list(itertools.product(active, repeat=len(sizes))))
    counts = np.stack([(combos == s) @ sizes for s in range(3)], axis=1)
    nonempty = np.all([(combos == s).any(axis=1) for s in active], axis=0)
    train_dev = np.abs(counts[:, 0] - targets[0])
    total_dev = np.abs(counts - targets).sum(axis=1)
    train_dev = np.where(nonempty, train_dev, np.inf)
    best = np.flatnonzero(np.isclose(train_dev, train_dev.min()))
    best = best[np.isclose(total_dev[best], total_dev[best].min())]
    return combos[rng.choice(best)]


def _greedy_assign(sizes, targets, active, rng):
    order = rng.permutation(len(sizes))
    counts = np.zeros(3)
    assign = np.empty(len(sizes), dtype=int)
    for k, i in enumerate(order):
        if k < len(active):
            s = active[k]  # seed every active split with one patient
        else:
            s = max(active, key=lambda a: (targets[a] - counts[a]) / targets[a])
        assign[i] = s
        counts[s] += sizes[i]
    return assign


# -- phantoms ------------------------------------------------------------------

def _texture(rng, yy, xx, size, components=3):
    """Smooth sinusoidal texture with values in [-1, 1]."""
    t = np.zeros_like(yy)
    for _ in range(components):
        freq = rng.uniform(0.5, 3.0) / size
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        t += np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    return t / components


def _lesion_mask(kind, rng, yy, xx, size, radius, center):
    r = radius if radius is not None else rng.uniform(0.15, 0.28)
    r_px = r * size
    aspect = rng.uniform(0.65, 1.0)
    angle = rng.uniform(0, np.pi)
    extent = r_px  # half-extent of the bounding box
    if center is None:
        lo, hi = extent + 1, size - extent - 2
        if lo > hi:
            raise ValidationError(f"lesion of radius {r_px:.1f}px does not fit a {size}px canvas")
        cy, cx = rng.uniform(lo, hi, size=2)
    else:
        cy, cx = center
    if cy - extent < 0 or cx - extent < 0 or cy + extent > size - 1 or cx + extent > size - 1:
        raise ValidationError(f"lesion at ({cy:.1f}, {cx:.1f}) radius {r_px:.1f}px exceeds the canvas")

    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    rho = np.sqrt(u ** 2 + (v / aspect) ** 2)
    if kind == "ellipse":
        return rho <= r_px
    if kind == "annular-ring":
        return (rho <= r_px) & (rho >= r_px * rng.uniform(0.45, 0.65))
    # crescent: a disk minus a shifted, slightly smaller disk
    shift = r_px * rng.uniform(0.35, 0.55)
    bite = np.sqrt((u - shift) ** 2 + (v / aspect) ** 2) <= r_px * 0.85
    return (rho <= r_px) & ~bite


def generate_phantom(spec):
    """Render one phantom; the mask is the shape before blurring."""
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    kind = spec.shape or SHAPES[rng.integers(len(SHAPES))]
    mask = _lesion_mask(kind, rng, yy, xx, n, spec.radius, spec.center)

    background = spec.background_mean + spec.background_std * _texture(rng, yy, xx, n)
    lesion = spec.lesion_mean + spec.lesion_std * _texture(rng, yy, xx, n)
    image = np.where(mask, lesion, background)
    if spec.blur_radius > 0:
        image = ndimage.gaussian_filter(image, sigma=spec.blur_radius, mode="reflect")
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return SamplePair(image=image, mask=mask.astype(np.uint8), patient_id=f"seed{spec.seed}",
                      source="phantom", sample_id=f"phantom_{spec.seed}")


def sample_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_phantom_set(count, size=64, seed=0, images_per_patient=5, **overrides):
    """``count`` phantoms grouped into synthetic patients of ``images_per_patient``."""
    pairs = []
    for i in range(count):
        spec = PhantomSpec(size=size, seed=sample_seed(seed, i), **overrides)
        p = generate_phantom(spec)
        p.patient_id = f"P{i // images_per_patient:04d}"
        p.sample_id = f"{p.patient_id}_{i:05d}"
        pairs.append(p)
    return pairs


# -- sample store ----------------------------------------------------------------

def to_uint8(image):
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_store(pairs, out_dir, split, extra=None):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    samples = []
    for p in pairs:
        Image.fromarray(to_uint8(p.image)).save(out / "images" / f"{p.sample_id}.png")
        Image.fromarray((p.mask * 255).astype(np.uint8)).save(out / "masks" / f"{p.sample_id}.png")
        samples.append({"id": p.sample_id, "patient_id": p.patient_id, "source": p.source,
                        "image": f"images/{p.sample_id}.png", "mask": f"masks/{p.sample_id}.png"})
    manifest = {"format": MANIFEST_FORMAT, "samples": samples, **split.to_dict()}
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


@dataclass
class SampleStore:
    root: Path
    manifest: dict
    samples: dict = field(default_factory=dict)

    @classmethod
    def open(cls, manifest_path):
        path = Path(manifest_path)
        manifest = json.loads(path.read_text())
        if manifest.get("format") != MANIFEST_FORMAT:
            raise ValidationError(f"{path} is not a {MANIFEST_FORMAT} manifest")
        return cls(root=path.parent, manifest=manifest,
                   samples={s["id"]: s for s in manifest["samples"]})

    @property
    def split_manifest(self):
        m = self.manifest
        return SplitManifest(m["train"], m["val"], m["test"], tuple(m["ratios"]), m["seed"])

    def load(self, sample_id):
        s = self.samples[sample_id]
        return SamplePair(image=load_gray(self.root / s["image"]).astype(np.float64) / 255.0,
                          mask=load_mask(self.root / s["mask"]),
                          patient_id=s["patient_id"], source=s["source"], sample_id=sample_id)

    def arrays(self, split):
        """Stacked ``(N, H, W)`` float images and uint8 masks of one split, in manifest order."""
        ids = self.split_manifest.split(split)
        pairs = [self.load(i) for i in ids]
        if not pairs:
            return np.zeros((0, 0, 0)), np.zeros((0, 0, 0), dtype=np.uint8), []
        return (np.stack([p.image for p in pairs]), np.stack([p.mask for p in pairs]), ids)


def ingest(images_dir, masks_dir, out_dir, ratios=(0.8, 0.1, 0.1), seed=0,
           patient_pattern=r"^([^_]+)_"):
    pairs = pair_directories(images_dir, masks_dir, patient_pattern)
    split = stratified_split(pairs, ratios, seed)
    return write_store(pairs, out_dir, split)


def generate_store(count, size, seed, out_dir, images_per_patient=5, ratios=(0.8, 0.1, 0.1),
                   **overrides):
    pairs = generate_phantom_set(count, size, seed, images_per_patient, **overrides)
    split = stratified_split(pairs, ratios, seed)
    extra = {"phantom": {"count": count, "size": size, "seed": seed, **overrides}}
    return write_store(pairs, out_dir, split, extra)
