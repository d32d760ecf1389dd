"""Synthetic face data, dataset splits and bit-exact persistence.

Faces are rendered from a small parameter set so every attribute owns a
known pixel region.  Generation is a pure function of ``(spec.seed, index)``.

Palette (RGB, before jitter and texture noise)::

    blond hair   (0.92, 0.80, 0.45)      black hair   (0.12, 0.10, 0.09)
    skin         (0.80, 0.60, 0.48)      pale skin    (0.96, 0.88, 0.84)
    glasses band (0.10, 0.12, 0.18)      mouth        (0.62, 0.18, 0.20)
    eyes         (0.15, 0.10, 0.08)
"""

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from ._validation import ConfigurationError, ShapeError, check_image

ATTRIBUTES = ("blond_hair", "black_hair", "eyeglasses", "smiling", "pale_skin")
HAIR_ATTRIBUTES = ("blond_hair", "black_hair")

PALETTE = {
    "blond_hair": (0.92, 0.80, 0.45),
    "black_hair": (0.12, 0.10, 0.09),
    "skin": (0.80, 0.60, 0.48),
    "pale_skin": (0.96, 0.88, 0.84),
    "glasses": (0.10, 0.12, 0.18),
    "mouth": (0.62, 0.18, 0.20),
    "eye": (0.15, 0.10, 0.08),
}

ATTRIBUTE_PROBABILITY = {"blond_hair": 0.4, "eyeglasses": 0.35, "smiling": 0.5, "pale_skin": 0.3}

MASK_FACE = 1.0
MASK_BACKGROUND = 0.01

# mouth geometry in pixels at 32 px, scaled linearly with resolution
MOUTH_AMPLITUDE = 3.0
MOUTH_BASE_THICKNESS = 0.6
MOUTH_OPEN_THICKNESS = 1.2
SMILE_THRESHOLD = 0.35

# speaker random-walk steps per frame
CURVATURE_STEP = 0.15
OPENNESS_STEP = 0.1

RAW_MAGIC = b"VGF1"


@dataclass(frozen=True)
class SynthFaceSpec:
    """Configuration of the synthetic face generator."""

    seed: int = 0
    resolution: int = 32
    attributes: tuple = ATTRIBUTES
    landmark_points: int = 8
    stamp_radius: int = 1
    color_jitter: float = 0.03
    texture_noise: float = 0.01

    def __post_init__(self):
        if self.resolution < 8:
            raise ConfigurationError(f"resolution must be >= 8, got {self.resolution}")
        if tuple(self.attributes) != ATTRIBUTES:
            raise ConfigurationError(f"attributes must be {ATTRIBUTES}")
        if self.landmark_points != 8:
            raise ConfigurationError("the generator renders exactly 8 landmark points")
        if self.stamp_radius < 0:
            raise ConfigurationError("stamp_radius must be non-negative")

    @property
    def n_attributes(self):
        return len(self.attributes)

    def to_dict(self):
        d = self.__dict__.copy()
        d["attributes"] = list(self.attributes)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "attributes" in d:
            d["attributes"] = tuple(d["attributes"])
        return cls(**d)


@dataclass(frozen=True)
class FaceParams:
    """Everything needed to render one face."""

    attributes: tuple
    background: tuple
    skin_shift: tuple
    hair_shift: float
    offset: tuple
    openness: float
    noise_seed: int
    mouth_u: float = 0.5
    curvature: float = None

    @property
    def mouth_curvature(self):
        if self.curvature is not None:
            return self.curvature
        if self.attributes[3]:
            return 0.6 + 0.4 * self.mouth_u
        return -0.4 + 0.5 * self.mouth_u


@dataclass
class FaceSample:
    image: np.ndarray
    label: np.ndarray
    landmark_map: np.ndarray
    mask: np.ndarray
    keypoints: np.ndarray
    index: int = 0
    params: FaceParams = None


@dataclass
class FaceArrays:
    """Stacked samples, the form consumed by the estimators."""

    images: np.ndarray
    labels: np.ndarray
    landmarks: np.ndarray
    masks: np.ndarray
    keypoints: np.ndarray
    indices: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return FaceArrays(self.images[idx], self.labels[idx], self.landmarks[idx],
                          self.masks[idx], self.keypoints[idx], self.indices[idx])


def inverse_domain(c):
    """Bitwise complement of a binary attribute vector (the farthest domain)."""
    return 1 - np.asarray(c)


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([abs(int(k)) for k in key]))


def _scale(spec):
    return spec.resolution / 32.0


def _draw_attributes(rng):
    blond = int(rng.random() < ATTRIBUTE_PROBABILITY["blond_hair"])
    return (
        blond,
        1 - blond,
        int(rng.random() < ATTRIBUTE_PROBABILITY["eyeglasses"]),
        int(rng.random() < ATTRIBUTE_PROBABILITY["smiling"]),
        int(rng.random() < ATTRIBUTE_PROBABILITY["pale_skin"]),
    )


def _draw_identity(spec, rng, attributes):
    jit = spec.color_jitter
    return dict(
        attributes=tuple(attributes),
        background=tuple(float(v) for v in np.clip(rng.uniform(0.3, 0.7) + rng.uniform(-0.05, 0.05, 3), 0, 1)),
        skin_shift=tuple(float(v) for v in rng.uniform(-jit, jit, 3)),
        hair_shift=float(rng.uniform(-jit, jit)),
        offset=tuple(int(v) for v in rng.integers(-1, 2, size=2)),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def sample_params(spec, index):
    """Draw the render parameters of sample ``index``."""
    rng = _rng(spec.seed, index, 1)
    attributes = _draw_attributes(rng)
    ident = _draw_identity(spec, rng, attributes)
    mouth_u = float(rng.uniform(0.0, 1.0))
    openness = float(rng.uniform(0.0, 1.0))
    return FaceParams(mouth_u=mouth_u, openness=openness, **ident)


def _geometry(spec, params):
    s = _scale(spec)
    r = spec.resolution
    cx = 0.5 * r + params.offset[0]
    cy = 0.55 * r + params.offset[1]
    return dict(
        s=s, cx=cx, cy=cy,
        face_rx=0.32 * r, face_ry=0.38 * r,
        hair_cy=0.32 * r + params.offset[1], hair_rx=0.44 * r, hair_ry=0.30 * r,
        eye_y=cy - 0.08 * r, eye_dx=0.13 * r, eye_half_h=0.07 * r, eye_half_w=0.27 * r,
        mouth_y=cy + 0.2 * r, mouth_half_w=0.16 * r, mouth_half_h=0.13 * r,
    )


def region_maps(spec, params):
    """Boolean pixel regions owned by each attribute.

    Toggling an attribute bit changes pixels only inside its region.
    """
    g = _geometry(spec, params)
    r = spec.resolution
    v, u = np.mgrid[0:r, 0:r].astype(np.float64) + 0.5
    face = ((u - g["cx"]) / g["face_rx"]) ** 2 + ((v - g["cy"]) / g["face_ry"]) ** 2 <= 1.0
    hair_shape = ((u - g["cx"]) / g["hair_rx"]) ** 2 + ((v - g["hair_cy"]) / g["hair_ry"]) ** 2 <= 1.0
    hair = hair_shape & ~face
    eyes = (np.abs(v - g["eye_y"]) <= g["eye_half_h"]) & (np.abs(u - g["cx"]) <= g["eye_half_w"])
    mouth = (np.abs(v - g["mouth_y"]) <= g["mouth_half_h"]) & (np.abs(u - g["cx"]) <= g["mouth_half_w"])
    return {
        "face": face,
        "hair": hair,
        "blond_hair": hair,
        "black_hair": hair,
        "eyeglasses": eyes & face,
        "smiling": mouth & face,
        "pale_skin": face,
    }


def _mouth_line(g, curvature, t):
    # image rows grow downwards, so a positive curvature lowers the centre
    amp = MOUTH_AMPLITUDE * g["s"]
    return g["mouth_y"] + curvature * amp * ((1 - t ** 2) - 0.5)


def _mouth_thickness(g, openness):
    return (MOUTH_BASE_THICKNESS + MOUTH_OPEN_THICKNESS * openness) * g["s"]


def keypoints_from_params(spec, params):
    """Eight (row, col) keypoints: eyes, nose, mouth corners, lips, chin."""
    g = _geometry(spec, params)
    th = _mouth_thickness(g, params.openness)
    corner = _mouth_line(g, params.mouth_curvature, 1.0)
    centre = _mouth_line(g, params.mouth_curvature, 0.0)
    w = g["mouth_half_w"]
    pts = [
        (g["eye_y"], g["cx"] - g["eye_dx"]),
        (g["eye_y"], g["cx"] + g["eye_dx"]),
        (g["cy"] + 0.04 * spec.resolution, g["cx"]),
        (corner, g["cx"] - w),
        (corner, g["cx"] + w),
        (centre - th, g["cx"]),
        (centre + th, g["cx"]),
        (g["cy"] + g["face_ry"] * 0.92, g["cx"]),
    ]
    return np.asarray(pts, dtype=np.float64) - 0.5


def render_landmarks(keypoints, resolution, radius=1, sigma=0.8):
    """Render keypoints into a 1-channel heatmap.

    Each keypoint contributes a Gaussian restricted to the (2r+1)^2 stamp
    around its rounded position, so sub-pixel motion stays visible.
    """
    out = np.zeros((resolution, resolution), dtype=np.float64)
    for ky, kx in np.asarray(keypoints, dtype=np.float64):
        ry, rx = int(round(ky)), int(round(kx))
        for i in range(ry - radius, ry + radius + 1):
            for j in range(rx - radius, rx + radius + 1):
                if 0 <= i < resolution and 0 <= j < resolution:
                    val = np.exp(-((i - ky) ** 2 + (j - kx) ** 2) / (2 * sigma ** 2))
                    out[i, j] = max(out[i, j], val)
    return out[:, :, None].astype(np.float32)


def render(spec, params):
    """Render image, landmark map, mask and keypoints for ``params``."""
    r = spec.resolution
    g = _geometry(spec, params)
    regions = region_maps(spec, params)
    v, u = np.mgrid[0:r, 0:r].astype(np.float64) + 0.5
    blond, black, glasses, _, pale = params.attributes

    img = np.empty((r, r, 3), dtype=np.float64)
    img[:] = params.background
    hair_key = "blond_hair" if blond else "black_hair"
    img[regions["hair"]] = np.asarray(PALETTE[hair_key]) + params.hair_shift
    skin = np.asarray(PALETTE["pale_skin" if pale else "skin"]) + np.asarray(params.skin_shift)
    img[regions["face"]] = skin

    eye_band = regions["eyeglasses"]
    if glasses:
        img[eye_band] = PALETTE["glasses"]
    else:
        for side in (-1, 1):
            eye = ((u - (g["cx"] + side * g["eye_dx"])) ** 2 + (v - g["eye_y"]) ** 2 <= (1.2 * g["s"]) ** 2)
            img[eye & eye_band] = PALETTE["eye"]

    mouth_box = regions["smiling"]
    t = (u - g["cx"]) / g["mouth_half_w"]
    line = _mouth_line(g, params.mouth_curvature, np.clip(t, -1, 1))
    th = _mouth_thickness(g, params.openness)
    alpha = np.clip(th + 0.5 - np.abs(v - line), 0.0, 1.0)
    alpha *= np.clip((1 - np.abs(t)) * g["mouth_half_w"], 0.0, 1.0)
    alpha = np.where(mouth_box, alpha, 0.0)[:, :, None]
    img = img * (1 - alpha) + np.asarray(PALETTE["mouth"]) * alpha

    if spec.texture_noise > 0:
        noise = _rng(params.noise_seed, 2).normal(0.0, spec.texture_noise, size=img.shape)
        img = img + noise
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    mask = np.where(regions["face"], MASK_FACE, MASK_BACKGROUND).astype(np.float32)[:, :, None]
    kps = keypoints_from_params(spec, params)
    lmk = render_landmarks(kps, r, spec.stamp_radius)
    return img, lmk, mask, kps


def _sample_from_params(spec, params, index):
    img, lmk, mask, kps = render(spec, params)
    label = np.asarray(params.attributes, dtype=np.float32)
    return FaceSample(image=img, label=label, landmark_map=lmk, mask=mask,
                      keypoints=kps, index=index, params=params)


def make_sample(spec, index):
    return _sample_from_params(spec, sample_params(spec, index), index)


def with_attributes(spec, sample, attributes):
    """Re-render ``sample`` with different attribute bits, all else fixed."""
    params = replace(sample.params, attributes=tuple(int(a) for a in attributes))
    return _sample_from_params(spec, params, sample.index)


def generate_dataset(spec, count, start=0):
    """Generate ``count`` independent faces with indices ``start..start+count-1``."""
    if not isinstance(spec, SynthFaceSpec):
        raise ConfigurationError("spec must be a SynthFaceSpec")
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    return [make_sample(spec, start + i) for i in range(count)]


def _reflect(value, lo, hi):
    while value < lo or value > hi:
        value = 2 * lo - value if value < lo else 2 * hi - value
    return value


def speaker_walk(spec, frames):
    """Mouth (curvature, openness) trajectory of the speaker sequence."""
    rng = _rng(spec.seed, 7, 3)
    c, o = float(rng.uniform(-0.5, 0.5)), float(rng.uniform(0.2, 0.8))
    out = []
    for _ in range(frames):
        out.append((c, o))
        c = _reflect(c + rng.uniform(-CURVATURE_STEP, CURVATURE_STEP), -1.0, 1.0)
        o = _reflect(o + rng.uniform(-OPENNESS_STEP, OPENNESS_STEP), 0.0, 1.0)
    return out


def speaker_motion_bound(spec):
    """Upper bound on the mean L1 distance between consecutive speaker frames.

    Only mouth pixels move; each moves by at most the largest palette
    contrast times the per-step shift of the lip line and thickness.
    """
    params = speaker_identity(spec)
    g = _geometry(spec, params)
    box = region_maps(spec, params)["smiling"]
    shift = (MOUTH_AMPLITUDE * g["s"] * 0.5 * CURVATURE_STEP
             + MOUTH_OPEN_THICKNESS * g["s"] * OPENNESS_STEP)
    skin_key = "pale_skin" if params.attributes[4] else "skin"
    skin = np.asarray(PALETTE[skin_key]) + np.asarray(params.skin_shift)
    contrast = np.abs(skin - np.asarray(PALETTE["mouth"]))
    per_pixel = contrast * min(1.0, shift)
    return float(box.sum() * per_pixel.sum() / (spec.resolution ** 2 * 3))


def speaker_identity(spec):
    rng = _rng(spec.seed, 7, 1)
    attributes = _draw_attributes(rng)
    ident = _draw_identity(spec, rng, attributes)
    return FaceParams(curvature=0.0, openness=0.5, **ident)


def generate_speaker_sequence(spec, frames):
    """Frames of one talking identity; only the mouth moves.

    The smile bit follows the curvature (set when above ``SMILE_THRESHOLD``).
    """
    if frames < 2:
        raise ConfigurationError(f"frames must be >= 2, got {frames}")
    base = speaker_identity(spec)
    out = []
    for t, (c, o) in enumerate(speaker_walk(spec, frames)):
        attrs = list(base.attributes)
        attrs[3] = int(c >= SMILE_THRESHOLD)
        params = replace(base, attributes=tuple(attrs), curvature=c, openness=o)
        out.append(_sample_from_params(spec, params, t))
    return out


def stack_samples(samples):
    return FaceArrays(
        images=np.stack([s.image for s in samples]),
        labels=np.stack([s.label for s in samples]),
        landmarks=np.stack([s.landmark_map for s in samples]),
        masks=np.stack([s.mask for s in samples]),
        keypoints=np.stack([s.keypoints for s in samples]),
        indices=np.asarray([s.index for s in samples]),
    )


def split_sizes(count, fractions):
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must be non-negative and sum to 1, got {fractions.tolist()}")
    raw = fractions * count
    sizes = np.floor(raw + 1e-9).astype(int)
    remainder = count - sizes.sum()
    # hand out the leftovers by largest fractional part, earliest first
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:remainder]:
        sizes[i] += 1
    for f, n in zip(fractions, sizes):
        if f > 0 and n == 0:
            raise ConfigurationError(f"{count} samples are too few for fractions {fractions.tolist()}")
    return sizes.tolist()


def split_dataset(samples, fractions=(0.5, 0.4, 0.1), seed=None):
    """Split into disjoint, order-stable partitions (defense, target, eval).

    With ``seed`` the samples are shuffled deterministically first.
    """
    n = len(samples)
    sizes = split_sizes(n, fractions)
    order = np.arange(n)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for size in sizes:
        idx = order[start:start + size]
        start += size
        if seed is not None:
            idx = np.sort(idx)
        if isinstance(samples, FaceArrays):
            parts.append(samples.subset(idx))
        elif isinstance(samples, np.ndarray):
            parts.append(samples[idx])
        else:
            parts.append([samples[i] for i in idx])
    return tuple(parts)


# -- persistence -------------------------------------------------------------

def save_image(img, path):
    """Write an image as 8-bit PNG or, for ``.vgf`` paths, raw float32."""
    arr = check_image(img)
    path = os.fspath(path)
    if path.endswith(".vgf"):
        h, w, c = arr.shape
        with open(path, "wb") as f:
            f.write(RAW_MAGIC + struct.pack("<III", h, w, c))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    mode = "L" if q.shape[2] == 1 else "RGB"
    Image.fromarray(q[:, :, 0] if mode == "L" else q, mode=mode).save(path, format="PNG")


def load_image(path):
    path = os.fspath(path)
    if path.endswith(".vgf"):
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) < 16 or blob[:4] != RAW_MAGIC:
            raise OSError(f"{path}: not a float image container")
        h, w, c = struct.unpack("<III", blob[4:16])
        expected = 16 + 4 * h * w * c
        if len(blob) != expected:
            raise OSError(f"{path}: payload is {len(blob)} bytes, header declares {expected}")
        return np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float32)
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, SyntaxError, ValueError) as exc:
        raise OSError(f"{path}: cannot read image ({exc})") from exc
    return arr[:, :, None] if arr.ndim == 2 else arr


def write_dataset(samples, root, *, fmt="vgf", meta=None):
    """Write samples (or ``FaceArrays``) under ``root`` plus a ``manifest.json``."""
    if fmt not in ("vgf", "png"):
        raise ConfigurationError(f"unknown image format {fmt!r}")
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    if isinstance(samples, FaceArrays):
        rows = zip(samples.indices, samples.images, samples.labels, samples.landmarks, samples.masks,
                   samples.keypoints)
    else:
        rows = ((s.index, s.image, s.label, s.landmark_map, s.mask, s.keypoints) for s in samples)
    entries = []
    for index, image, label, landmarks, mask, keypoints in rows:
        stem = f"{int(index):06d}"
        files = {}
        for kind, arr in (("image", image), ("landmarks", landmarks), ("mask", mask)):
            rel = os.path.join("images", f"{stem}_{kind}.{fmt}")
            save_image(arr, os.path.join(root, rel))
            files[kind] = rel
        entries.append({
            "index": int(index),
            "attributes": [int(b) for b in label],
            "keypoints": [[float(a), float(b)] for a, b in keypoints],
            "files": files,
        })
    manifest = {"meta": meta or {}, "entries": entries}
    path = os.path.join(root, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_dataset(root):
    """Load a directory written by :func:`write_dataset` into ``FaceArrays``."""
    path = os.path.join(root, "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise OSError(f"{path}: cannot read manifest ({exc})") from exc
    entries = manifest["entries"]
    if not entries:
        raise ConfigurationError(f"{path}: manifest has no entries")

    def load(e, kind):
        return load_image(os.path.join(root, e["files"][kind]))

    data = FaceArrays(
        images=np.stack([load(e, "image") for e in entries]),
        labels=np.asarray([e["attributes"] for e in entries], dtype=np.float32),
        landmarks=np.stack([load(e, "landmarks") for e in entries]),
        masks=np.stack([load(e, "mask") for e in entries]),
        keypoints=np.asarray([e["keypoints"] for e in entries], dtype=np.float64),
        indices=np.asarray([e["index"] for e in entries]),
    )
    if data.images.shape[-1] != 3:
        raise ShapeError(f"{path}: images must be RGB")
    return data, manifest.get("meta", {})
