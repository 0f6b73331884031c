"""Dataset loading, splitting and synthesis.

Images are float32 arrays shaped C x H x W with values in [0, 1]; masks are
float32 arrays shaped H x W holding exactly 0 or 1.
"""
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

IMAGE_EXTS = (".png",)


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    name: str = ""
    # ellipse parameters for synthetic samples (see generate_synthetic_dataset)
    shapes: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.image, self.mask))


@dataclass
class DatasetSplit:
    train_labeled: list
    train_unlabeled: list
    test: list
    label_fraction: float
    seed: int
    labeled_ids: list
    unlabeled_ids: list
    test_ids: list

    def manifest(self):
        return {
            "labeled_ids": list(self.labeled_ids),
            "unlabeled_ids": list(self.unlabeled_ids),
            "test_ids": list(self.test_ids),
            "label_fraction": self.label_fraction,
            "seed": self.seed,
        }

    @property
    def test_hash(self):
        """Hash identifying the test set; comparable runs must share it."""
        blob = json.dumps(sorted(self.test_ids)).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def manifest_hash(self):
        blob = json.dumps(self.manifest(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LabeledViewAssignment:
    view1_ids: list
    view2_ids: list


def minmax(arr):
    """Scale to [0, 1]; a constant array maps to all zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


def _read_png(path):
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGBA", "P", "CMYK", "YCbCr", "LA"):
                im = im.convert("RGB") if im.mode != "LA" else im.convert("L")
            arr = np.asarray(im)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image file {path}: {e}") from e
    return arr


def _dtype_max(arr):
    if arr.dtype == np.bool_:
        return 1.0
    if np.issubdtype(arr.dtype, np.integer):
        if arr.dtype == np.uint8:
            return 255.0
        # PIL hands 16-bit PNGs back as uint16 or int32
        return 65535.0
    return 1.0


def _resize(channel, resolution, resample):
    im = Image.fromarray(np.asarray(channel, dtype=np.float32), mode="F")
    if im.size != (resolution, resolution):
        im = im.resize((resolution, resolution), resample=resample)
    return np.asarray(im, dtype=np.float32)


def load_image(path, resolution):
    arr = _read_png(path).astype(np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    chans = [_resize(c, resolution, Image.BILINEAR) for c in arr]
    return minmax(np.stack(chans))


def load_mask(path, resolution):
    raw = _read_png(path)
    if raw.ndim == 3:
        raw = raw[..., 0]
    scaled = raw.astype(np.float32) / _dtype_max(raw)
    binary = (scaled >= 0.5).astype(np.float32)
    return (_resize(binary, resolution, Image.NEAREST) >= 0.5).astype(np.float32)


def load_image_mask_dir(image_dir, mask_dir, resolution):
    """Load same-named image/mask PNG pairs, resized to resolution x resolution."""
    if not os.path.isdir(image_dir):
        raise DataError(f"image directory not found: {image_dir}")
    names = sorted(f for f in os.listdir(image_dir) if f.lower().endswith(IMAGE_EXTS))
    if not names:
        raise DataError(f"no images in {image_dir}")
    samples = []
    for name in names:
        mask_path = os.path.join(mask_dir, name)
        if not os.path.isfile(mask_path):
            raise DataError(f"missing mask for {name} in {mask_dir}")
        image = load_image(os.path.join(image_dir, name), resolution)
        mask = load_mask(mask_path, resolution)
        samples.append(Sample(image, mask, name=name))
    return samples


def read_volume(raw_path):
    header_path = os.path.splitext(raw_path)[0] + ".json"
    with open(header_path) as f:
        header = json.load(f)
    dtype = np.dtype(header.get("dtype", "float32")).newbyteorder("<")
    shape = tuple(int(s) for s in header["shape"])
    if len(shape) != 3:
        raise DataError(f"{header_path}: expected a 3D shape, got {shape}")
    payload = np.fromfile(raw_path, dtype=np.uint8)
    expected = int(np.prod(shape)) * dtype.itemsize
    if payload.size != expected:
        raise DataError(
            f"{raw_path}: payload is {payload.size} bytes, header {shape} "
            f"({dtype}) implies {expected}"
        )
    return payload.view(dtype).reshape(shape).astype(np.float32)


def slice_volume(raw_path, axis, out_dir):
    """Write one 16-bit PNG per index along ``axis``; returns the file paths.

    Each slice is min-max normalized on its own. A slice along axis k keeps
    the remaining two axes in their stored order.
    """
    if axis not in (0, 1, 2):
        raise DataError(f"axis must be 0, 1 or 2, got {axis}")
    vol = read_volume(raw_path)
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(raw_path))[0]
    n = vol.shape[axis]
    width = max(3, len(str(n - 1)))
    paths = []
    for k in range(n):
        sl = minmax(np.take(vol, k, axis=axis))
        q = np.floor(sl * 65535.0 + 0.5).astype(np.uint16)
        path = os.path.join(out_dir, f"{stem}_{k:0{width}d}.png")
        Image.fromarray(q).save(path)
        paths.append(path)
    return paths


def _round(x):
    return int(math.floor(x + 0.5))


def make_split(samples, train_fraction, label_fraction, seed):
    """Shuffle, cut into train/test, then withhold masks from part of train.

    The test set depends only on (len(samples), train_fraction, seed), so runs
    at different label fractions are evaluated on the same images.
    """
    n = len(samples)
    if not 0 < train_fraction < 1:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if not 0 < label_fraction <= 1:
        raise DataError(f"label_fraction must be in (0, 1], got {label_fraction}")
    if n < 5:
        raise DataError(f"need at least 5 samples, got {n}")
    ss = np.random.SeedSequence(seed)
    order_rng, label_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    order = order_rng.permutation(n)
    n_train = min(max(_round(train_fraction * n), 2), n - 1)
    train_ids, test_ids = order[:n_train], order[n_train:]
    n_lab = min(max(_round(label_fraction * n_train), 2), n_train)
    picked = label_rng.permutation(n_train)
    labeled_ids = [int(train_ids[i]) for i in picked[:n_lab]]
    unlabeled_ids = [int(train_ids[i]) for i in picked[n_lab:]]
    test_ids = [int(i) for i in test_ids]
    return DatasetSplit(
        train_labeled=[samples[i] for i in labeled_ids],
        train_unlabeled=[samples[i].image for i in unlabeled_ids],
        test=[samples[i] for i in test_ids],
        label_fraction=label_fraction,
        seed=seed,
        labeled_ids=labeled_ids,
        unlabeled_ids=unlabeled_ids,
        test_ids=test_ids,
    )


def assign_views(split, seed):
    """Deal the labeled set into two disjoint, balanced view subsets.

    Returned ids index into ``split.train_labeled``.
    """
    n = len(split.train_labeled)
    if n < 2:
        raise DataError(f"need at least 2 labeled samples for two views, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    return LabeledViewAssignment(
        view1_ids=[int(i) for i in order[0::2]],
        view2_ids=[int(i) for i in order[1::2]],
    )


def rasterize_ellipse(shape, resolution):
    """Boolean mask of pixel centres inside a rotated ellipse."""
    cy, cx, ry, rx, theta = (shape[k] for k in ("cy", "cx", "ry", "rx", "theta"))
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def generate_synthetic_dataset(n, resolution, seed, noise_level=0.1):
    """Grayscale images of 1-3 random ellipses on a flat background.

    Each sample keeps its ellipse parameters in ``Sample.shapes`` (pixel
    units, drawn in list order so later shapes paint over earlier ones). The
    mask is the union of all ellipses.
    """
    if n < 5:
        raise DataError(f"n must be >= 5, got {n}")
    if resolution < 32:
        raise DataError(f"resolution must be >= 32, got {resolution}")
    if not 0 <= noise_level < 1:
        raise DataError(f"noise_level must be in [0, 1), got {noise_level}")
    rng = np.random.default_rng(seed)
    samples = []
    for idx in range(n):
        background = rng.uniform(0.05, 0.35)
        k = int(rng.integers(1, 4))
        shapes = []
        image = np.full((resolution, resolution), background, dtype=np.float64)
        mask = np.zeros((resolution, resolution), dtype=bool)
        for _ in range(k):
            shape = {
                "cy": float(rng.uniform(0.2, 0.8) * resolution),
                "cx": float(rng.uniform(0.2, 0.8) * resolution),
                "ry": float(rng.uniform(0.07, 0.18) * resolution),
                "rx": float(rng.uniform(0.07, 0.18) * resolution),
                "theta": float(rng.uniform(0, math.pi)),
                "intensity": float(background + rng.uniform(0.3, 0.6)),
            }
            inside = rasterize_ellipse(shape, resolution)
            image[inside] = shape["intensity"]
            mask |= inside
            shapes.append(shape)
        if noise_level > 0:
            image = image + rng.normal(0.0, noise_level, image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
        samples.append(Sample(image, mask.astype(np.float32), name=f"{idx:05d}", shapes=shapes))
    return samples


def write_dataset(samples, out_dir, params=None):
    """Write samples as ``images/`` and ``masks/`` PNG pairs plus params.json."""
    img_dir = os.path.join(out_dir, "images")
    msk_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(msk_dir, exist_ok=True)
    records = []
    for s in samples:
        fname = f"{s.name}.png"
        img = s.image[0] if s.image.shape[0] == 1 else np.moveaxis(s.image, 0, -1)
        Image.fromarray(np.floor(img * 255.0 + 0.5).astype(np.uint8)).save(os.path.join(img_dir, fname))
        Image.fromarray((s.mask * 255).astype(np.uint8)).save(os.path.join(msk_dir, fname))
        records.append({"file": fname, "shapes": s.shapes})
    with open(os.path.join(out_dir, "params.json"), "w") as f:
        json.dump({"params": params or {}, "samples": records}, f, indent=1, sort_keys=True)
    return img_dir, msk_dir
