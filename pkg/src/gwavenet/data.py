"""Patch datasets: raw-array normalization, tiling, augmentation, the
synthetic gravity-wave generator, splits/subsampling and disk layout.

The generator builds 200x200 grayscale patches that mimic the nuisance
structure of nighttime satellite imagery (smooth background, cloud blobs,
city-light spots, instrumental scan lines, pixel noise); "gw" patches add
a band-limited ripple field under a smooth envelope.  Every patch is a
pure function of (master seed, class, index), so datasets are
bit-reproducible and generation can be parallelised per patch.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import filters
from .tensor import DTYPE, Rng, require_finite

PATCH_SIZE = 200

GW, NGW = "gw", "ngw"

# rng substream tags (keep stable: they define the draw layout)
_STREAM_PATCH = 0
_STREAM_TEST = 1
_STREAM_TRAINVAL = 2
_STREAM_SUBSAMPLE = 3


@dataclass
class NoiseProfile:
    """Knobs of the synthetic patch generator.

    Ranges are (lo, hi) for uniform draws.  ``ripple_contrast`` is the
    ripple's peak-to-peak amplitude as a fraction of the [0, 1] dynamic
    range; wavelengths are in pixels.
    """

    background_amp: float = 0.10
    background_scale: float = 40.0
    noise_sigma: float = 0.06
    max_blobs: int = 3
    blob_brightness: tuple = (0.35, 0.9)
    blob_sigma: tuple = (1.5, 4.0)
    max_lines: int = 2
    line_contrast: float = 0.15
    cloud_prob: float = 0.5
    cloud_amp: tuple = (0.10, 0.25)
    cloud_sigma: tuple = (35.0, 70.0)
    wavelength: tuple = (8.0, 40.0)
    ripple_contrast: tuple = (0.1, 0.4)
    envelope_sigma: tuple = (30.0, 70.0)

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class PatchDataset:
    """Labeled 200x200 patches with split tags and provenance.

    ``patches`` is [n, 200, 200] float32 in [0, 1]; ``labels`` holds 1 for
    gw and 0 for ngw; ``splits`` entries are "train"/"val"/"test" or ""
    before splitting; ``provenance`` records where each patch came from
    ("synthetic:gw:12", "file:gw/gw_00012.pgm", "augmented-from:37", ...).
    """

    patches: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.patches)
        if not (len(self.labels) == len(self.splits) == len(self.provenance) == n):
            raise ValueError("dataset fields must have one entry per patch")

    def __len__(self):
        return len(self.patches)

    def indices(self, split):
        return np.flatnonzero(self.splits == split)

    def class_counts(self, split=None):
        mask = np.ones(len(self), bool) if split is None else self.splits == split
        gw_n = int((self.labels[mask] == 1).sum())
        return gw_n, int(mask.sum()) - gw_n

    def subset(self, idx):
        idx = np.asarray(idx)
        return PatchDataset(
            self.patches[idx],
            self.labels[idx],
            self.splits[idx].copy(),
            [self.provenance[i] for i in idx],
        )


def label_to_int(label):
    if label not in (GW, NGW):
        raise ValueError(f"label must be {GW!r} or {NGW!r}, got {label!r}")
    return 1 if label == GW else 0


def median_rescale(a):
    """Steps 1-2 of raw normalization: shift to zero min, scale so the
    median lands at 0.5."""
    a = np.asarray(a, np.float64)
    require_finite(a, "raw array")
    shifted = a - a.min()
    med = np.median(shifted)
    if med <= 0:
        raise ValueError("degenerate raw array: median is zero after the min shift")
    return 0.5 * shifted / med


def normalize_raw(a):
    """Raw radiances -> [0, 1] image: min-shift, median-scale to 0.5, then
    uniformise intensities by their empirical-CDF rank (ties averaged).

    Rank mapping is monotone, so value ordering survives; output spans
    exactly [0, 1] and the median maps near 0.5.
    """
    scaled = median_rescale(a)
    flat = scaled.ravel()
    n = flat.size
    if n < 2:
        raise ValueError("need at least 2 values to uniformise")
    order = np.argsort(flat, kind="stable")
    ranks = np.empty(n, np.float64)
    ranks[order] = np.arange(n, dtype=np.float64)
    # average the ranks of tied runs
    sorted_vals = flat[order]
    boundaries = np.flatnonzero(np.diff(sorted_vals) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [n]))
    for s, e in zip(starts, ends):
        if e - s > 1:
            ranks[order[s:e]] = (s + e - 1) / 2.0
    return (ranks / (n - 1)).reshape(scaled.shape).astype(DTYPE)


def extract_patches(img, size=PATCH_SIZE, stride=None):
    """Tile an image into size-by-size patches (trailing partials dropped)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {img.shape}")
    if stride is None:
        stride = size
    if stride < 1 or size < 1:
        raise ValueError("size and stride must be >= 1")
    h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the {size}x{size} patch size")
    out = []
    for top in range(0, h - size + 1, stride):
        for left in range(0, w - size + 1, stride):
            out.append(np.ascontiguousarray(img[top:top + size, left:left + size]))
    return out


def augment(patch):
    """Distinct axis-aligned views: identity, rot90/180/270, h-flip, v-flip.

    Pure index permutations, so each view preserves the pixel multiset
    exactly; bit-identical duplicates (symmetric patches) are dropped.
    """
    patch = np.asarray(patch)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ValueError(f"augmentation needs a square patch, got shape {patch.shape}")
    views = [
        patch,
        np.rot90(patch, 1),
        np.rot90(patch, 2),
        np.rot90(patch, 3),
        patch[:, ::-1],
        patch[::-1, :],
    ]
    out = []
    for v in views:
        v = np.ascontiguousarray(v)
        if not any(np.array_equal(v, u) for u in out):
            out.append(v)
    return out


def _gaussian_bump(size, cx, cy, sigma):
    y, x = np.mgrid[0:size, 0:size]
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sigma * sigma))


def _smooth_background(rng, size, scale, cutoff_radius):
    """Unit-std low-frequency noise field via an exact spectral Gaussian.

    A truncated spatial Gaussian filter has sidelobes that bleed into the
    ripple band, so the low-pass happens in the Fourier domain with a hard
    zero beyond ``cutoff_radius`` bins (where the Gaussian is ~e^-12
    anyway): the background can never imitate a wave-band peak.
    """
    noise = rng.normal((size, size))
    f = np.fft.fftfreq(size) * size
    r = np.hypot(f[:, None], f[None, :])
    sigma_f = size / (2.0 * math.pi * scale)
    mask = np.exp(-0.5 * (r / sigma_f) ** 2)
    mask[r > cutoff_radius] = 0.0
    field = np.fft.ifft2(np.fft.fft2(noise) * mask).real
    sd = field.std()
    return field / sd if sd > 0 else field


def synth_patch_meta(rng, label, profile=None):
    """Generate one synthetic patch; returns (image, meta).

    meta always records the nuisance draws; for gw patches it adds the
    ripple parameters and the envelope field used to modulate it.  Draw
    order is fixed, so a given (rng, label) pair is bit-reproducible.
    """
    p = profile or NoiseProfile()
    s = PATCH_SIZE
    label_int = label_to_int(label)

    img = np.full((s, s), 0.5, np.float64)
    cutoff = 0.8 * s / p.wavelength[1]  # stay clear of the ripple band
    img += p.background_amp * _smooth_background(rng, s, p.background_scale, cutoff)

    meta = {"label": label, "cloud": False, "blobs": 0, "lines": 0}
    if rng.uniform() < p.cloud_prob:
        amp = rng.uniform(*p.cloud_amp)
        cx, cy = rng.uniform(0, s, 2)
        img += amp * _gaussian_bump(s, cx, cy, rng.uniform(*p.cloud_sigma))
        meta["cloud"] = True

    n_blobs = int(rng.integers(0, p.max_blobs + 1))
    meta["blobs"] = n_blobs
    for _ in range(n_blobs):
        bx, by = rng.uniform(0, s, 2)
        img += rng.uniform(*p.blob_brightness) * _gaussian_bump(
            s, bx, by, rng.uniform(*p.blob_sigma)
        )

    n_lines = int(rng.integers(0, p.max_lines + 1))
    meta["lines"] = n_lines
    for _ in range(n_lines):
        horizontal = rng.uniform() < 0.5
        pos = int(rng.integers(0, s))
        width = int(rng.integers(1, 3))
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        if horizontal:
            img[pos:pos + width, :] += sign * p.line_contrast
        else:
            img[:, pos:pos + width] += sign * p.line_contrast

    img += p.noise_sigma * rng.normal((s, s))

    if label_int == 1:
        lam = rng.uniform(*p.wavelength)
        theta = rng.uniform(0.0, math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        contrast = rng.uniform(*p.ripple_contrast)
        # keep most of the envelope mass inside the patch
        ex, ey = rng.uniform(0.25 * s, 0.75 * s, 2)
        esig = rng.uniform(*p.envelope_sigma)
        env = _gaussian_bump(s, ex, ey, esig)
        y, x = np.mgrid[0:s, 0:s]
        ripple = np.sin(2.0 * math.pi * (x * math.cos(theta) + y * math.sin(theta)) / lam + phase)
        img += (contrast / 2.0) * env * ripple
        meta.update(
            wavelength=lam, theta=theta, phase=phase, contrast=contrast,
            envelope=env.astype(DTYPE), envelope_center=(ex, ey), envelope_sigma=esig,
        )

    return np.clip(img, 0.0, 1.0).astype(DTYPE), meta


def synth_patch(rng, label, profile=None):
    """Synthetic patch without metadata (see synth_patch_meta)."""
    return synth_patch_meta(rng, label, profile)[0]


def make_dataset(rng, n_per_class, profile=None):
    """Balanced synthetic dataset of 2*n_per_class unsplit patches.

    Patch i of class c draws from rng.derive(0, c, i), so the content
    depends only on the master seed, not on generation order.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    patches = []
    labels = []
    provenance = []
    for label in (GW, NGW):
        c = label_to_int(label)
        for i in range(n_per_class):
            patches.append(synth_patch(rng.derive(_STREAM_PATCH, c, i), label, profile))
            labels.append(c)
            provenance.append(f"synthetic:{label}:{i}")
    return PatchDataset(
        np.stack(patches),
        np.asarray(labels, np.int8),
        np.full(2 * n_per_class, "", dtype="<U5"),
        provenance,
    )


def split_dataset(dataset, rng, train_fraction=0.65, test_count=240):
    """Tag every patch train/val/test, stratified by class.

    The test set is drawn first (half per class) and the remainder is
    split train:val by ``train_fraction``; both draws are seeded, so a
    given (dataset, seed) always produces the same index sets.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    if test_count < 0:
        raise ValueError("test_count must be >= 0")
    if test_count >= len(dataset):
        raise ValueError(f"test_count {test_count} >= dataset size {len(dataset)}")
    splits = np.full(len(dataset), "", dtype="<U5")
    per_class_test = [test_count // 2, test_count - test_count // 2]
    for c in (1, 0):
        members = np.flatnonzero(dataset.labels == c)
        want_test = per_class_test[1 - c]
        if want_test > len(members):
            raise ValueError(f"class {c} has {len(members)} patches, test needs {want_test}")
        perm = members[rng.derive(_STREAM_TEST, c).permutation(len(members))]
        test_idx = perm[:want_test]
        rest = perm[want_test:]
        n_train = int(math.floor(train_fraction * len(rest) + 0.5))
        splits[test_idx] = "test"
        splits[rest[:n_train]] = "train"
        splits[rest[n_train:]] = "val"
    return PatchDataset(dataset.patches, dataset.labels, splits, list(dataset.provenance))


def subsample(dataset, fraction, rng):
    """Keep a stratified fraction of the train and val patches.

    Each (class, split) cell keeps round(fraction * n) members; the test
    split is untouched.  Rows that lose membership are dropped.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    keep = np.zeros(len(dataset), bool)
    keep[dataset.splits == "test"] = True
    for c in (1, 0):
        for si, split in enumerate(("train", "val")):
            members = np.flatnonzero((dataset.labels == c) & (dataset.splits == split))
            if len(members) == 0:
                continue
            n_keep = int(math.floor(fraction * len(members) + 0.5))
            perm = members[rng.derive(_STREAM_SUBSAMPLE, c, si).permutation(len(members))]
            keep[perm[:n_keep]] = True
    return dataset.subset(np.flatnonzero(keep))


def augment_training_split(dataset):
    """Append every distinct non-identity view of each train patch.

    Provenance links the copies back to their source row, which is what
    the leakage audit checks.  Run this only after splitting.
    """
    extra_patches = []
    extra_labels = []
    extra_prov = []
    for i in dataset.indices("train"):
        for view in augment(dataset.patches[i])[1:]:
            extra_patches.append(view)
            extra_labels.append(dataset.labels[i])
            extra_prov.append(f"augmented-from:{i}")
    if not extra_patches:
        return dataset
    return PatchDataset(
        np.concatenate([dataset.patches, np.stack(extra_patches)]),
        np.concatenate([dataset.labels, np.asarray(extra_labels, np.int8)]),
        np.concatenate([dataset.splits, np.full(len(extra_patches), "train", dtype="<U5")]),
        list(dataset.provenance) + extra_prov,
    )


def audit_augmentation_leakage(dataset):
    """Raise if any augmented view of a test patch sits in train/val."""
    for i, prov in enumerate(dataset.provenance):
        if prov.startswith("augmented-from:"):
            src = int(prov.split(":", 1)[1])
            if dataset.splits[src] == "test" and dataset.splits[i] != "test":
                raise ValueError(
                    f"augmented test patch {src} leaked into {dataset.splits[i]!r} (row {i})"
                )


def prefilter_kapt(dataset, kernel):
    """Replace every patch with its filtered view (labels/splits unchanged).

    This is the kernel-applied-prior-training transform: the filter runs
    over the whole dataset (all splits) so the model always sees filtered
    inputs.
    """
    kernel = np.asarray(kernel)
    out = np.empty_like(dataset.patches)
    for i in range(len(dataset)):
        out[i] = filters.apply_filter(dataset.patches[i], kernel)
    return PatchDataset(out, dataset.labels, dataset.splits.copy(), list(dataset.provenance))


def write_pgm(path, img, maxval=65535):
    """Binary PGM (P5), 16-bit big-endian by default; values from [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM wants a 2-d image, got shape {img.shape}")
    if not (0 < maxval < 65536):
        raise ValueError("maxval must be in 1..65535")
    require_finite(img, "image")
    q = np.clip(np.round(img.astype(np.float64) * maxval), 0, maxval)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    payload = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_pgm(path):
    """Read a binary PGM (8- or 16-bit) into float32 [0, 1]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    if data.size < count:
        raise ValueError(f"{path}: truncated PGM payload")
    img = (data.astype(np.float64) / maxval).reshape(height, width)
    return img.astype(DTYPE)


def save_dataset_pgm(dataset, root):
    """Write <root>/{gw,ngw}/*.pgm plus a splits.csv manifest."""
    root = Path(root)
    for sub in (GW, NGW):
        (root / sub).mkdir(parents=True, exist_ok=True)
    counters = {1: 0, 0: 0}
    names = []
    for i in range(len(dataset)):
        c = int(dataset.labels[i])
        label = GW if c == 1 else NGW
        name = f"{label}/{label}_{counters[c]:05d}.pgm"
        counters[c] += 1
        write_pgm(root / name, dataset.patches[i])
        names.append(name)
    with open(root / "splits.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "split"])
        for name, split in zip(names, dataset.splits):
            writer.writerow([name, split])
    return names


def load_dataset_pgm(root):
    """Load a dataset directory written by save_dataset_pgm.

    Directory names give the labels unless a labels.csv overrides them;
    splits.csv restores the split tags (missing file leaves them empty).
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset directory not found: {root}")
    names = []
    for sub in (GW, NGW):
        d = root / sub
        if d.is_dir():
            names.extend(sorted(f"{sub}/{p.name}" for p in d.glob("*.pgm")))
    if not names:
        raise ValueError(f"no PGM patches under {root}")

    label_override = {}
    labels_csv = root / "labels.csv"
    if labels_csv.exists():
        with open(labels_csv, newline="") as fh:
            for row in csv.DictReader(fh):
                label_override[row["filename"]] = label_to_int(row["label"])

    split_map = {}
    splits_csv = root / "splits.csv"
    if splits_csv.exists():
        with open(splits_csv, newline="") as fh:
            for row in csv.DictReader(fh):
                split_map[row["filename"]] = row["split"]

    patches = []
    labels = []
    splits = []
    provenance = []
    for name in names:
        img = read_pgm(root / name)
        if img.shape != (PATCH_SIZE, PATCH_SIZE):
            raise ValueError(f"{name}: patch is {img.shape}, expected {PATCH_SIZE}x{PATCH_SIZE}")
        patches.append(img)
        labels.append(label_override.get(name, label_to_int(name.split("/", 1)[0])))
        splits.append(split_map.get(name, ""))
        provenance.append(f"file:{name}")
    return PatchDataset(
        np.stack(patches),
        np.asarray(labels, np.int8),
        np.asarray(splits, dtype="<U5"),
        provenance,
    )
