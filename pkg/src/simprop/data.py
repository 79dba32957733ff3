"""Synthetic few-shot segmentation data.

Samples are textured-noise backgrounds with a single analytically rendered
shape (one shape family per class) as foreground. Images are stored as
binary PPM (P6), masks as bilevel PGM (P5), with a tab-separated manifest.
Generation derives one RNG stream per sample id from the master seed, so
the output tree is byte-identical at any thread count.
"""

from __future__ import annotations

import colorsys
import concurrent.futures
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SHAPE_NAMES = ("disk", "square", "triangle", "ring", "cross")


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 64
    n_classes: int = 5
    samples_per_class: int = 200
    train_classes: tuple[int, ...] = (0, 1, 2)
    test_classes: tuple[int, ...] = (3, 4)
    correlated_bg: bool = False
    noise_amp: float = 0.15
    noise_smooth: int = 8
    fg_noise_amp: float = 0.05
    scale_min: float = 0.22
    scale_max: float = 0.42
    max_retries: int = 50
    min_fg_frac: float = 0.03
    max_fg_frac: float = 0.60

    def __post_init__(self):
        object.__setattr__(self, "train_classes", tuple(self.train_classes))
        object.__setattr__(self, "test_classes", tuple(self.test_classes))
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.n_classes <= len(SHAPE_NAMES):
            raise ValueError(f"n_classes must be in [1,{len(SHAPE_NAMES)}]")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        train, test = set(self.train_classes), set(self.test_classes)
        if train & test:
            raise ValueError("train and test classes must be disjoint")
        if train | test != set(range(self.n_classes)):
            raise ValueError("train and test classes must cover all classes")
        if not 0.0 < self.scale_min <= self.scale_max < 0.5:
            raise ValueError("scale range must satisfy 0 < scale_min <= scale_max < 0.5")
        if not 0.0 < self.min_fg_frac < self.max_fg_frac < 1.0:
            raise ValueError("foreground fraction bounds must satisfy 0 < min < max < 1")

    def header_items(self) -> list[tuple[str, str]]:
        return [
            ("image_size", str(self.image_size)),
            ("n_classes", str(self.n_classes)),
            ("samples_per_class", str(self.samples_per_class)),
            ("train_classes", ",".join(map(str, self.train_classes))),
            ("test_classes", ",".join(map(str, self.test_classes))),
            ("correlated_bg", "true" if self.correlated_bg else "false"),
            ("noise_amp", repr(self.noise_amp)),
            ("noise_smooth", str(self.noise_smooth)),
            ("fg_noise_amp", repr(self.fg_noise_amp)),
            ("scale_min", repr(self.scale_min)),
            ("scale_max", repr(self.scale_max)),
            ("max_retries", str(self.max_retries)),
            ("min_fg_frac", repr(self.min_fg_frac)),
            ("max_fg_frac", repr(self.max_fg_frac)),
        ]

    @staticmethod
    def from_header(kv: dict[str, str]) -> "SyntheticConfig":
        def ints(s):
            return tuple(int(x) for x in s.split(",")) if s else ()

        return SyntheticConfig(
            image_size=int(kv["image_size"]),
            n_classes=int(kv["n_classes"]),
            samples_per_class=int(kv["samples_per_class"]),
            train_classes=ints(kv["train_classes"]),
            test_classes=ints(kv["test_classes"]),
            correlated_bg=kv["correlated_bg"] == "true",
            noise_amp=float(kv["noise_amp"]),
            noise_smooth=int(kv["noise_smooth"]),
            fg_noise_amp=float(kv["fg_noise_amp"]),
            scale_min=float(kv["scale_min"]),
            scale_max=float(kv["scale_max"]),
            max_retries=int(kv["max_retries"]),
            min_fg_frac=float(kv["min_fg_frac"]),
            max_fg_frac=float(kv["max_fg_frac"]),
        )


@dataclass
class ImageSample:
    image: np.ndarray  # (3,H,W) float32 in [0,1]
    mask: np.ndarray  # (H,W) uint8 in {0,1}
    class_id: int = -1
    sample_id: int = -1

    def validate(self) -> "ImageSample":
        img, mask = self.image, self.mask
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError(f"image must be (3,H,W), got {img.shape}")
        if mask.shape != img.shape[1:]:
            raise ValueError(f"mask shape {mask.shape} does not match image {img.shape[1:]}")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        n_fg = int(mask.sum())
        if n_fg == 0 or n_fg == mask.size:
            raise ValueError("mask must contain both foreground and background pixels")
        return self


@dataclass
class Episode:
    query: ImageSample
    supports: list[ImageSample]
    class_id: int

    def validate(self, allow_identical: bool = False) -> "Episode":
        if not self.supports:
            raise ValueError("episode needs at least one support")
        members = [self.query] + self.supports
        if any(s.class_id != self.class_id for s in members):
            raise ValueError("episode members must share the episode class")
        sids = [s.sample_id for s in self.supports]
        if len(set(sids)) != len(sids):
            raise ValueError("support sample ids must be distinct")
        if not allow_identical and self.query.sample_id in sids:
            raise ValueError("query must differ from every support")
        return self


@dataclass
class ManifestRecord:
    sample_id: int
    class_id: int
    image_path: str
    mask_path: str


@dataclass
class DatasetManifest:
    config: SyntheticConfig
    seed: int
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def by_class(self, class_id: int) -> list[ManifestRecord]:
        return [r for r in self.records if r.class_id == class_id]


# ---------------------------------------------------------------------------
# shape rendering
# ---------------------------------------------------------------------------


def _shape_indicator(name: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Boolean membership of rotated local coordinates (u,v) in the shape."""
    if name == "disk":
        return u * u + v * v <= r * r
    if name == "square":
        s = 0.82 * r
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if name == "triangle":
        rr = 1.2 * r
        angles = np.deg2rad([90.0, 210.0, 330.0])
        vx, vy = rr * np.cos(angles), rr * np.sin(angles)
        crosses = []
        for i in range(3):
            j = (i + 1) % 3
            crosses.append((u - vx[i]) * (vy[j] - vy[i]) - (v - vy[i]) * (vx[j] - vx[i]))
        pos = (crosses[0] >= 0) & (crosses[1] >= 0) & (crosses[2] >= 0)
        neg = (crosses[0] <= 0) & (crosses[1] <= 0) & (crosses[2] <= 0)
        return pos | neg
    if name == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if name == "cross":
        arm = 0.34 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    raise ValueError(f"unknown shape {name!r}")


def _place_shape(cfg: SyntheticConfig, class_id: int, rng: np.random.Generator) -> np.ndarray:
    """Sample position/scale/rotation until the mask respects the area bounds."""
    size = cfg.image_size
    yy, xx = np.meshgrid(
        np.arange(size, dtype=np.float32), np.arange(size, dtype=np.float32), indexing="ij"
    )
    name = SHAPE_NAMES[class_id]
    for _ in range(cfg.max_retries):
        r = rng.uniform(cfg.scale_min, cfg.scale_max) * size
        margin = 1.25 * r + 1.0  # triangle vertices reach 1.2*r
        if margin >= size - margin:
            continue
        cy = rng.uniform(margin, size - margin)
        cx = rng.uniform(margin, size - margin)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        u = cos_t * (xx - cx) + sin_t * (yy - cy)
        v = -sin_t * (xx - cx) + cos_t * (yy - cy)
        mask = _shape_indicator(name, u, v, r)
        frac = mask.mean()
        if cfg.min_fg_frac <= frac <= cfg.max_fg_frac:
            return mask
    raise ValueError(
        f"could not place a {name} within area bounds after {cfg.max_retries} retries"
    )


def _smooth_noise(size: int, window: int, rng: np.random.Generator) -> np.ndarray:
    """Box-blurred uniform noise, standardized to zero mean and unit std."""
    w = max(1, window)
    raw = rng.uniform(-1.0, 1.0, size=(size + w - 1, size + w - 1))
    # separable box filter via cumulative sums
    c = np.cumsum(raw, axis=0)
    rows = np.vstack([c[w - 1 : w], c[w:] - c[:-w]])
    c = np.cumsum(rows, axis=1)
    out = np.hstack([c[:, w - 1 : w], c[:, w:] - c[:, :-w]])
    out = out[:size, :size]
    std = out.std()
    if std < 1e-12:
        return np.zeros((size, size), dtype=np.float32)
    return ((out - out.mean()) / std).astype(np.float32)


def render_sample(cfg: SyntheticConfig, class_id: int, sample_id: int, seed: int) -> ImageSample:
    """Deterministically render one sample from the (seed, sample_id) stream."""
    rng = np.random.default_rng([seed, sample_id])
    mask = _place_shape(cfg, class_id, rng)
    size = cfg.image_size

    # Colors carry no class information: the class is the shape family alone.
    # Foregrounds draw a fresh saturated hue per sample, backgrounds stay
    # near-achromatic, so foreground statistics transfer across classes.
    if cfg.correlated_bg:
        tint = colorsys.hsv_to_rgb(
            rng.uniform(0.0, 1.0), rng.uniform(0.1, 0.3), rng.uniform(0.2, 0.45)
        )
        bg_base = np.asarray(tint, dtype=np.float32)
    else:
        gray = rng.uniform(0.15, 0.45)
        bg_base = (gray + rng.uniform(-0.03, 0.03, size=3)).astype(np.float32)
    texture = _smooth_noise(size, cfg.noise_smooth, rng)
    bg = bg_base[:, None, None] + np.float32(cfg.noise_amp) * texture[None]

    fg_color = np.asarray(
        colorsys.hsv_to_rgb(
            rng.uniform(0.0, 1.0), rng.uniform(0.5, 0.95), rng.uniform(0.4, 0.9)
        ),
        dtype=np.float32,
    )
    fg_noise = rng.uniform(-1.0, 1.0, size=(3, size, size)).astype(np.float32)
    fg = fg_color[:, None, None] + np.float32(cfg.fg_noise_amp) * fg_noise

    image = np.clip(np.where(mask[None], fg, bg), 0.0, 1.0).astype(np.float32)
    return ImageSample(
        image=image, mask=mask.astype(np.uint8), class_id=class_id, sample_id=sample_id
    ).validate()


# ---------------------------------------------------------------------------
# PPM / PGM I/O
# ---------------------------------------------------------------------------


def _parse_pnm(data: bytes, path) -> tuple[bytes, int, int, bytes]:
    if len(data) < 2 or data[0:1] != b"P":
        raise ValueError(f"{path}: not a PNM file")
    magic = data[0:2]
    pos = 2
    tokens: list[bytes] = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1] in b" \t\r\n":
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise ValueError(f"{path}: malformed header comment")
            pos = nl + 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # exactly one whitespace byte separates the header from the payload
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise ValueError(f"{path}: malformed header: {e}") from e
    if width <= 0 or height <= 0:
        raise ValueError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval} (must be 255)")
    return magic, width, height, data[pos:]


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 image as (3,H,W) float32 in [0,1]."""
    data = Path(path).read_bytes()
    magic, w, h, payload = _parse_pnm(data, path)
    if magic != b"P6":
        raise ValueError(f"{path}: expected P6, got {magic!r}")
    if len(payload) != 3 * w * h:
        raise ValueError(f"{path}: payload size {len(payload)} != {3 * w * h}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm: expected (3,H,W), got {image.shape}")
    if not np.isfinite(image).all() or image.min() < -1e-3 or image.max() > 1.0 + 1e-3:
        raise ValueError("write_ppm: image values must lie in [0,1]")
    h, w = image.shape[1:]
    bytes_img = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(bytes_img.transpose(1, 2, 0).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a bilevel P5 mask as (H,W) uint8 in {0,1}."""
    data = Path(path).read_bytes()
    magic, w, h, payload = _parse_pnm(data, path)
    if magic != b"P5":
        raise ValueError(f"{path}: expected P5, got {magic!r}")
    if len(payload) != w * h:
        raise ValueError(f"{path}: payload size {len(payload)} != {w * h}")
    values = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    if not np.isin(values, (0, 255)).all():
        raise ValueError(f"{path}: mask must be bilevel with values 0 or 255")
    return (values == 255).astype(np.uint8)


def write_pgm(path: str | Path, mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise ValueError(f"write_pgm: expected (H,W), got {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("write_pgm: mask values must be 0 or 1")
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((mask.astype(np.uint8) * 255).tobytes())


def save_sample(sample: ImageSample, image_path: str | Path, mask_path: str | Path) -> None:
    sample.validate()
    write_ppm(image_path, sample.image)
    write_pgm(mask_path, sample.mask)


def load_sample(
    image_path: str | Path, mask_path: str | Path, class_id: int = -1, sample_id: int = -1
) -> ImageSample:
    image = read_ppm(image_path)
    mask = read_pgm(mask_path)
    if mask.shape != image.shape[1:]:
        raise ValueError(
            f"size mismatch: image {image.shape[1:]} vs mask {mask.shape} "
            f"({image_path}, {mask_path})"
        )
    return ImageSample(image=image, mask=mask, class_id=class_id, sample_id=sample_id).validate()


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [f"{k}={v}\n" for k, v in manifest.config.header_items()]
    lines.append(f"seed={manifest.seed}\n")
    lines.append("\n")
    for r in manifest.records:
        lines.append(f"{r.sample_id}\t{r.class_id}\t{r.image_path}\t{r.mask_path}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    header, sep, body = text.partition("\n\n")
    if not sep:
        raise ValueError(f"{path}: manifest has no header separator")
    kv: dict[str, str] = {}
    for line in header.splitlines():
        key, eq, value = line.partition("=")
        if not eq:
            raise ValueError(f"{path}: malformed header line {line!r}")
        kv[key] = value
    try:
        seed = int(kv.pop("seed"))
        config = SyntheticConfig.from_header(kv)
    except (KeyError, ValueError) as e:
        raise ValueError(f"{path}: bad manifest header: {e}") from e
    records = []
    ids = set()
    for line in body.splitlines():
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}: malformed record {line!r}")
        rec = ManifestRecord(int(parts[0]), int(parts[1]), parts[2], parts[3])
        if rec.sample_id in ids:
            raise ValueError(f"{path}: duplicate sample id {rec.sample_id}")
        ids.add(rec.sample_id)
        records.append(rec)
    return DatasetManifest(config=config, seed=seed, records=records, root=path.parent)


def generate_dataset(
    config: SyntheticConfig, seed: int, out_dir: str | Path, threads: int = 1
) -> DatasetManifest:
    """Render and write the full dataset; byte-identical at any thread count."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    specs = []
    for class_id in range(config.n_classes):
        for i in range(config.samples_per_class):
            sample_id = class_id * config.samples_per_class + i
            stem = f"c{class_id}_s{i:04d}"
            specs.append((sample_id, class_id, f"images/{stem}.ppm", f"masks/{stem}.pgm"))

    def emit(spec):
        sample_id, class_id, img_rel, mask_rel = spec
        sample = render_sample(config, class_id, sample_id, seed)
        save_sample(sample, out / img_rel, out / mask_rel)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(emit, specs))
    else:
        for spec in specs:
            emit(spec)

    records = [ManifestRecord(*spec) for spec in specs]
    manifest = DatasetManifest(config=config, seed=seed, records=records, root=out)
    write_manifest(manifest, out / MANIFEST_NAME)
    return manifest


# ---------------------------------------------------------------------------
# episode sampling and augmentation
# ---------------------------------------------------------------------------


class EpisodeSampler:
    """Samples episodes from a class subset, caching loaded samples."""

    def __init__(self, manifest: DatasetManifest, class_set: Iterable[int]):
        self.classes = sorted(class_set)
        if not self.classes:
            raise ValueError("class_set must be nonempty")
        self.manifest = manifest
        self._by_class = {c: manifest.by_class(c) for c in self.classes}
        for c, recs in self._by_class.items():
            if not recs:
                raise ValueError(f"manifest has no samples for class {c}")
        self._cache: dict[int, ImageSample] = {}

    def records_for(self, class_id: int) -> list[ManifestRecord]:
        return self._by_class[class_id]

    def load(self, record: ManifestRecord) -> ImageSample:
        got = self._cache.get(record.sample_id)
        if got is None:
            got = load_sample(
                self.manifest.root / record.image_path,
                self.manifest.root / record.mask_path,
                class_id=record.class_id,
                sample_id=record.sample_id,
            )
            self._cache[record.sample_id] = got
        return got

    def sample(self, k: int, rng: np.random.Generator) -> Episode:
        if k < 1:
            raise ValueError("k must be at least 1")
        class_id = self.classes[int(rng.integers(len(self.classes)))]
        recs = self._by_class[class_id]
        if len(recs) < k + 1:
            raise ValueError(
                f"class {class_id} has {len(recs)} samples, episode needs {k + 1}"
            )
        picks = rng.choice(len(recs), size=k + 1, replace=False)
        query = self.load(recs[picks[0]])
        supports = [self.load(recs[i]) for i in picks[1:]]
        return Episode(query=query, supports=supports, class_id=class_id).validate()


def sample_episode(
    manifest: DatasetManifest, class_set: Iterable[int], k: int, rng: np.random.Generator
) -> Episode:
    return EpisodeSampler(manifest, class_set).sample(k, rng)


def ica_augment(
    image: np.ndarray, switch_prob: float, rng: np.random.Generator
) -> np.ndarray:
    """With probability switch_prob, replace all channels by their per-pixel mean.

    Operates on the [0,1] image; the per-channel mean commutes exactly with
    the scalar mean/std normalization applied inside the encoder, so this
    equals averaging the normalized channels.
    """
    if not 0.0 <= switch_prob <= 1.0:
        raise ValueError(f"switch_prob must be in [0,1], got {switch_prob}")
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"ica_augment: expected (3,H,W), got {image.shape}")
    if switch_prob == 0.0 or rng.random() >= switch_prob:
        return image
    mean = image.astype(np.float32).mean(axis=0, dtype=np.float32)
    return np.repeat(mean[None], 3, axis=0)


def switch_prob_schedule(epoch: int, p0: float = 0.25, half_life: int = 45) -> float:
    """Exponentially decaying switch probability: p0 * 2^(-epoch/half_life)."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if half_life <= 0:
        raise ValueError("half_life must be positive")
    return float(p0 * 2.0 ** (-epoch / half_life))
