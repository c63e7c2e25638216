"""Synthetic line-detection dataset: random segments (dense, dotted or
complex) on black 256x256 images, uniform intensity noise, Gaussian blur,
and the containing lines extended to the frame as ground truth.

On disk a dataset is a directory of 8-bit grayscale PNGs plus one JSON
record per sample and a manifest listing every record.  Generation is
deterministic: each sample draws from its own PCG64 stream whose seed is
derived from the master seed by a splitmix64 step, so any sample can be
regenerated in isolation and full reruns are byte-identical.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .geometry import BoundaryLine, clip_line_to_frame
from .kernels import draw_aa_segment
from .metrics import line_distance
from .ops import gaussian_blur

SCHEMA_VERSION = 1
KINDS = ("dense", "dotted", "complex")

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def sample_seed(master_seed: int, index: int) -> int:
    """splitmix64 finalizer of master_seed + (index+1)*golden-ratio step."""
    z = (master_seed + (index + 1) * _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class GenConfig:
    n: int = 256
    min_lines: int = 1
    max_lines: int = 5
    min_segment_frac: float = 0.25   # segment length >= frac * n
    line_merge_distance: float = 3.0  # resample lines closer than this
    noise_max: float = 0.25
    blur_sigma_max: float = 1.5
    period_range: tuple = (0.07, 0.25)
    duty_range: tuple = (0.6, 0.9)
    complex_subsegments: tuple = (2, 5)
    kinds: tuple = KINDS             # restrictable for fixtures/debugging
    max_attempts: int = 1000


@dataclass
class Segment:
    a: tuple
    b: tuple
    kind: str
    period_frac: float = None
    duty: float = None
    subsegments: list = None  # (t0, t1) fractions for complex segments


@dataclass
class Sample:
    image: np.ndarray
    gt_lines: list
    seed: int
    noise_amplitude: float = 0.0
    blur_sigma: float = 0.0
    segments: list = field(default_factory=list)


def _draw_sub(img, a, d, t0, t1):
    p = a + t0 * d
    q = a + t1 * d
    draw_aa_segment(img, p[0], p[1], q[0], q[1])


def _render_segment(img, seg: Segment):
    a = np.array(seg.a, dtype=np.float64)
    d = np.array(seg.b, dtype=np.float64) - a
    if seg.kind == "dense":
        _draw_sub(img, a, d, 0.0, 1.0)
    elif seg.kind == "dotted":
        t = seg.period_frac
        k = 0
        while k * t < 1.0:
            _draw_sub(img, a, d, k * t, min(k * t + seg.duty * t, 1.0))
            k += 1
    else:
        for t0, t1 in seg.subsegments:
            _draw_sub(img, a, d, t0, t1)


def _has_disjoint_pair(intervals) -> bool:
    for i in range(len(intervals)):
        for j in range(i + 1, len(intervals)):
            lo = max(intervals[i][0], intervals[j][0])
            hi = min(intervals[i][1], intervals[j][1])
            if lo > hi:
                return True
    return False


def generate_sample(rng: np.random.Generator, config: GenConfig = GenConfig(),
                    seed: int = 0) -> Sample:
    """One synthetic sample.  Draw order (fixed for reproducibility):
    line count; per segment: endpoint resampling, kind, kind parameters;
    then noise amplitude, the noise field, and the blur sigma."""
    n = config.n
    img = np.zeros((n, n))
    k = int(rng.integers(config.min_lines, config.max_lines + 1))
    min_len = config.min_segment_frac * n
    gt_lines, segments = [], []
    for _ in range(k):
        for _ in range(config.max_attempts):
            a = rng.uniform(0.0, n - 1, 2)
            b = rng.uniform(0.0, n - 1, 2)
            if float(np.hypot(*(b - a))) < min_len:
                continue
            bline = clip_line_to_frame(tuple(a), tuple(b), n)
            if bline is None:
                continue
            if any(line_distance(bline, g) <= config.line_merge_distance
                   for g in gt_lines):
                continue
            break
        else:
            raise RuntimeError(
                f"could not place segment after {config.max_attempts} attempts")
        kind = config.kinds[int(rng.integers(0, len(config.kinds)))]
        seg = Segment(tuple(a), tuple(b), kind)
        if kind == "dotted":
            seg.period_frac = float(rng.uniform(*config.period_range))
            seg.duty = float(rng.uniform(*config.duty_range))
        elif kind == "complex":
            m = int(rng.integers(config.complex_subsegments[0],
                                 config.complex_subsegments[1] + 1))
            for _ in range(config.max_attempts):
                ts = np.sort(rng.uniform(0.0, 1.0, (m, 2)), axis=1)
                if _has_disjoint_pair(ts):
                    break
            else:
                raise RuntimeError(
                    f"no disjoint complex subsegments after "
                    f"{config.max_attempts} attempts")
            seg.subsegments = [tuple(row) for row in ts]
        _render_segment(img, seg)
        gt_lines.append(bline)
        segments.append(seg)

    amp = float(rng.uniform(0.0, config.noise_max))
    img += rng.uniform(0.0, amp, (n, n))
    sigma = float(rng.uniform(0.0, config.blur_sigma_max))
    img = gaussian_blur(img, sigma, normalize=True, boundary="replicate")
    np.clip(img, 0.0, 1.0, out=img)
    return Sample(img, gt_lines, seed, amp, sigma, segments)


# ------------------------------------------------------------ persistence


@dataclass(frozen=True)
class SampleRecord:
    id: str
    split: str
    image: str
    lines: list
    noise_amplitude: float
    blur_sigma: float
    sample_seed: int

    def to_json(self) -> dict:
        return {"id": self.id, "split": self.split, "image": self.image,
                "lines": self.lines, "noise_amplitude": self.noise_amplitude,
                "blur_sigma": self.blur_sigma, "sample_seed": self.sample_seed}

    @classmethod
    def from_json(cls, d: dict) -> "SampleRecord":
        return cls(d["id"], d["split"], d["image"], d["lines"],
                   d["noise_amplitude"], d["blur_sigma"], d["sample_seed"])


@dataclass
class DatasetManifest:
    root: Path
    schema_version: int
    generator_version: str
    master_seed: int
    image_size: int
    records: list


def quantize_image(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_dataset(master_seed: int, out_dir, count: int = 1000,
                     split: tuple = (800, 200),
                     config: GenConfig = GenConfig(),
                     progress=None) -> DatasetManifest:
    """Generate `count` samples (first split[0] train, next split[1] test)
    under out_dir and write manifest.json.  Reruns with the same master
    seed and generator version are byte-identical."""
    if split[0] + split[1] != count:
        raise ValueError(f"split {split} does not sum to count {count}")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        seed = sample_seed(master_seed, i)
        rng = np.random.Generator(np.random.PCG64(seed))
        sample = generate_sample(rng, config, seed=seed)
        sid = f"sample_{i:05d}"
        tag = "train" if i < split[0] else "test"
        png_name = f"{sid}.png"
        rec = SampleRecord(sid, tag, png_name,
                           [g.to_list() for g in sample.gt_lines],
                           sample.noise_amplitude, sample.blur_sigma, seed)
        try:
            Image.fromarray(quantize_image(sample.image), mode="L").save(
                root / png_name)
            with open(root / f"{sid}.json", "w") as f:
                json.dump(rec.to_json(), f, sort_keys=True, indent=1)
        except OSError as e:
            raise OSError(f"failed writing sample {sid} under {root}: {e}") from e
        records.append(rec)
        if progress is not None:
            progress(i + 1, count)
    manifest = DatasetManifest(root, SCHEMA_VERSION, __version__,
                               master_seed, config.n, records)
    payload = {
        "schema_version": manifest.schema_version,
        "generator_version": manifest.generator_version,
        "master_seed": manifest.master_seed,
        "image_size": manifest.image_size,
        "records": [r.to_json() for r in records],
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
    return manifest


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        with open(path) as f:
            d = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest not found: {path}")
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt manifest {path}: {e}") from e
    if "schema_version" not in d:
        raise ValueError(f"manifest {path} lacks schema_version")
    return DatasetManifest(path.parent, d["schema_version"],
                           d["generator_version"], d["master_seed"],
                           d["image_size"],
                           [SampleRecord.from_json(r) for r in d["records"]])


def split_records(manifest: DatasetManifest, split: str) -> list:
    return [r for r in manifest.records if r.split == split]


def load_sample(manifest: DatasetManifest, record: SampleRecord) -> Sample:
    """Dequantized image plus ground-truth lines rebuilt exactly from the
    stored frame endpoints (never re-derived from pixels)."""
    png = manifest.root / record.image
    try:
        with Image.open(png) as im:
            arr = np.asarray(im)
    except FileNotFoundError:
        raise FileNotFoundError(f"sample image missing: {png}")
    except OSError as e:
        raise OSError(f"unreadable sample image {png}: {e}") from e
    n = manifest.image_size
    if arr.shape != (n, n):
        raise ValueError(f"{png}: image shape {arr.shape} != ({n}, {n})")
    image = arr.astype(np.float64) / 255.0
    lines = [BoundaryLine.from_list(v, n) for v in record.lines]
    return Sample(image, lines, record.sample_seed,
                  record.noise_amplitude, record.blur_sigma)
