"""Dataset handling for robotic-instrument video frames.

Covers the full path from raw frames to training tensors: canvas
cropping, per-instrument ground-truth encoding into task label maps,
normalization, flip augmentation, train/test splitting by sequence,
plain-text manifests, and a synthetic stand-in generator that mirrors
the on-disk layout of the real recordings so every downstream stage can
run without the proprietary data.

Label conventions
-----------------
Raw ground truth is one grayscale PNG per instrument, with pixel codes
0 (background), 10 (shaft), 20 (wrist), 30 (claspers).  Task label maps
are produced by :func:`encode_labels`:

  * ``binary``       0 background, 1 instrument
  * ``parts``        0 background, 1 shaft, 2 wrist, 3 claspers
  * ``instruments``  0 background, 1..7 instrument category

Where two instruments overlap, the lower non-zero category code wins.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import DataError

# Raw camera frames carry a black canvas border; the crop below removes it.
RAW_HEIGHT, RAW_WIDTH = 1080, 1920
CROP_TOP, CROP_LEFT = 28, 320
CROP_HEIGHT, CROP_WIDTH = 1024, 1280

# Grayscale codes used by the per-instrument ground-truth PNGs.
PART_CODES: dict[int, int] = {10: 1, 20: 2, 30: 3}  # shaft, wrist, claspers

# Instrument categories, in category-code order (code = index + 1).
INSTRUMENT_NAMES: tuple[str, ...] = (
    "bipolar_forceps",
    "prograsp_forceps",
    "large_needle_driver",
    "vessel_sealer",
    "grasping_retractor",
    "monopolar_curved_scissors",
    "other",
)

TRAIN_SEQUENCES: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
TEST_SEQUENCES: tuple[int, ...] = (7, 8)

TASK_NUM_CLASSES: dict[str, int] = {"binary": 2, "parts": 4, "instruments": 8}

_TASK_CLASS_NAMES: dict[str, tuple[str, ...]] = {
    "binary": ("background", "instrument"),
    "parts": ("background", "shaft", "wrist", "claspers"),
    "instruments": ("background",) + INSTRUMENT_NAMES,
}


@dataclass(frozen=True)
class TaskSpec:
    """One of the three segmentation tasks."""

    kind: str
    num_classes: int
    class_names: tuple[str, ...]

    @classmethod
    def from_kind(cls, kind: str) -> "TaskSpec":
        if kind not in TASK_NUM_CLASSES:
            raise DataError(f"unknown task {kind!r}; expected one of {sorted(TASK_NUM_CLASSES)}")
        return cls(kind=kind, num_classes=TASK_NUM_CLASSES[kind], class_names=_TASK_CLASS_NAMES[kind])

    @property
    def foreground_classes(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_classes))


@dataclass(frozen=True)
class Sample:
    """One frame plus its per-instrument ground-truth files."""

    frame_path: Path
    label_paths: tuple[Path, ...]
    sequence: int

    @property
    def instrument_names(self) -> tuple[str, ...]:
        return tuple(_instrument_dir_name(p) for p in self.label_paths)


@dataclass
class DatasetManifest:
    """Ordered list of samples for one task and split."""

    samples: list[Sample]
    task: TaskSpec
    split: str = "all"

    def __len__(self) -> int:
        return len(self.samples)


def instrument_category(name: str) -> int:
    """Map an instrument name (or its ground-truth folder name) to its category code 1..7.

    Matching is case-insensitive on a normalized form (spaces/hyphens to
    underscores, trailing ``_labels`` stripped), e.g. both
    ``"Bipolar_Forceps_labels"`` and ``"bipolar forceps"`` give 1.
    """
    norm = name.strip().lower().replace(" ", "_").replace("-", "_")
    if norm.endswith("_labels"):
        norm = norm[: -len("_labels")]
    norm = norm.strip("_")
    for i, known in enumerate(INSTRUMENT_NAMES):
        if known in norm or norm in known:
            return i + 1
    # "Other" is a catch-all bucket in the real annotations.
    if "other" in norm:
        return len(INSTRUMENT_NAMES)
    raise DataError(f"unknown instrument name {name!r}; known: {list(INSTRUMENT_NAMES)}")


def _instrument_dir_name(label_path: Path) -> str:
    return label_path.parent.name


def crop_canvas(frame: np.ndarray) -> np.ndarray:
    """Remove the black canvas border of a raw 1080x1920 frame.

    Keeps rows ``CROP_TOP..CROP_TOP+1023`` and columns
    ``CROP_LEFT..CROP_LEFT+1279``, yielding 1024x1280.  Arrays already at
    the cropped size pass through unchanged; anything else is rejected.
    Works for frames (H, W, C) and label maps (H, W) alike.
    """
    h, w = frame.shape[:2]
    if (h, w) == (CROP_HEIGHT, CROP_WIDTH):
        return frame
    if (h, w) != (RAW_HEIGHT, RAW_WIDTH):
        raise DataError(
            f"expected {RAW_HEIGHT}x{RAW_WIDTH} raw or {CROP_HEIGHT}x{CROP_WIDTH} cropped frame, got {h}x{w}"
        )
    return frame[CROP_TOP : CROP_TOP + CROP_HEIGHT, CROP_LEFT : CROP_LEFT + CROP_WIDTH]


def load_frame(path: str | Path) -> np.ndarray:
    """Load an RGB frame as uint8 (H, W, 3)."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read frame {path}: {exc}") from exc


def load_raw_label(path: str | Path) -> np.ndarray:
    """Load a per-instrument ground-truth PNG as uint8 (H, W)."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read label {path}: {exc}") from exc
    return arr


def encode_labels(raw: Mapping[str, np.ndarray], task: TaskSpec) -> np.ndarray:
    """Combine per-instrument part-code masks into one task label map.

    ``raw`` maps instrument name -> (H, W) array of part codes
    {0, 10, 20, 30}.  All masks must share one shape.  Overlaps between
    instruments resolve to the lower category code; within one
    instrument the per-pixel part code is taken as stored.
    """
    if not raw:
        raise DataError("encode_labels needs at least one instrument mask")
    shapes = {arr.shape for arr in raw.values()}
    if len(shapes) != 1:
        raise DataError(f"instrument masks disagree on shape: {sorted(shapes)}")
    (shape,) = shapes
    if len(shape) != 2:
        raise DataError(f"instrument masks must be 2-D, got shape {shape}")

    by_category: list[tuple[int, np.ndarray]] = []
    for name, arr in raw.items():
        codes = np.unique(arr)
        bad = [int(c) for c in codes if c != 0 and int(c) not in PART_CODES]
        if bad:
            raise DataError(f"instrument {name!r} uses unknown part codes {bad}; expected 0/10/20/30")
        by_category.append((instrument_category(name), arr))

    out = np.zeros(shape, dtype=np.uint8)
    # Paint in decreasing category order so the lowest code wins overlaps.
    for category, arr in sorted(by_category, key=lambda t: -t[0]):
        fg = arr > 0
        if task.kind == "binary":
            out[fg] = 1
        elif task.kind == "instruments":
            out[fg] = category
        else:  # parts
            for code, part in PART_CODES.items():
                out[arr == code] = part
    return out


def load_label(sample: Sample, task: TaskSpec, crop: bool = True) -> np.ndarray:
    """Load and encode the task label map for one sample.

    A sample without ground-truth files yields an all-background map the
    size of its frame.
    """
    if not sample.label_paths:
        frame = load_frame(sample.frame_path)
        frame = crop_canvas(frame) if crop else frame
        return np.zeros(frame.shape[:2], dtype=np.uint8)
    raw = {_instrument_dir_name(p): load_raw_label(p) for p in sample.label_paths}
    if crop:
        raw = {k: crop_canvas(v) for k, v in raw.items()}
    return encode_labels(raw, task)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def compute_channel_means(manifest: DatasetManifest) -> np.ndarray:
    """Mean of each RGB channel over all frames of ``manifest``, on the 0..1 scale.

    Raw-size frames are canvas-cropped first; anything else contributes
    as-is.  Meant to be computed on the training split only and reused
    verbatim at evaluation time.
    """
    if not manifest.samples:
        raise DataError("cannot compute channel means of an empty manifest")
    totals = np.zeros(3, dtype=np.float64)
    count = 0
    for sample in manifest.samples:
        frame = load_frame(sample.frame_path)
        if frame.shape[:2] == (RAW_HEIGHT, RAW_WIDTH):
            frame = crop_canvas(frame)
        totals += frame.reshape(-1, 3).sum(axis=0, dtype=np.float64)
        count += frame.shape[0] * frame.shape[1]
    return totals / (count * 255.0)


def normalize(frame: np.ndarray, channel_means: np.ndarray) -> np.ndarray:
    """Scale a uint8 RGB frame to 0..1 and subtract the per-channel means."""
    means = np.asarray(channel_means, dtype=np.float32)
    if means.shape != (3,):
        raise DataError(f"channel_means must have shape (3,), got {means.shape}")
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DataError(f"expected (H, W, 3) frame, got shape {frame.shape}")
    if frame.dtype == np.uint8:
        scaled = frame.astype(np.float32) / 255.0
    elif np.issubdtype(frame.dtype, np.floating):
        scaled = frame.astype(np.float32)  # assumed already on the 0..1 scale
    else:
        raise DataError(f"unsupported frame dtype {frame.dtype}")
    return scaled - means


def save_channel_means(path: str | Path, means: np.ndarray) -> None:
    """Persist channel means as one float per line, full precision."""
    means = np.asarray(means, dtype=np.float64)
    Path(path).write_text("".join(f"{float(v)!r}\n" for v in means))


def load_channel_means(path: str | Path) -> np.ndarray:
    try:
        values = [float(line) for line in Path(path).read_text().split()]
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read channel means {path}: {exc}") from exc
    if len(values) != 3:
        raise DataError(f"channel means file {path} holds {len(values)} values, expected 3")
    return np.asarray(values, dtype=np.float64)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    """Stochastic training-time transforms; only flips are on by default."""

    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    brightness_prob: float = 0.0
    brightness_range: tuple[float, float] = (0.85, 1.15)
    blur_prob: float = 0.0
    blur_sigma: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self) -> None:
        for name in ("hflip_prob", "vflip_prob", "brightness_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise DataError(f"{name}={p} outside [0, 1]")


def hflip(frame: np.ndarray, label: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror frame and label left-right, keeping them aligned."""
    return np.ascontiguousarray(frame[:, ::-1]), np.ascontiguousarray(label[:, ::-1])


def vflip(frame: np.ndarray, label: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror frame and label top-bottom, keeping them aligned."""
    return np.ascontiguousarray(frame[::-1]), np.ascontiguousarray(label[::-1])


def sample_seed(global_seed: int, epoch: int, index: int) -> tuple[int, int, int]:
    """Seed material for one sample's augmentation draw.

    Purely a function of its arguments, so any (seed, epoch, index)
    triple reproduces the same transforms on any machine.
    """
    return (global_seed, epoch, index)


def augment(
    frame: np.ndarray,
    label: np.ndarray,
    seed: int | Sequence[int],
    config: AugmentConfig = AugmentConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the configured random transforms to an aligned frame/label pair.

    Operates on the uint8 frame (before normalization).  Geometric
    transforms hit frame and label identically; photometric ones leave
    the label untouched.
    """
    if frame.shape[:2] != label.shape[:2]:
        raise DataError(f"frame {frame.shape} and label {label.shape} disagree on spatial size")
    rng = np.random.default_rng(seed)
    if rng.random() < config.hflip_prob:
        frame, label = hflip(frame, label)
    if rng.random() < config.vflip_prob:
        frame, label = vflip(frame, label)
    if config.brightness_prob and rng.random() < config.brightness_prob:
        lo, hi = config.brightness_range
        gain = rng.uniform(lo, hi)
        frame = np.clip(frame.astype(np.float32) * gain, 0, 255).astype(np.uint8)
    if config.blur_prob and rng.random() < config.blur_prob:
        from scipy.ndimage import gaussian_filter

        lo, hi = config.blur_sigma
        sigma = rng.uniform(lo, hi)
        frame = gaussian_filter(frame, sigma=(sigma, sigma, 0))
    return frame, label


def downsample_labels(label: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor label downsampling: keep every ``factor``-th pixel.

    Anchored at the top-left corner, i.e. ``label[::factor, ::factor]``,
    so a 2x downsample of a checkerboard keeps its even-index values.
    """
    if factor < 1 or factor & (factor - 1):
        raise DataError(f"downsample factor must be a positive power of two, got {factor}")
    h, w = label.shape[:2]
    if h % factor or w % factor:
        raise DataError(f"label size {h}x{w} not divisible by factor {factor}")
    return np.ascontiguousarray(label[::factor, ::factor])


# ---------------------------------------------------------------------------
# Dataset layout, splits, manifests
# ---------------------------------------------------------------------------

_SEQUENCE_PREFIX = "instrument_dataset_"


def scan_dataset(root: str | Path, task: TaskSpec | str = "binary") -> DatasetManifest:
    """Walk ``root`` for ``instrument_dataset_<k>`` sequences and index their frames.

    Each frame in ``left_frames/`` is paired with the equally-named file
    in every ``ground_truth/*_labels`` folder that has one.
    """
    if isinstance(task, str):
        task = TaskSpec.from_kind(task)
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    samples: list[Sample] = []
    seq_dirs = sorted(
        (d for d in root.iterdir() if d.is_dir() and d.name.startswith(_SEQUENCE_PREFIX)),
        key=lambda d: d.name,
    )
    if not seq_dirs:
        raise DataError(f"no {_SEQUENCE_PREFIX}<k> directories under {root}")
    for seq_dir in seq_dirs:
        try:
            sequence = int(seq_dir.name[len(_SEQUENCE_PREFIX) :])
        except ValueError as exc:
            raise DataError(f"cannot parse sequence number from {seq_dir.name!r}") from exc
        frames_dir = seq_dir / "left_frames"
        if not frames_dir.is_dir():
            raise DataError(f"{seq_dir} has no left_frames/ directory")
        label_dirs = sorted((seq_dir / "ground_truth").glob("*_labels")) if (seq_dir / "ground_truth").is_dir() else []
        for frame_path in sorted(frames_dir.glob("*.png")):
            label_paths = tuple(d / frame_path.name for d in label_dirs if (d / frame_path.name).is_file())
            samples.append(Sample(frame_path=frame_path, label_paths=label_paths, sequence=sequence))
    return DatasetManifest(samples=samples, task=task, split="all")


def split_train_test(
    manifest: DatasetManifest, require_sequences: Iterable[int] | None = None
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split by sequence number: 1..6 train, everything above test.

    ``require_sequences`` optionally asserts that specific sequences are
    present (e.g. ``range(1, 9)`` for the full eight-sequence corpus).
    """
    present = {s.sequence for s in manifest.samples}
    if require_sequences is not None:
        missing = sorted(set(require_sequences) - present)
        if missing:
            raise DataError(f"dataset is missing sequences {missing}; found {sorted(present)}")
    train = [s for s in manifest.samples if s.sequence <= max(TRAIN_SEQUENCES)]
    test = [s for s in manifest.samples if s.sequence > max(TRAIN_SEQUENCES)]
    return (
        DatasetManifest(samples=train, task=manifest.task, split="train"),
        DatasetManifest(samples=test, task=manifest.task, split="test"),
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest as tab-separated text, paths relative to the file."""
    path = Path(path)
    base = path.parent.resolve()
    lines = [f"# surgseg manifest v1\ttask={manifest.task.kind}\tsplit={manifest.split}"]
    for s in manifest.samples:
        frame = _relpath(s.frame_path, base)
        labels = ",".join(_relpath(p, base) for p in s.label_paths)
        lines.append(f"{frame}\t{labels}\t{s.sequence}")
    path.write_text("\n".join(lines) + "\n")


def _relpath(p: Path, base: Path) -> str:
    try:
        return Path(p).resolve().relative_to(base).as_posix()
    except ValueError:
        return Path(p).resolve().as_posix()


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a manifest written by :func:`save_manifest`."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not lines or not lines[0].startswith("# surgseg manifest v1"):
        raise DataError(f"{path} is not a surgseg manifest")
    fields = dict(part.split("=", 1) for part in lines[0].split("\t")[1:])
    task = TaskSpec.from_kind(fields.get("task", "binary"))
    split = fields.get("split", "all")
    base = path.parent.resolve()
    samples: list[Sample] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        frame_rel, labels_rel, seq_str = parts
        labels = tuple(base / rel for rel in labels_rel.split(",") if rel)
        try:
            sequence = int(seq_str)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad sequence number {seq_str!r}") from exc
        samples.append(Sample(frame_path=base / frame_rel, label_paths=labels, sequence=sequence))
    return DatasetManifest(samples=samples, task=task, split=split)


# ---------------------------------------------------------------------------
# Synthetic stand-in data
# ---------------------------------------------------------------------------


def _rotated_box_mask(rr: np.ndarray, cc: np.ndarray, center: np.ndarray, direction: np.ndarray, length: float, width: float) -> np.ndarray:
    """Pixels within a ``length`` x ``width`` box starting at ``center`` along ``direction``."""
    dr, dc = rr - center[0], cc - center[1]
    along = dr * direction[0] + dc * direction[1]
    across = -dr * direction[1] + dc * direction[0]
    return (along >= 0) & (along <= length) & (np.abs(across) <= width / 2)


def _ellipse_mask(rr: np.ndarray, cc: np.ndarray, center: np.ndarray, direction: np.ndarray, a: float, b: float) -> np.ndarray:
    dr, dc = rr - center[0], cc - center[1]
    along = dr * direction[0] + dc * direction[1]
    across = -dr * direction[1] + dc * direction[0]
    return (along / a) ** 2 + (across / b) ** 2 <= 1.0


def _triangle_mask(rr: np.ndarray, cc: np.ndarray, p0: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Point-in-triangle via consistent edge cross-product signs."""

    def edge(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return (b[0] - a[0]) * (cc - a[1]) - (b[1] - a[1]) * (rr - a[0])

    e0, e1, e2 = edge(p0, p1), edge(p1, p2), edge(p2, p0)
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


def _draw_instrument(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Part-code mask {0,10,20,30} for one synthetic instrument.

    A fat shaft enters from a random border, capped by an elliptical
    wrist and a triangular clasper tip.  Shapes are deliberately large
    relative to the frame so coarse downsampling keeps them intact.
    """
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = min(h, w)
    side = rng.integers(0, 4)  # 0 top, 1 bottom, 2 left, 3 right
    # Entry point along the chosen border, away from corners.
    t = rng.uniform(0.25, 0.75)
    if side == 0:
        start, inward = np.array([0.0, t * w]), np.array([1.0, 0.0])
    elif side == 1:
        start, inward = np.array([h - 1.0, t * w]), np.array([-1.0, 0.0])
    elif side == 2:
        start, inward = np.array([t * h, 0.0]), np.array([0.0, 1.0])
    else:
        start, inward = np.array([t * h, w - 1.0]), np.array([0.0, -1.0])
    angle = rng.uniform(-0.4, 0.4)
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    direction = np.array(
        [inward[0] * cos_a - inward[1] * sin_a, inward[0] * sin_a + inward[1] * cos_a]
    )
    direction /= np.linalg.norm(direction)
    normal = np.array([-direction[1], direction[0]])

    # Kept deliberately fat: thin structures would be wiped out by the
    # 1/16-scale label subsampling that supervises the auxiliary head.
    shaft_len = rng.uniform(0.5, 0.68) * scale
    shaft_width = rng.uniform(0.24, 0.32) * scale
    wrist_a = rng.uniform(0.14, 0.18) * scale  # along the axis
    wrist_b = shaft_width * rng.uniform(0.6, 0.78)
    wrist_center = start + direction * (shaft_len + wrist_a * 0.4)
    tip = wrist_center + direction * rng.uniform(0.28, 0.36) * scale
    base_half = rng.uniform(0.12, 0.16) * scale

    mask = np.zeros((h, w), dtype=np.uint8)
    mask[_rotated_box_mask(rr, cc, start, direction, shaft_len, shaft_width)] = 10
    mask[_ellipse_mask(rr, cc, wrist_center, direction, wrist_a, wrist_b)] = 20
    p1 = wrist_center + normal * base_half
    p2 = wrist_center - normal * base_half
    mask[_triangle_mask(rr, cc, tip, p1, p2)] = 30
    return mask


def _render_frame(rng: np.random.Generator, masks: dict[str, np.ndarray], h: int, w: int) -> np.ndarray:
    """Render a plausible RGB frame: tissue-toned background, metallic tools."""
    # Low-frequency reddish background, upsampled from a coarse noise grid.
    gh, gw = max(h // 32, 1), max(w // 32, 1)
    coarse = rng.uniform(40.0, 110.0, size=(gh, gw, 3))
    coarse[..., 0] += 45.0  # red-dominant tissue tone
    reps_h, reps_w = -(-h // gh), -(-w // gw)
    frame = np.kron(coarse, np.ones((reps_h, reps_w, 1)))[:h, :w, :]
    frame += rng.uniform(-8.0, 8.0, size=(h, w, 3))

    rr, cc = np.mgrid[0:h, 0:w]
    for i, (_, mask) in enumerate(sorted(masks.items())):
        fg = mask > 0
        if not fg.any():
            continue
        base = rng.uniform(150.0, 205.0)
        # Gentle diagonal shading so the tool is not a flat blob.
        shading = 18.0 * np.sin((rr[fg] + cc[fg]) / (0.15 * min(h, w)) + i)
        tone = base + shading
        tone = tone + np.where(mask[fg] == 20, -18.0, 0.0) + np.where(mask[fg] == 30, 14.0, 0.0)
        for ch, tint in enumerate((1.0, 1.02, 1.05)):  # faintly blue-gray metal
            frame[..., ch][fg] = tone * tint
    frame += rng.uniform(-4.0, 4.0, size=(h, w, 3))
    return np.clip(frame, 0, 255).astype(np.uint8)


def generate_synthetic(
    root: str | Path,
    n: int,
    task: TaskSpec | str = "binary",
    seed: int = 0,
    frame_size: tuple[int, int] = (256, 320),
    sequences: Sequence[int] = (1,),
    max_instruments: int = 2,
) -> DatasetManifest:
    """Write ``n`` synthetic samples under ``root`` in the real on-disk layout.

    Each sample ``i`` is drawn from its own ``default_rng((seed, seq, i))``
    stream, so regeneration with the same arguments is byte-identical
    regardless of how many samples were produced before it.  Frame sizes
    must be multiples of 32 to match the network's stride contract.
    """
    if isinstance(task, str):
        task = TaskSpec.from_kind(task)
    h, w = frame_size
    if h % 32 or w % 32 or h <= 0 or w <= 0:
        raise DataError(f"synthetic frame size {h}x{w} must be positive multiples of 32")
    if n < 0:
        raise DataError(f"cannot generate {n} samples")
    if not sequences:
        raise DataError("need at least one sequence number")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    samples: list[Sample] = []
    per_seq_counter: dict[int, int] = {}
    for i in range(n):
        seq = int(sequences[i % len(sequences)])
        idx = per_seq_counter.get(seq, 0)
        per_seq_counter[seq] = idx + 1
        rng = np.random.default_rng((seed, seq, idx))

        n_instr = int(rng.integers(1, max_instruments + 1))
        categories = rng.choice(len(INSTRUMENT_NAMES), size=n_instr, replace=False)
        masks = {INSTRUMENT_NAMES[c]: _draw_instrument(rng, h, w) for c in sorted(categories)}
        frame = _render_frame(rng, masks, h, w)

        seq_dir = root / f"{_SEQUENCE_PREFIX}{seq}"
        frames_dir = seq_dir / "left_frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        frame_name = f"frame{idx:03d}.png"
        frame_path = frames_dir / frame_name
        Image.fromarray(frame).save(frame_path)

        label_paths = []
        for name, mask in masks.items():
            label_dir = seq_dir / "ground_truth" / f"{name}_labels"
            label_dir.mkdir(parents=True, exist_ok=True)
            label_path = label_dir / frame_name
            Image.fromarray(mask).save(label_path)
            label_paths.append(label_path)
        samples.append(Sample(frame_path=frame_path, label_paths=tuple(label_paths), sequence=seq))
    # Same ordering scan_dataset would produce, so rescanning is a no-op.
    samples.sort(key=lambda s: (s.sequence, s.frame_path.name))
    return DatasetManifest(samples=samples, task=task, split="all")


# ---------------------------------------------------------------------------
# Prediction output
# ---------------------------------------------------------------------------

# One color per class index; background stays unpainted in overlays.
PALETTE: tuple[tuple[int, int, int], ...] = (
    (0, 0, 0),
    (0, 255, 255),
    (255, 170, 0),
    (170, 0, 255),
    (0, 255, 0),
    (255, 0, 128),
    (0, 128, 255),
    (255, 255, 0),
)


def save_prediction(pred: np.ndarray, path: str | Path) -> None:
    """Write a predicted label map as a grayscale PNG of class indices."""
    if pred.ndim != 2:
        raise DataError(f"prediction must be 2-D, got shape {pred.shape}")
    Image.fromarray(pred.astype(np.uint8)).save(path)


def overlay_prediction(frame: np.ndarray, pred: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend class colors over the frame on foreground pixels only."""
    if frame.shape[:2] != pred.shape:
        raise DataError(f"frame {frame.shape[:2]} and prediction {pred.shape} disagree on size")
    if int(pred.max(initial=0)) >= len(PALETTE):
        raise DataError(f"class index {int(pred.max())} has no palette entry")
    colors = np.asarray(PALETTE, dtype=np.float32)[pred.astype(np.int64)]
    out = frame.astype(np.float32)
    fg = pred > 0
    out[fg] = (1.0 - alpha) * out[fg] + alpha * colors[fg]
    return np.clip(out, 0, 255).astype(np.uint8)
