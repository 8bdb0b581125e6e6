"""Synthetic paired fMRI / video / caption data, subject splits, batching,
and the on-disk dataset layout.

On-disk layout::

    root/manifest.json        dims, subjects, class vocabulary, one row per sample
    root/fmri/<id>.bin        voxel series (X, Y, Z, T)
    root/video/<id>.bin       frames (F, H, W, channels)

Each ``.bin`` file is a 16-byte little-endian header followed by the raw
C-ordered values::

    bytes 0-3    magic  b"FMRT"
    byte  4      dtype code  (1 = float32, 2 = float64)
    byte  5      rank (1..5)
    bytes 6-15   five uint16 dims; unused trailing dims are 0
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from fmri2text.numerics import ValidationError, derive_rng

log = logging.getLogger(__name__)

CANONICAL_INSTRUCTION = "What is the main thing happening in the video?"

# instruction -> caption pattern; the action phrase fills {action}
CAPTION_TEMPLATES: dict[str, str] = {
    CANONICAL_INSTRUCTION: "In the video, a person is {action}.",
    "Describe the video.": "The video shows a person {action}.",
    "What is the person doing?": "The person is {action}.",
    "Summarize the action in the video.": "A person is {action} in the video.",
}

ACTIONS = [
    "playing squash", "getting a haircut", "riding a bicycle", "swimming in a pool",
    "playing the guitar", "cooking in a kitchen", "walking a dog", "playing basketball",
    "jumping rope", "brushing teeth", "reading a book", "climbing a wall",
    "dancing on a stage", "typing on a keyboard", "painting a fence", "throwing a frisbee",
]


@dataclass
class InstructionSet:
    instructions: list[str] = field(default_factory=lambda: list(CAPTION_TEMPLATES))

    def __post_init__(self):
        if not self.instructions:
            raise ValidationError("instruction set is empty")
        if CANONICAL_INSTRUCTION not in self.instructions:
            raise ValidationError(f"instruction set must contain {CANONICAL_INSTRUCTION!r}")

    def __len__(self):
        return len(self.instructions)

    def __getitem__(self, i):
        return self.instructions[i]


# ---------------------------------------------------------------------------
# domain types

@dataclass
class FmriVolumeSeries:
    voxels: np.ndarray  # (X, Y, Z, T)
    subject_id: str
    class_id: int


@dataclass
class VideoClip:
    frames: np.ndarray  # (F, H, W, channels)
    class_id: int

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValidationError("a video clip needs frames shaped (F>=1, H, W, channels)")


@dataclass
class Sample:
    fmri: FmriVolumeSeries
    video: VideoClip
    caption: str
    instruction: str = CANONICAL_INSTRUCTION

    def __post_init__(self):
        if self.fmri.class_id != self.video.class_id:
            raise ValidationError("fMRI and video of a sample must share the stimulus class")


class LabelLeakError(RuntimeError):
    pass


class AccessAudit:
    """Records every read of labels/videos/captions of protected samples."""

    def __init__(self):
        self.protected: set[int] = set()
        self.violations: list[tuple[str, tuple[int, ...]]] = []
        self.strict = False

    def check(self, what: str, idx: np.ndarray) -> None:
        if not self.protected:
            return
        hit = tuple(int(i) for i in np.atleast_1d(idx) if int(i) in self.protected)
        if hit:
            self.violations.append((what, hit))
            if self.strict:
                raise LabelLeakError(f"{what} of protected target samples {hit[:5]} read")

    @property
    def clean(self) -> bool:
        return not self.violations


class Dataset:
    """Array-backed collection of samples.

    Labels, videos and captions are only reachable through accessor methods so
    that reads of protected (target adaptation) samples are audited.
    """

    def __init__(self, fmri: np.ndarray, video: np.ndarray, subjects: Sequence[str], class_ids: Sequence[int],
                 class_names: Sequence[str], captions: Sequence[str] | None = None):
        self._fmri = np.ascontiguousarray(fmri, dtype=np.float32)
        self._video = np.ascontiguousarray(video, dtype=np.float32)
        self._subjects = np.asarray(list(subjects), dtype=object)
        self._labels = np.asarray(class_ids, dtype=np.int64)
        self.class_names = list(class_names)
        if captions is None:
            captions = [caption_for(self.class_names[c]) for c in self._labels]
        self._captions = list(captions)
        n = len(self._labels)
        if not (len(self._fmri) == len(self._video) == len(self._subjects) == len(self._captions) == n):
            raise ValidationError("per-sample arrays have inconsistent lengths")
        if n and (self._labels.min() < 0 or self._labels.max() >= len(self.class_names)):
            raise ValidationError("class id outside the declared class vocabulary")
        self.audit = AccessAudit()

    def __len__(self) -> int:
        return len(self._labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(self._fmri.shape[1:4])

    @property
    def frames_T(self) -> int:
        return self._fmri.shape[4]

    @property
    def video_shape(self) -> tuple[int, int, int, int]:
        return tuple(self._video.shape[1:])

    @property
    def subject_ids(self) -> list[str]:
        return sorted(set(self._subjects.tolist()))

    def fmri(self, idx) -> np.ndarray:
        return self._fmri[idx]

    def subjects(self, idx=slice(None)) -> np.ndarray:
        return self._subjects[idx]

    def videos(self, idx) -> np.ndarray:
        self.audit.check("video", np.arange(len(self))[idx])
        return self._video[idx]

    def labels(self, idx) -> np.ndarray:
        self.audit.check("class_id", np.arange(len(self))[idx])
        return self._labels[idx]

    def captions(self, idx) -> list[str]:
        ids = np.atleast_1d(np.arange(len(self))[idx])
        self.audit.check("caption", ids)
        return [self._captions[i] for i in ids]

    def sample(self, i: int) -> Sample:
        c = int(self.labels(i))
        return Sample(FmriVolumeSeries(self._fmri[i], str(self._subjects[i]), c),
                      VideoClip(self.videos(i), c), self.captions(i)[0])

    def protect(self, indices) -> None:
        self.audit.protected.update(int(i) for i in indices)

    def equals(self, other: "Dataset") -> bool:
        return (np.array_equal(self._fmri, other._fmri) and np.array_equal(self._video, other._video)
                and self._subjects.tolist() == other._subjects.tolist()
                and np.array_equal(self._labels, other._labels)
                and self.class_names == other.class_names and self._captions == other._captions)


def caption_for(action: str, instruction: str = CANONICAL_INSTRUCTION) -> str:
    try:
        return CAPTION_TEMPLATES[instruction].format(action=action)
    except KeyError:
        raise ValidationError(f"no caption template for instruction {instruction!r}") from None


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class SyntheticConfig:
    n_subjects: int = 4
    samples_per_subject: int = 256
    n_classes: int = 8
    grid: tuple[int, int, int] = (16, 16, 16)
    frames_T: int = 4
    video_frames: int = 4
    video_size: int = 32
    video_channels: int = 3
    noise: float = 0.1
    stimulus_jitter: float = 0.5
    nuisance: float = 3.0
    video_noise: float = 0.05

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.n_classes > len(ACTIONS):
            raise ValidationError(f"{self.n_classes} classes requested but only {len(ACTIONS)} caption templates exist")
        if min(self.grid) < 8:
            raise ValidationError("every grid dimension must be >= 8")
        if self.n_subjects < 2:
            raise ValidationError("need at least 2 subjects")
        if self.samples_per_subject < 1 or self.frames_T < 1 or self.video_frames < 1:
            raise ValidationError("sample, frame and time counts must be positive")


def _smooth_field(rng: np.random.Generator, shape, sigma) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return (f - f.mean()) / f.std()


def _grating(shape, theta: float, freq: float, speed: float, color: np.ndarray) -> np.ndarray:
    F_, H, W, C = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, H, endpoint=False), np.linspace(0, 1, W, endpoint=False), indexing="ij")
    out = np.empty(shape)
    for f in range(F_):
        phase = 2 * np.pi * (freq * (np.cos(theta) * xx + np.sin(theta) * yy) + speed * f / F_)
        out[f] = np.sin(phase)[..., None] * color[None, None, :]
    return out


def generate_synthetic_dataset(cfg: SyntheticConfig, seed: int) -> Dataset:
    """Deterministic synthetic corpus.

    Each class owns two smooth spatio-temporal voxel signatures and two moving
    gratings. A sample mixes its class pair with a per-sample angle (shared by
    both modalities). Each subject applies a gain, a smooth additive offset
    field and an integer spatial shift, all scaled by ``cfg.nuisance``;
    voxel noise is added last.
    """
    cfg.validate()
    X, Y, Z = cfg.grid
    T, C = cfg.frames_T, cfg.n_classes
    vshape = (cfg.video_frames, cfg.video_size, cfg.video_size, cfg.video_channels)

    rng = derive_rng(seed, "synthetic", "classes")
    sig = np.stack([[_smooth_field(rng, (X, Y, Z, T), (2.0, 2.0, 2.0, 0)) for _ in range(2)] for _ in range(C)])
    grat = np.empty((C, 2) + vshape)
    for c in range(C):
        theta = np.pi * c / C
        freq = 1.5 + 1.5 * rng.random()
        speed = (c % 3) - 1 + 0.5 * rng.random()
        color = rng.uniform(0.3, 1.0, size=cfg.video_channels)
        grat[c, 0] = _grating(vshape, theta, freq, speed, color)
        grat[c, 1] = _grating(vshape, theta + np.pi / 2, freq * 1.5, -speed, color[::-1].copy())

    fmri, video, subjects, labels = [], [], [], []
    for s in range(cfg.n_subjects):
        sid = f"sub-{s + 1:02d}"
        srng = derive_rng(seed, "synthetic", "subject", s)
        gain = 1.0 + cfg.nuisance * srng.uniform(-0.3, 0.3)
        offset = cfg.nuisance * 0.5 * _smooth_field(srng, (X, Y, Z, 1), (3.0, 3.0, 3.0, 0))
        shift = np.rint(cfg.nuisance * srng.uniform(-1.5, 1.5, size=3)).astype(int)
        for k in range(cfg.samples_per_subject):
            c = int(srng.integers(C))
            phi = cfg.stimulus_jitter * srng.uniform(-1, 1)
            signal = np.cos(phi) * sig[c, 0] + np.sin(phi) * sig[c, 1]
            vol = gain * np.roll(signal, tuple(shift), axis=(0, 1, 2)) + offset
            vol = vol + cfg.noise * srng.standard_normal(vol.shape)
            clip = np.cos(phi) * grat[c, 0] + np.sin(phi) * grat[c, 1]
            clip = clip + cfg.video_noise * srng.standard_normal(vshape)
            fmri.append(vol.astype(np.float32))
            video.append(clip.astype(np.float32))
            subjects.append(sid)
            labels.append(c)
    ds = Dataset(np.stack(fmri), np.stack(video), subjects, labels, ACTIONS[:C])
    ds.signatures = sig.astype(np.float32)  # oracle access for tests
    return ds


# ---------------------------------------------------------------------------
# splits and batching

@dataclass
class SubjectSplit:
    source_subjects: list[str]
    target_subjects: list[str]
    target_adaptation_fraction: float
    source_train: np.ndarray
    source_holdout: np.ndarray
    target_adapt: np.ndarray
    target_test: np.ndarray

    def __post_init__(self):
        if set(self.source_subjects) & set(self.target_subjects):
            raise ValidationError("source and target subjects overlap")
        if not 0 < self.target_adaptation_fraction < 1:
            raise ValidationError("target_adaptation_fraction must lie in (0, 1)")


def make_split(ds: Dataset, n_target_subjects: int = 1, target_adaptation_fraction: float = 0.5,
               source_holdout_fraction: float = 0.2, seed: int = 0) -> SubjectSplit:
    """Last ``n_target_subjects`` subjects (sorted) become targets."""
    subs = ds.subject_ids
    if not 1 <= n_target_subjects < len(subs):
        raise ValidationError("need at least one source and one target subject")
    target, source = subs[-n_target_subjects:], subs[:-n_target_subjects]
    who = ds.subjects()
    rng = derive_rng(seed, "split")

    def cut(idx, frac):
        idx = rng.permutation(idx)
        k = int(round(frac * len(idx)))
        return np.sort(idx[:k]), np.sort(idx[k:])

    src = np.flatnonzero(np.isin(who, source))
    tgt = np.flatnonzero(np.isin(who, target))
    holdout, train = cut(src, source_holdout_fraction)
    adapt, test = cut(tgt, target_adaptation_fraction)
    return SubjectSplit(source, target, target_adaptation_fraction, train, holdout, adapt, test)


def epoch_order(indices: np.ndarray, batch_size: int, seed: int, stream: str, epoch: int) -> list[np.ndarray]:
    """Batches for one epoch: a seeded permutation with the short tail dropped."""
    perm = derive_rng(seed, stream, epoch).permutation(np.asarray(indices))
    n = len(perm) // batch_size
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(n)]


def batch_at(indices: np.ndarray, batch_size: int, seed: int, stream: str, step: int) -> np.ndarray:
    """The batch consumed at global ``step`` of an endless epoch stream."""
    per_epoch = len(indices) // batch_size
    if per_epoch == 0:
        raise ValidationError(f"dataset of {len(indices)} is smaller than batch size {batch_size}")
    epoch, k = divmod(step, per_epoch)
    return epoch_order(indices, batch_size, seed, stream, epoch)[k]


def make_batches(indices, batch_size: int, rng: np.random.Generator, epochs: int | None = None,
                 allow_single: bool = False) -> Iterator[np.ndarray]:
    """Yield index batches: sampling without replacement within each epoch.

    Item i of a batch pairs the fMRI of sample i with its own video, so
    positives lie on the diagonal of the batch pairing matrix.
    """
    if batch_size < 2 and not allow_single:
        raise ValidationError("batch size must be >= 2 for contrastive batches")
    indices = np.asarray(indices)
    if len(indices) < batch_size:
        raise ValidationError(f"dataset of {len(indices)} is smaller than batch size {batch_size}")
    epoch = 0
    while epochs is None or epoch < epochs:
        perm = rng.permutation(indices)
        for i in range(len(perm) // batch_size):
            yield perm[i * batch_size:(i + 1) * batch_size]
        epoch += 1


# ---------------------------------------------------------------------------
# binary tensors and directory layout

MAGIC = b"FMRT"
_HEADER = struct.Struct("<4sBB5H")
_DTYPES = {1: np.float32, 2: np.float64}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def write_tensor(path: Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    if array.dtype not in _CODES:
        raise ValidationError(f"unsupported dtype {array.dtype}")
    if not 1 <= array.ndim <= 5 or max(array.shape) > 0xFFFF:
        raise ValidationError(f"unsupported shape {array.shape}")
    dims = list(array.shape) + [0] * (5 - array.ndim)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, _CODES[array.dtype], array.ndim, *dims))
        fh.write(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, code, rank, *dims = _HEADER.unpack_from(raw)
    if magic != MAGIC or code not in _DTYPES or not 1 <= rank <= 5:
        raise ValidationError(f"{path}: bad header")
    shape = tuple(dims[:rank])
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    body = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size)
    if body.size != int(np.prod(shape)):
        raise ValidationError(f"{path}: payload has {body.size} values, header declares {shape}")
    return body.reshape(shape).astype(_DTYPES[code])


def export_dataset(ds: Dataset, root: Path) -> Path:
    root = Path(root)
    (root / "fmri").mkdir(parents=True, exist_ok=True)
    (root / "video").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        name = f"{i:05d}.bin"
        write_tensor(root / "fmri" / name, ds._fmri[i])
        write_tensor(root / "video" / name, ds._video[i])
        rows.append({"id": i, "subject": str(ds._subjects[i]), "class": ds.class_names[ds._labels[i]],
                     "fmri": f"fmri/{name}", "video": f"video/{name}", "caption": ds._captions[i]})
    manifest = {
        "format": "fmri2text-dataset/1",
        "grid": list(ds.grid), "frames_T": ds.frames_T, "video_shape": list(ds.video_shape),
        "subjects": ds.subject_ids, "classes": ds.class_names, "samples": rows,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


class DatasetError(ValidationError):
    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(diagnostics))


def load_real_dataset(root, manifest: str = "manifest.json", fail_fast: bool = True) -> tuple[Dataset, list[str]]:
    """Load a dataset laid out as described in the module docstring.

    Returns the dataset and a list of per-sample diagnostics. With
    ``fail_fast`` the first bad row raises ``DatasetError``; otherwise bad rows
    are skipped and reported.
    """
    root = Path(root)
    meta = json.loads((root / manifest).read_text())
    grid, T = tuple(meta["grid"]), int(meta["frames_T"])
    vshape = tuple(meta["video_shape"])
    classes = list(meta["classes"])
    subjects = set(meta.get("subjects", []))
    fmri, video, subs, labels, caps, diag = [], [], [], [], [], []
    for n, row in enumerate(meta.get("samples", [])):
        tag = f"row {n} (id {row.get('id', '?')})"
        try:
            if row["class"] not in classes:
                raise ValidationError(f"{tag}: unknown class {row['class']!r}")
            if subjects and row["subject"] not in subjects:
                raise ValidationError(f"{tag}: subject {row['subject']!r} not declared")
            for key, want in (("fmri", grid + (T,)), ("video", vshape)):
                path = root / row[key]
                if not path.exists():
                    raise ValidationError(f"{tag}: missing file {row[key]}")
                arr = read_tensor(path)
                if arr.shape != want:
                    raise ValidationError(f"{tag}: {key} shape {arr.shape} != manifest {want}")
                (fmri if key == "fmri" else video).append(arr)
        except (ValidationError, KeyError) as err:
            msg = str(err) if isinstance(err, ValidationError) else f"{tag}: missing field {err}"
            if fail_fast:
                raise DatasetError([msg]) from None
            diag.append(msg)
            del fmri[len(labels):], video[len(labels):]
            continue
        subs.append(row["subject"])
        labels.append(classes.index(row["class"]))
        caps.append(row.get("caption") or caption_for(row["class"]))
    if not labels:
        warnings.warn(f"{root / manifest}: no samples loaded", stacklevel=2)
        ds = Dataset(np.zeros((0,) + grid + (T,)), np.zeros((0,) + vshape), [], [], classes, [])
        return ds, diag
    return Dataset(np.stack(fmri), np.stack(video), subs, labels, classes, caps), diag
