"""Bit-exact binary containers, dataset manifests, and checkpoints.

Tensor container layout (all integers little-endian):

    magic   5 bytes  b"CILT1"
    dtype   u8       0 = float32, 1 = float64, 2 = uint8
    rank    u8       at most 5
    extents rank x u32
    payload product(extents) * itemsize bytes, raw row-major
    footer  optional: u32 length + UTF-8 JSON metadata

The footer carries per-file metadata (sampling rate, video and patient ids)
so clips round-trip losslessly from a single file. Plain tensors omit it.

Manifests are UTF-8, one video per line, tab-separated:

    patient_id <TAB> label <TAB> fold <TAB> video_path [<TAB> mask_path]

with ``label`` one of ``normal``/``abnormal`` and ``fold`` a small integer.
Lines starting with ``#`` and blank lines are ignored. Paths are resolved
relative to the manifest's directory. All rows of a patient must agree on
label and fold, so a patient belongs to exactly one fold by construction.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CILT1"
CHECKPOINT_MAGIC = b"CILK1"
MAX_RANK = 5

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


class ContainerError(IOError):
    """Base error for malformed container files."""


class BadMagicError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class UnsupportedDtypeError(ContainerError):
    pass


class ManifestError(ValueError):
    """Raised for structurally invalid dataset manifests."""


def write_tensor(path, array: np.ndarray, metadata: dict | None = None) -> None:
    array = np.asarray(array)
    if array.dtype not in _DTYPE_CODES:
        raise UnsupportedDtypeError(f"cannot store dtype {array.dtype}")
    if array.ndim > MAX_RANK:
        raise ContainerError(f"rank {array.ndim} exceeds maximum {MAX_RANK}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", _DTYPE_CODES[array.dtype], array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())
        if metadata is not None:
            blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def read_tensor(path) -> tuple[np.ndarray, dict | None]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise BadMagicError(f"{path}: expected magic {MAGIC!r}, found {magic!r}")
        head = fh.read(2)
        if len(head) < 2:
            raise TruncatedPayloadError(f"{path}: header cut short")
        code, rank = struct.unpack("<BB", head)
        if code not in _CODE_DTYPES:
            raise UnsupportedDtypeError(f"{path}: unknown dtype code {code}")
        if rank > MAX_RANK:
            raise ContainerError(f"{path}: rank {rank} exceeds maximum {MAX_RANK}")
        ext_bytes = fh.read(4 * rank)
        if len(ext_bytes) < 4 * rank:
            raise TruncatedPayloadError(f"{path}: extent table cut short")
        shape = struct.unpack(f"<{rank}I", ext_bytes)
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = fh.read(nbytes)
        if len(payload) < nbytes:
            raise TruncatedPayloadError(
                f"{path}: payload has {len(payload)} of {nbytes} bytes")
        array = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        metadata = None
        len_bytes = fh.read(4)
        if len(len_bytes) == 4:
            (mlen,) = struct.unpack("<I", len_bytes)
            blob = fh.read(mlen)
            if len(blob) < mlen:
                raise TruncatedPayloadError(f"{path}: metadata footer cut short")
            metadata = json.loads(blob.decode("utf-8"))
    return array, metadata


# ---------------------------------------------------------------------------
# video clips
# ---------------------------------------------------------------------------

@dataclass
class VideoClip:
    """Grayscale frame stack (T, H, W) with acquisition metadata."""

    frames: np.ndarray
    fps: float = 200.0
    video_id: str = ""
    patient_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise ValueError(f"clip frames must be (T, H, W), got {self.frames.shape}")
        t, h, w = self.frames.shape
        if t < 2:
            raise ValueError(f"clip needs at least 2 frames, got {t}")
        if h < 16 or w < 16:
            raise ValueError(f"clip frames must be at least 16x16, got {h}x{w}")
        if self.frames.dtype not in (np.dtype("u1"), np.dtype("<f8")):
            self.frames = self.frames.astype(np.float64)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape


def write_video(clip: VideoClip, path) -> None:
    write_tensor(path, clip.frames, metadata={
        "kind": "video",
        "fps": clip.fps,
        "video_id": clip.video_id,
        "patient_id": clip.patient_id,
    })


def read_video(path) -> VideoClip:
    frames, meta = read_tensor(path)
    meta = meta or {}
    return VideoClip(
        frames=frames,
        fps=float(meta.get("fps", 200.0)),
        video_id=str(meta.get("video_id", "")),
        patient_id=str(meta.get("patient_id", "")),
    )


def clip_from_pgm_dir(directory, fps: float = 200.0, video_id: str = "",
                      patient_id: str = "") -> VideoClip:
    """Assemble a clip from a directory of binary PGM (P5) frames, sorted by name."""
    paths = sorted(Path(directory).glob("*.pgm"))
    if not paths:
        raise FileNotFoundError(f"no .pgm frames in {directory}")
    frames = np.stack([_read_pgm(p) for p in paths])
    return VideoClip(frames, fps=fps, video_id=video_id, patient_id=patient_id)


def _read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ContainerError(f"{path}: only binary PGM (P5) is supported")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval > 255:
        raise UnsupportedDtypeError(f"{path}: 16-bit PGM not supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width).copy()


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

LABELS = ("normal", "abnormal")


@dataclass
class PatientRecord:
    patient_id: str
    label: str
    fold: int
    videos: list[Path] = field(default_factory=list)
    masks: list[Path | None] = field(default_factory=list)


@dataclass
class DatasetManifest:
    patients: list[PatientRecord]
    path: Path | None = None

    def __len__(self):
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def fold_ids(self) -> list[int]:
        return sorted({p.fold for p in self.patients})

    def fold(self, fold_id: int) -> list[PatientRecord]:
        return [p for p in self.patients if p.fold == fold_id]

    def by_id(self) -> dict[str, PatientRecord]:
        return {p.patient_id: p for p in self.patients}


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Parse a manifest, enforcing patient-grouped folds and consistent labels."""
    path = Path(path)
    base = path.parent
    patients: dict[str, PatientRecord] = {}
    seen_videos: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (4, 5):
                raise ManifestError(
                    f"{path}:{lineno}: expected 4 or 5 tab-separated fields, got {len(parts)}")
            pid, label, fold_text, video = parts[:4]
            mask = parts[4] if len(parts) == 5 and parts[4] not in ("", "-") else None
            if label not in LABELS:
                raise ManifestError(
                    f"{path}:{lineno}: label must be one of {LABELS}, got '{label}'")
            try:
                fold = int(fold_text)
            except ValueError:
                raise ManifestError(
                    f"{path}:{lineno}: fold must be an integer, got '{fold_text}'") from None
            if video in seen_videos:
                raise ManifestError(f"{path}:{lineno}: duplicate video entry '{video}'")
            seen_videos.add(video)
            rec = patients.get(pid)
            if rec is None:
                rec = PatientRecord(pid, label, fold)
                patients[pid] = rec
            else:
                if rec.label != label:
                    raise ManifestError(
                        f"{path}:{lineno}: patient '{pid}' listed with conflicting "
                        f"labels '{rec.label}' and '{label}'")
                if rec.fold != fold:
                    raise ManifestError(
                        f"{path}:{lineno}: patient '{pid}' split across folds "
                        f"{rec.fold} and {fold}")
            vpath = (base / video).resolve() if not Path(video).is_absolute() else Path(video)
            mpath = None
            if mask is not None:
                mpath = (base / mask).resolve() if not Path(mask).is_absolute() else Path(mask)
            if check_paths:
                if not vpath.exists():
                    raise ManifestError(f"{path}:{lineno}: missing video file {vpath}")
                if mpath is not None and not mpath.exists():
                    raise ManifestError(f"{path}:{lineno}: missing mask file {mpath}")
            rec.videos.append(vpath)
            rec.masks.append(mpath)
    return DatasetManifest(list(patients.values()), path=path)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.parent
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.patients:
            for video, mask in zip(rec.videos, rec.masks):
                v = _relativize(video, base)
                fields = [rec.patient_id, rec.label, str(rec.fold), v]
                if mask is not None:
                    fields.append(_relativize(mask, base))
                fh.write("\t".join(fields) + "\n")


def _relativize(target: Path, base: Path) -> str:
    try:
        return str(Path(target).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(target)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_hash(config_fields: dict) -> str:
    blob = json.dumps(config_fields, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, params: dict[str, "np.ndarray | object"],
                    metadata: dict | None = None) -> None:
    """Write named float64 parameter arrays plus JSON metadata to one file.

    ``params`` maps name -> array-like (autodiff Tensors are accepted and
    their ``data`` stored). Order is preserved and restored.
    """
    entries = []
    payloads = []
    for name, value in params.items():
        array = np.ascontiguousarray(getattr(value, "data", value), dtype=np.float64)
        entries.append({"name": name, "shape": list(array.shape)})
        payloads.append(array.tobytes())
    header = json.dumps({"entries": entries, "metadata": metadata or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}, found {magic!r}")
        len_bytes = fh.read(4)
        if len(len_bytes) < 4:
            raise TruncatedPayloadError(f"{path}: header cut short")
        (hlen,) = struct.unpack("<I", len_bytes)
        header = json.loads(fh.read(hlen).decode("utf-8"))
        params: dict[str, np.ndarray] = {}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8
            blob = fh.read(nbytes)
            if len(blob) < nbytes:
                raise TruncatedPayloadError(
                    f"{path}: tensor '{entry['name']}' has {len(blob)} of {nbytes} bytes")
            params[entry["name"]] = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
    return params, header["metadata"]
