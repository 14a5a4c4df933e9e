"""Value types, manifest ingestion and lossless image persistence.

Images are float tensors of shape (C, H, W) whose values lie on the 1/255
grid, so they survive an 8-bit PNG round trip bit-exactly.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

LEVELS = 255
GRID_TOL = 1e-4
MANIFEST_HEADER = ("image_id", "filename", "true_label", "target_label")


class DataError(Exception):
    """Raised for unreadable or invalid dataset entries."""


class QuantizationError(ValueError):
    """Raised when an image holds values off the 1/255 grid."""


def is_grid_quantized(img: torch.Tensor) -> bool:
    scaled = img.detach().double() * LEVELS
    if scaled.numel() == 0:
        return True
    in_range = bool((img >= 0).all()) and bool((img <= 1).all())
    return in_range and bool((scaled - scaled.round()).abs().max() <= GRID_TOL)


def to_levels(img: torch.Tensor) -> torch.Tensor:
    """Integer pixel levels (0..255) of a grid-quantized image."""
    if not is_grid_quantized(img):
        raise QuantizationError("image values are not multiples of 1/255 in [0, 1]")
    return (img.detach().double() * LEVELS).round().to(torch.int64)


def from_levels(levels: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    return levels.to(dtype) / LEVELS


def quantize(img: torch.Tensor) -> torch.Tensor:
    """Snap to the nearest grid value (explicit, never implicit)."""
    return from_levels((img.detach().double().clamp(0, 1) * LEVELS).round(), img.dtype)


@dataclass(frozen=True)
class LabeledExample:
    id: str
    image: torch.Tensor
    true_label: int
    target_label: int

    def __post_init__(self):
        if self.true_label == self.target_label:
            raise DataError(f"{self.id}: true_label equals target_label ({self.true_label})")


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    filename: str
    true_label: int
    target_label: int


@dataclass(frozen=True)
class DatasetManifest:
    root_dir: Path
    entries: tuple[ManifestEntry, ...]

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class AdversarialResult:
    example_id: str
    adv_image: torch.Tensor
    perturbation: torch.Tensor
    iterations_used: int
    loss_trace: tuple[float, ...] = ()
    snapshots: dict = field(default_factory=dict)
    target_label: int | None = None
    true_label: int | None = None
    flags: tuple[str, ...] = ()


def load_image(path, size: int | None = None) -> torch.Tensor:
    """Decode an image file to a grid-quantized (3, H, W) float tensor.

    When ``size`` is given the image is resized (bicubic) to ``size`` x ``size``
    in 8-bit space before conversion.
    """
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.uint8).copy()
    return from_levels(torch.from_numpy(arr).permute(2, 0, 1))


def save_image_lossless(img: torch.Tensor, path) -> None:
    levels = to_levels(img)
    if levels.dim() != 3 or levels.shape[0] not in (1, 3):
        raise ValueError(f"expected a (C, H, W) image with C in (1, 3), got {tuple(levels.shape)}")
    arr = levels.to(torch.uint8).permute(1, 2, 0).cpu().numpy()
    mode = "RGB" if arr.shape[2] == 3 else "L"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.squeeze(2) if mode == "L" else arr, mode=mode).save(path, format="PNG")


# Perturbation files: 8-byte header of four little-endian uint16
# (C, H, W, 0), followed by C*H*W little-endian float32 values, C order.
_DELTA_HEADER = struct.Struct("<4H")


def save_delta(delta: torch.Tensor, path) -> None:
    if delta.dim() != 3:
        raise ValueError("perturbation must be (C, H, W)")
    c, h, w = delta.shape
    payload = delta.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_DELTA_HEADER.pack(c, h, w, 0))
        fh.write(payload)


def load_delta(path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    c, h, w, _ = _DELTA_HEADER.unpack_from(raw)
    arr = np.frombuffer(raw, dtype="<f4", offset=_DELTA_HEADER.size)
    if arr.size != c * h * w:
        raise DataError(f"{path}: payload holds {arr.size} values, header says {c}x{h}x{w}")
    return torch.from_numpy(arr.reshape(c, h, w).astype(np.float32))


def read_manifest(manifest_path) -> DatasetManifest:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    entries = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{manifest_path}: missing columns {sorted(missing)}")
        for row in reader:
            try:
                entry = ManifestEntry(
                    image_id=row["image_id"],
                    filename=row["filename"],
                    true_label=int(row["true_label"]),
                    target_label=int(row["target_label"]),
                )
            except ValueError as exc:
                raise DataError(f"{row.get('image_id')}: bad label ({exc})") from exc
            entries.append(entry)
    return DatasetManifest(root_dir=manifest_path.parent, entries=tuple(entries))


def load_dataset(
    manifest_path,
    num_categories: int = 1000,
    size: int | None = None,
    limit: int | None = None,
) -> tuple[DatasetManifest, list[LabeledExample]]:
    """Read a CSV manifest and decode its images in row order.

    Labels are 0-based. ``limit`` keeps the first rows only (desk-scale
    subsets); ``size`` resizes every image to the surrogate's resolution.
    """
    manifest = read_manifest(manifest_path)
    entries = manifest.entries[:limit] if limit is not None else manifest.entries
    examples = []
    for entry in entries:
        for label in (entry.true_label, entry.target_label):
            if not 0 <= label < num_categories:
                raise DataError(f"{entry.image_id}: label {label} outside [0, {num_categories})")
        path = manifest.root_dir / entry.filename
        if not path.is_file():
            raise DataError(f"{entry.image_id}: image file not found: {path}")
        try:
            image = load_image(path, size=size)
        except OSError as exc:
            raise DataError(f"{entry.image_id}: cannot decode {path}: {exc}") from exc
        examples.append(LabeledExample(entry.image_id, image, entry.true_label, entry.target_label))
    if limit is not None:
        manifest = DatasetManifest(manifest.root_dir, tuple(entries))
    return manifest, examples


def write_manifest(path, rows) -> None:
    """Write ``(image_id, filename, true_label, target_label)`` rows."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for row in rows:
            writer.writerow(row)
