"""Dataset manifests, mask conversion and image/mask preprocessing."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

SCHEMA_VERSION = 1
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}
SPLITS = ("train", "test")
CACHE_ENV = "ADAPTERSEG_CACHE"

# directory-name candidates for the paired_dirs layout; "{split}" is substituted
IMAGE_DIRS = ("images", "image", "Imgs", "Image", "{split}_A")
MASK_DIRS = ("masks", "mask", "GT", "GT_Object", "{split}_B")

# known layouts, keyed by dataset id
DATASET_PRESETS = {
    "cod10k": dict(layout="paired_dirs", image_dir="Image", mask_dir="GT_Object"),
    "camo": dict(layout="paired_dirs", image_dir="Imgs", mask_dir="GT"),
    "chameleon": dict(layout="paired_dirs", image_dir="Imgs", mask_dir="GT", split_rule="test"),
    "istd": dict(layout="paired_dirs", image_dir="{split}_A", mask_dir="{split}_B"),
    "kvasir": dict(layout="paired_dirs", image_dir="images", mask_dir="masks"),
    "cell": dict(layout="suffix_paired", mask_suffix="_label"),
}


class DataError(Exception):
    """Base class for dataset problems."""


class EmptyDatasetError(DataError):
    pass


class DuplicateStemError(DataError):
    pass


class ImageDecodeError(DataError):
    pass


@dataclass
class SampleRecord:
    sample_id: str
    image_path: str
    mask_path: Optional[str]
    split: str
    dataset_id: str


@dataclass
class DatasetManifest:
    dataset_id: str
    task: str
    records: list[SampleRecord]
    diagnostics: list[dict] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.sample_id)

    @property
    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in SPLITS}
        for r in self.records:
            out[r.split] = out.get(r.split, 0) + 1
        return out

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def to_json(self) -> str:
        d = asdict(self)
        d["counts"] = self.counts
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"manifest schema_version {d.get('schema_version')} != {SCHEMA_VERSION}")
        d.pop("counts", None)
        d["records"] = [SampleRecord(**r) for r in d["records"]]
        return cls(**d)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def _images_in(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def _by_stem(files: list[Path], where: Path) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for f in files:
        if f.stem in out:
            raise DuplicateStemError(f"duplicate stem {f.stem!r} in {where}: {out[f.stem].name}, {f.name}")
        out[f.stem] = f
    return out


def _find_dir(base: Path, candidates, split: str) -> Optional[Path]:
    for c in candidates:
        d = base / c.format(split=split)
        if d.is_dir():
            return d
    return None


def _pair(images: dict[str, Path], masks: dict[str, Path], split: str, dataset_id: str,
          diagnostics: list[dict]) -> list[SampleRecord]:
    records = []
    for stem, img in images.items():
        if stem in masks:
            records.append(SampleRecord(f"{split}/{stem}", str(img), str(masks[stem]), split, dataset_id))
        else:
            diagnostics.append({"path": str(img), "split": split, "reason": "image without mask"})
    for stem in sorted(set(masks) - set(images)):
        diagnostics.append({"path": str(masks[stem]), "split": split, "reason": "mask without image"})
    return records


def _split_dirs(root: Path, split_rule: str) -> list[tuple[str, Path]]:
    if split_rule == "subdirs":
        dirs = [(s, root / s) for s in SPLITS if (root / s).is_dir()]
        if not dirs:
            raise EmptyDatasetError(f"{root} has neither train/ nor test/ subdirectories")
        return dirs
    if split_rule in SPLITS:
        return [(split_rule, root)]
    if split_rule.startswith("fraction:"):
        return [("train", root)]
    raise DataError(f"unknown split_rule {split_rule!r}")


def build_manifest(root_dir: Union[str, Path], layout: str = "paired_dirs", split_rule: str = "subdirs",
                   dataset_id: Optional[str] = None, task: str = "cod", image_dir: Optional[str] = None,
                   mask_dir: Optional[str] = None, mask_suffix: str = "_mask") -> DatasetManifest:
    """Pair images with masks by file stem.

    layout: "paired_dirs" (images and masks in sibling directories) or "suffix_paired"
    (one directory, mask named ``<stem><mask_suffix>``).
    split_rule: "subdirs" (root/train, root/test), "train" or "test" (whole root is one
    split), or "fraction:<f>" (first round(f*N) sample ids by sort order train, rest test).
    Unmatched files go to ``diagnostics``.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    dataset_id = dataset_id or root.name
    records: list[SampleRecord] = []
    diagnostics: list[dict] = []
    for split, base in _split_dirs(root, split_rule):
        if layout == "paired_dirs":
            idir = _find_dir(base, [image_dir] if image_dir else IMAGE_DIRS, split)
            mdir = _find_dir(base, [mask_dir] if mask_dir else MASK_DIRS, split)
            if idir is None or mdir is None:
                raise EmptyDatasetError(f"{base}: image or mask directory not found")
            images = _by_stem(_images_in(idir), idir)
            masks = _by_stem(_images_in(mdir), mdir)
        elif layout == "suffix_paired":
            files = _images_in(base)
            masks = _by_stem([f for f in files if f.stem.endswith(mask_suffix)], base)
            masks = {s[: -len(mask_suffix)]: p for s, p in masks.items()}
            images = _by_stem([f for f in files if not f.stem.endswith(mask_suffix)], base)
        else:
            raise DataError(f"unknown layout {layout!r}")
        records.extend(_pair(images, masks, split, dataset_id, diagnostics))
    if split_rule.startswith("fraction:"):
        frac = float(split_rule.split(":", 1)[1])
        records.sort(key=lambda r: r.sample_id)
        n_train = round(frac * len(records))
        for i, r in enumerate(records):
            r.split = "train" if i < n_train else "test"
            r.sample_id = f"{r.split}/{r.sample_id.split('/', 1)[1]}"
    if not records:
        raise EmptyDatasetError(f"no image/mask pairs found under {root}")
    return DatasetManifest(dataset_id, task, records, diagnostics)


def build_preset_manifest(root_dir: Union[str, Path], dataset_id: str, task: str, **overrides) -> DatasetManifest:
    kwargs = dict(DATASET_PRESETS.get(dataset_id.lower(), {}))
    kwargs.update(overrides)
    return build_manifest(root_dir, dataset_id=dataset_id, task=task, **kwargs)


def _tree_fingerprint(root: Path) -> str:
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            st = p.stat()
            h.update(f"{p.relative_to(root)}|{st.st_size}|{st.st_mtime_ns}\n".encode())
    return h.hexdigest()


def cached_manifest(root_dir: Union[str, Path], **kwargs) -> DatasetManifest:
    """build_manifest, memoised on disk under $ADAPTERSEG_CACHE when that is set."""
    cache = os.environ.get(CACHE_ENV)
    if not cache:
        return build_manifest(root_dir, **kwargs)
    root = Path(root_dir).resolve()
    key = hashlib.sha256(
        json.dumps([str(root), _tree_fingerprint(root), sorted(kwargs.items())], default=str).encode()
    ).hexdigest()[:24]
    path = Path(cache) / f"manifest-{key}.json"
    if path.is_file():
        return DatasetManifest.load(path)
    manifest = build_manifest(root_dir, **kwargs)
    manifest.save(path)
    return manifest


# ---------------------------------------------------------------- masks and images

def instance_to_semantic(instance_mask) -> np.ndarray:
    """Foreground union of an instance label map (0 = background) as a uint8 {0,1} mask."""
    m = np.asarray(instance_mask)
    if not np.issubdtype(m.dtype, np.integer) and not np.all(m == np.round(m)):
        raise ValueError("instance mask must hold integer labels")
    if (m < 0).any():
        raise ValueError("instance mask has negative labels")
    return (m > 0).astype(np.uint8)


def _open(path: Union[str, Path]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGB")
            return np.array(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc


def _dtype_max(a: np.ndarray) -> float:
    if a.dtype == np.bool_:
        return 1.0
    if np.issubdtype(a.dtype, np.integer):
        if a.dtype.itemsize <= 2:
            return float(np.iinfo(a.dtype).max)
        # PIL decodes 16-bit PNGs as int32
        return 65535.0 if a.max() <= 65535 else float(a.max())
    return 1.0


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Decode to float32 [3, H, W] in [0, 1]; grayscale is replicated, alpha dropped."""
    a = _open(path)
    scale = _dtype_max(a)
    a = a.astype(np.float32) / scale
    if a.ndim == 2:
        a = np.repeat(a[None], 3, axis=0)
    else:
        a = a[..., :3].transpose(2, 0, 1)
        if a.shape[0] == 1:
            a = np.repeat(a, 3, axis=0)
    return np.ascontiguousarray(np.clip(a, 0.0, 1.0))


def binarize_mask(raw: np.ndarray) -> np.ndarray:
    """{0,1} uint8 mask: value > 0.5 * max. Works for {0,255} and {0,1} encodings."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 3:
        raw = raw.max(axis=-1)
    peak = raw.max() if raw.size else 0.0
    if peak <= 0:
        return np.zeros(raw.shape, dtype=np.uint8)
    return (raw > 0.5 * peak).astype(np.uint8)


MaskTransform = Callable[[np.ndarray], np.ndarray]


def load_mask(path: Union[str, Path], instance: bool = False,
              transform: Optional[MaskTransform] = None) -> np.ndarray:
    """Binary mask at native resolution. ``instance`` maps labels through instance_to_semantic."""
    raw = _open(path)
    if transform is not None:
        return np.asarray(transform(raw), dtype=np.uint8)
    if instance:
        if raw.ndim == 3:
            raw = raw[..., 0]
        return instance_to_semantic(raw)
    return binarize_mask(raw)


def resize_image(image: np.ndarray, resolution: int) -> torch.Tensor:
    t = torch.from_numpy(np.asarray(image, dtype=np.float32))[None]
    if t.shape[-2:] == (resolution, resolution):
        return t[0].clone()
    t = F.interpolate(t, size=(resolution, resolution), mode="bilinear", align_corners=False)
    return t[0].clamp(0.0, 1.0)


def resize_mask(mask: np.ndarray, resolution: int) -> np.ndarray:
    t = torch.from_numpy(np.asarray(mask, dtype=np.float32))[None, None]
    t = F.interpolate(t, size=(resolution, resolution), mode="nearest")
    return (t[0, 0].numpy() > 0.5).astype(np.uint8)


def preprocess(image_file: Union[str, Path], target_resolution: int) -> torch.Tensor:
    """Float tensor [3, R, R] in [0, 1], bilinear resize."""
    return resize_image(load_image(image_file), target_resolution)


def preprocess_mask(mask_file: Union[str, Path], target_resolution: int, instance: bool = False,
                    transform: Optional[MaskTransform] = None) -> np.ndarray:
    """Binary uint8 mask [R, R]: binarized at half the max value, then nearest-neighbour resize."""
    return resize_mask(load_mask(mask_file, instance, transform), target_resolution)
