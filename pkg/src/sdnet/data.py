"""Synthetic rain pairs, PNG I/O, manifests, and paired random-crop batches.

Rain is additive: ``O = clamp(B + sum(R_i), 0, 1)`` with ``R_i >= 0``.
Streak layers are procedural (sparse seeds smeared by a line kernel) unless a
directory of streak PNGs is supplied.
"""
from __future__ import annotations

import functools
import logging
import os
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import correlate

from .tensor import Tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}
MIN_CANVAS = 64


@dataclass
class ImagePair:
    rainy: np.ndarray
    clean: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.rainy.shape != self.clean.shape:
            raise ValueError(f"pair {self.id!r}: rainy {self.rainy.shape} vs clean {self.clean.shape}")


@dataclass
class StreakLayer:
    r: np.ndarray
    angle: float
    length: int
    density: float
    intensity: float


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    clean_path: str
    rainy_path: str
    split: str
    layer_seed: int


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Decode an image to float32 ``[H, W, 3]`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr / np.float32(255.0)


def to_uint8(x) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    # half-away-from-zero on nonnegative values
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def quantize(x) -> np.ndarray:
    return to_uint8(x).astype(np.float32) / np.float32(255.0)


def save_image(x, path) -> None:
    arr = to_uint8(x)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected [H, W, 3] image, got {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# rain synthesis
# ---------------------------------------------------------------------------

def line_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized motion-blur kernel: a ``length``-pixel line at ``angle`` degrees (90 = vertical)."""
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    c = (size - 1) / 2.0
    theta = np.deg2rad(angle)
    t = np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, 4 * length)
    rows = np.clip(np.rint(c - t * np.sin(theta)).astype(int), 0, size - 1)
    cols = np.clip(np.rint(c + t * np.cos(theta)).astype(int), 0, size - 1)
    k[rows, cols] = 1.0
    return k / k.sum()


def synth_streaks(h: int, w: int, rng: np.random.Generator, *, density: float | None = None,
                  angle: float | None = None, length: int | None = None,
                  intensity: float | None = None) -> StreakLayer:
    """One procedural rain layer; unspecified parameters are drawn from ``rng``.

    Seeds are dropped on a canvas at least ``MIN_CANVAS`` px per side padded by
    the streak length, so long streaks enter from outside the frame, then the
    canvas is center-cropped to ``h x w``.
    """
    if density is None:
        density = rng.uniform(0.002, 0.01)
    if angle is None:
        angle = rng.uniform(70.0, 110.0)
    if length is None:
        length = int(rng.integers(15, 46))
    if intensity is None:
        intensity = rng.uniform(0.4, 1.0)
    ch, cw = max(h, MIN_CANVAS) + 2 * length, max(w, MIN_CANVAS) + 2 * length
    seeds = (rng.random((ch, cw)) < density).astype(np.float64)
    blurred = correlate(seeds, line_kernel(length, angle), mode="constant")
    top, left = (ch - h) // 2, (cw - w) // 2
    r = blurred[top:top + h, left:left + w]
    peak = blurred.max()
    if peak > 0:
        r = r * (intensity / peak)
    r = np.clip(r, 0.0, 1.0).astype(np.float32)
    return StreakLayer(np.repeat(r[:, :, None], 3, axis=2), float(angle), int(length),
                       float(density), float(intensity))


def streak_from_bank(bank: Sequence[np.ndarray], h: int, w: int, rng: np.random.Generator) -> StreakLayer:
    """Random crop (tiling if needed) of an externally supplied streak image."""
    src = bank[int(rng.integers(len(bank)))]
    reps = (-(-h // src.shape[0]), -(-w // src.shape[1]), 1)
    tiled = np.tile(src, reps)
    top = int(rng.integers(tiled.shape[0] - h + 1))
    left = int(rng.integers(tiled.shape[1] - w + 1))
    r = np.clip(tiled[top:top + h, left:left + w], 0.0, 1.0).astype(np.float32)
    return StreakLayer(r, float("nan"), 0, float("nan"), float(r.max()))


def compose_rainy(clean: np.ndarray, layers: Sequence[StreakLayer], id: str = "") -> ImagePair:
    if not 1 <= len(layers) <= 4:
        raise ValueError(f"need 1 to 4 streak layers, got {len(layers)}")
    rain = np.zeros_like(clean, dtype=np.float32)
    for layer in layers:
        if layer.r.shape != clean.shape:
            raise ValueError(f"streak layer {layer.r.shape} does not match image {clean.shape}")
        rain += layer.r
    return ImagePair(np.clip(clean + rain, 0.0, 1.0).astype(np.float32), clean, id)


def synthesize_pair(clean: np.ndarray, layer_seed: int, id: str = "",
                    bank: Sequence[np.ndarray] | None = None) -> ImagePair:
    """Rainy version of ``clean`` fully determined by ``layer_seed``."""
    rng = np.random.default_rng(layer_seed)
    h, w = clean.shape[:2]
    n = int(rng.integers(1, 5))
    make = (lambda: streak_from_bank(bank, h, w, rng)) if bank else (lambda: synth_streaks(h, w, rng))
    return compose_rainy(clean, [make() for _ in range(n)], id)


def layer_seed_for(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# dataset construction and manifests
# ---------------------------------------------------------------------------

def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"background directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_streak_bank(directory) -> list[np.ndarray]:
    directory = Path(directory)
    bank = []
    for p in _list_images(directory):
        try:
            bank.append(load_image(p))
        except OSError as exc:
            log.warning("skipping streak image: %s", exc)
    if not bank:
        raise ValueError(f"no decodable streak images in {directory}")
    return bank


def write_manifest(records: Sequence[ManifestRecord], path) -> None:
    lines = [f"{r.id}\t{r.clean_path}\t{r.rainy_path}\t{r.split}\t{r.layer_seed}\n" for r in records]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(lines), encoding="utf-8")
    os.replace(tmp, path)


def read_manifest(path) -> list[ManifestRecord]:
    """Parse a manifest; relative image paths are resolved against its directory."""
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        rid, clean, rainy, split, seed = fields
        records.append(ManifestRecord(rid, str(base / clean), str(base / rainy), split, int(seed)))
    return records


def build_dataset(background_dir, out_dir, n_train: int, n_test: int, seed: int = 0,
                  streak_dir=None) -> Path:
    """Synthesize paired PNGs under ``out_dir/{train,test}/{clean,rainy}`` and a manifest.

    Backgrounds are shuffled by ``seed``; undecodable files are skipped with a
    warning. The manifest is written last, so a failed run leaves none behind.
    """
    background_dir, out_dir = Path(background_dir), Path(out_dir)
    candidates = _list_images(background_dir)
    need = n_train + n_test
    if len(candidates) < need:
        raise ValueError(f"{background_dir} has {len(candidates)} images, need {need}")
    bank = load_streak_bank(streak_dir) if streak_dir else None
    order = np.random.default_rng(seed).permutation(len(candidates))

    backgrounds: list[np.ndarray] = []
    for i in order:
        if len(backgrounds) == need:
            break
        try:
            backgrounds.append(load_image(candidates[i]))
        except OSError as exc:
            log.warning("skipping background: %s", exc)
    if len(backgrounds) < need:
        raise ValueError(f"only {len(backgrounds)} decodable images in {background_dir}, need {need}")

    records = []
    for index, image in enumerate(backgrounds):
        split = "train" if index < n_train else "test"
        rid = f"{index:05d}"
        clean_rel = f"{split}/clean/{rid}.png"
        rainy_rel = f"{split}/rainy/{rid}.png"
        lseed = layer_seed_for(seed, index)
        clean = quantize(image)
        pair = synthesize_pair(clean, lseed, rid, bank)
        save_image(clean, out_dir / clean_rel)
        save_image(pair.rainy, out_dir / rainy_rel)
        records.append(ManifestRecord(rid, clean_rel, rainy_rel, split, lseed))
    manifest = out_dir / "manifest.tsv"
    write_manifest(records, manifest)
    log.info("wrote %d train / %d test pairs to %s", n_train, n_test, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=256)
def _cached_image(path: str) -> np.ndarray:
    arr = load_image(path)
    arr.setflags(write=False)
    return arr


def load_pair(record: ManifestRecord) -> ImagePair:
    return ImagePair(_cached_image(record.rainy_path), _cached_image(record.clean_path), record.id)


def reflect_to_at_least(img: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = max(0, h - img.shape[0]), max(0, w - img.shape[1])
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="symmetric")


def split_records(records: Sequence[ManifestRecord], split: str) -> list[ManifestRecord]:
    chosen = [r for r in records if r.split == split]
    if not chosen:
        raise ValueError(f"split {split!r} is empty")
    return chosen


@dataclass(frozen=True)
class CropPlan:
    index: int
    top: int
    left: int


def epoch_plan(records: Sequence[ManifestRecord], crop: int, seed: int, epoch: int) -> list[CropPlan]:
    """Shuffled order and crop offsets for one epoch, keyed only by ``(seed, epoch)``."""
    rng = np.random.default_rng([seed, epoch])
    plan = []
    for i in rng.permutation(len(records)):
        pair = load_pair(records[i])
        h, w = pair.clean.shape[:2]
        top = int(rng.integers(max(h, crop) - crop + 1))
        left = int(rng.integers(max(w, crop) - crop + 1))
        plan.append(CropPlan(int(i), top, left))
    return plan


def crop_pair(pair: ImagePair, crop: int, top: int, left: int) -> ImagePair:
    rainy = reflect_to_at_least(pair.rainy, crop, crop)[top:top + crop, left:left + crop]
    clean = reflect_to_at_least(pair.clean, crop, crop)[top:top + crop, left:left + crop]
    return ImagePair(rainy, clean, pair.id)


def assemble(records: Sequence[ManifestRecord], plan: Sequence[CropPlan], crop: int) -> tuple[Tensor, Tensor]:
    pairs = [crop_pair(load_pair(records[c.index]), crop, c.top, c.left) for c in plan]
    rainy = np.stack([p.rainy for p in pairs])
    clean = np.stack([p.clean for p in pairs])
    return Tensor(rainy), Tensor(clean)


def batch_iter(records: Sequence[ManifestRecord], split: str = "train", crop: int = 231,
               batch: int = 5, seed: int = 0, epoch: int = 0) -> Iterator[tuple[Tensor, Tensor]]:
    """Yield ``(rainy, clean)`` batches ``[b, crop, crop, 3]`` for one epoch.

    The same crop window is cut from both images of a pair. The last batch
    may be short.
    """
    chosen = split_records(records, split)
    plan = epoch_plan(chosen, crop, seed, epoch)
    for start in range(0, len(plan), batch):
        yield assemble(chosen, plan[start:start + batch], crop)


def center_crop(img: np.ndarray, h: int, w: int) -> np.ndarray:
    img = reflect_to_at_least(img, h, w)
    top, left = (img.shape[0] - h) // 2, (img.shape[1] - w) // 2
    return img[top:top + h, left:left + w]
