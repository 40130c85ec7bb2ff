"""Feature datasets: online encoding/sampling streams, the offline cache
format, and the synthetic shapes segmentation data."""
from __future__ import annotations

import io
import struct
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch

from gendistill.errors import CacheFormatError, ConfigError, ShapeError
from gendistill.pyramid import FeaturePyramid
from gendistill.rng import keyed_generator, keyed_numpy, num_workers as env_workers
from gendistill.teacher import (
    DiffusionTeacher,
    EncodeMode,
    GenerativeSampler,
    draw_latents,
    encode_features,
    sample_with_features,
)

CACHE_MAGIC = b"DTFC"
CACHE_VERSION = 1
_FLAG_SOFT = 0x01
_FLAG_LABEL = 0x02
_FLIP_TAG = 0xF11B


@dataclass(frozen=True)
class FeatureRecord:
    sample_id: int
    image: torch.Tensor  # [3,H,W]
    teacher_features: FeaturePyramid  # batch dim 1
    soft_logits: torch.Tensor | None = None  # [K,h,w]
    label: torch.Tensor | None = None  # [H,W] int

    def __post_init__(self):
        if tuple(self.image.shape[-2:]) != tuple(self.teacher_features.input_resolution):
            raise ShapeError(
                f"record {self.sample_id}: image {tuple(self.image.shape)} vs features at "
                f"{self.teacher_features.input_resolution}"
            )


@dataclass(frozen=True)
class DatasetSpec:
    mode: str = "encoded"  # encoded | synthesized
    cache: str = "online"  # online | offline
    encode: EncodeMode = field(default_factory=EncodeMode)
    augmentation: str = "horizontal_flip"  # none | horizontal_flip

    def validate(self) -> None:
        if self.mode not in ("encoded", "synthesized"):
            raise ConfigError(f"unknown dataset mode {self.mode!r}")
        if self.cache not in ("online", "offline"):
            raise ConfigError(f"unknown cache mode {self.cache!r}")
        if self.augmentation not in ("none", "horizontal_flip"):
            raise ConfigError(f"unknown augmentation {self.augmentation!r}")


def flip_coin(seed: int, sample_id: int, epoch: int) -> bool:
    return bool(torch.rand((), generator=keyed_generator(_FLIP_TAG, seed, sample_id, epoch)) < 0.5)


def bounded_map(fn: Callable, items: Iterable, workers: int = 1, depth: int = 2) -> Iterator:
    """Ordered lazy map holding at most ``depth`` results in flight."""
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= depth:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def _chunks(seq: Sequence[int], size: int) -> Iterator[list[int]]:
    for s in range(0, len(seq), size):
        yield list(seq[s:s + size])


def _split_records(ids, images, pyramid, soft=None, labels=None) -> list[FeatureRecord]:
    return [
        FeatureRecord(
            int(sid),
            images[i],
            pyramid.select(i),
            None if soft is None else soft[i],
            None if labels is None else labels[i],
        )
        for i, sid in enumerate(ids)
    ]


def iterate_encoded(
    teacher: DiffusionTeacher,
    images: torch.Tensor,
    spec: DatasetSpec,
    epoch: int,
    *,
    order: Sequence[int] | None = None,
    interpreter=None,
    labels: torch.Tensor | None = None,
    chunk_size: int = 32,
    prefetch_depth: int = 64,
    workers: int | None = None,
) -> Iterator[FeatureRecord]:
    """Stream one encoded record per image, sample ids = row indices of ``images``.

    Stochastic encoding draws fresh noise every epoch; deterministic encoding
    reuses per-sample noise. With horizontal_flip a keyed coin decides whether
    the image is mirrored before the teacher sees it. When ``interpreter`` is
    given its soft logits are attached to every record.
    """
    spec.validate()
    if spec.mode != "encoded":
        raise ConfigError("iterate_encoded needs spec.mode == 'encoded'")
    spec.encode.validate(teacher.schedule.T)
    if images.dim() != 4 or images.shape[-1] % 32 or images.shape[-2] % 32:
        raise ShapeError(f"teacher needs [N,3,H,W] with H, W divisible by 32; got {tuple(images.shape)}")
    ids = list(range(images.shape[0])) if order is None else list(order)
    workers = env_workers() if workers is None else workers
    depth = max(1, prefetch_depth // chunk_size)

    def encode_chunk(chunk: list[int]) -> list[FeatureRecord]:
        x = images[chunk].clone()
        if spec.augmentation == "horizontal_flip":
            for i, sid in enumerate(chunk):
                if flip_coin(spec.encode.seed, sid, epoch):
                    x[i] = x[i].flip(-1)
        pyr = encode_features(teacher, x, spec.encode, sample_ids=chunk, epoch=epoch)
        soft = None
        if interpreter is not None:
            from gendistill.interpreter import emit_soft_labels

            soft = emit_soft_labels(interpreter, pyr)
        y = None
        if labels is not None:
            y = labels[chunk].clone()
            if spec.augmentation == "horizontal_flip":
                for i, sid in enumerate(chunk):
                    if flip_coin(spec.encode.seed, sid, epoch):
                        y[i] = y[i].flip(-1)
        return _split_records(chunk, x, pyr, soft, y)

    for records in bounded_map(encode_chunk, _chunks(ids, chunk_size), workers, depth):
        yield from records


def iterate_synthesized(
    sampler: GenerativeSampler,
    n: int,
    spec: DatasetSpec,
    seed: int,
    *,
    chunk_size: int = 8,
    interpreter=None,
) -> Iterator[FeatureRecord]:
    """Stream ``n`` freshly sampled (image, features) records without labels."""
    spec.validate()
    if spec.mode != "synthesized":
        raise ConfigError("iterate_synthesized needs spec.mode == 'synthesized'")
    if n <= 0:
        raise ConfigError(f"n must be positive, got {n}")
    for start in range(0, n, chunk_size):
        m = min(chunk_size, n - start)
        z = draw_latents(sampler, m, seed, offset=start)
        imgs, pyr = sample_with_features(sampler, z)
        ids = list(range(start, start + m))
        if spec.augmentation == "horizontal_flip":
            flips = [flip_coin(seed, sid, 0) for sid in ids]
            imgs = torch.stack([im.flip(-1) if f else im for im, f in zip(imgs, flips)])
            pyr = FeaturePyramid.cat([pyr.select(i).flip() if f else pyr.select(i) for i, f in enumerate(flips)])
        soft = None
        if interpreter is not None:
            from gendistill.interpreter import emit_soft_labels

            soft = emit_soft_labels(interpreter, pyr)
        yield from _split_records(ids, imgs, pyr, soft)


# --------------------------------------------------------------------- cache


def record_nbytes(image_shape, level_shapes: dict, soft_shape=None, label_shape=None) -> int:
    """Byte size of one cache record for the given tensor shapes."""
    n = 8 + 12 + 4 * int(np.prod(image_shape)) + 4
    for shape in level_shapes.values():
        n += 16 + 4 * int(np.prod(shape))
    n += 1
    if soft_shape is not None:
        n += 12 + 4 * int(np.prod(soft_shape))
    if label_shape is not None:
        n += 8 + 4 * int(np.prod(label_shape))
    return n


def _f32(t: torch.Tensor) -> bytes:
    return t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()


def _write_record(fh, rec: FeatureRecord) -> None:
    C, H, W = rec.image.shape
    fh.write(struct.pack("<Q3I", rec.sample_id, C, H, W))
    fh.write(_f32(rec.image))
    fh.write(struct.pack("<I", len(rec.teacher_features)))
    for l, t in rec.teacher_features.items():
        if t.shape[0] != 1:
            raise ShapeError("cache records must hold single-sample pyramids")
        _, c, h, w = t.shape
        fh.write(struct.pack("<4I", l, c, h, w))
        fh.write(_f32(t[0]))
    flags = (_FLAG_SOFT if rec.soft_logits is not None else 0) | (_FLAG_LABEL if rec.label is not None else 0)
    fh.write(struct.pack("<B", flags))
    if rec.soft_logits is not None:
        fh.write(struct.pack("<3I", *rec.soft_logits.shape))
        fh.write(_f32(rec.soft_logits))
    if rec.label is not None:
        fh.write(struct.pack("<2I", *rec.label.shape))
        fh.write(rec.label.to(torch.int32).contiguous().numpy().astype("<i4", copy=False).tobytes())


def export_cache(stream: Iterable[FeatureRecord], path) -> int:
    """Write records to ``path``; returns the number of records written."""
    path = Path(path)
    count = 0
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<2I", CACHE_VERSION, 0))
        for rec in stream:
            _write_record(fh, rec)
            count += 1
        fh.seek(8)
        fh.write(struct.pack("<I", count))
    return count


class _Reader:
    def __init__(self, fh: io.BufferedReader):
        self.fh = fh

    def read(self, n: int) -> bytes:
        offset = self.fh.tell()
        buf = self.fh.read(n)
        if len(buf) != n:
            raise CacheFormatError(f"truncated cache: wanted {n} bytes at offset {offset}, got {len(buf)}")
        return buf

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def array(self, shape, dtype: str) -> torch.Tensor:
        n = int(np.prod(shape))
        arr = np.frombuffer(self.read(4 * n), dtype=dtype).reshape(shape)
        return torch.from_numpy(arr.astype(dtype[1:], copy=True))


def load_cache(path) -> Iterator[FeatureRecord]:
    """Stream records back from a cache file written by :func:`export_cache`."""
    with open(Path(path), "rb") as fh:
        r = _Reader(fh)
        magic = r.read(4)
        if magic != CACHE_MAGIC:
            raise CacheFormatError(f"bad magic {magic!r} at offset 0 (expected {CACHE_MAGIC!r})")
        version, count = r.unpack("<2I")
        if version != CACHE_VERSION:
            raise CacheFormatError(f"unsupported cache version {version} at offset 4 (expected {CACHE_VERSION})")
        for _ in range(count):
            sid, C, H, W = r.unpack("<Q3I")
            image = r.array((C, H, W), "<f4")
            (n_levels,) = r.unpack("<I")
            levels = {}
            for _ in range(n_levels):
                l, c, h, w = r.unpack("<4I")
                levels[l] = r.array((1, c, h, w), "<f4")
            offset = fh.tell()
            (flags,) = r.unpack("<B")
            if flags & ~(_FLAG_SOFT | _FLAG_LABEL):
                raise CacheFormatError(f"unknown record flags {flags:#x} at offset {offset}")
            soft = label = None
            if flags & _FLAG_SOFT:
                shape = r.unpack("<3I")
                soft = r.array(shape, "<f4")
            if flags & _FLAG_LABEL:
                shape = r.unpack("<2I")
                label = r.array(shape, "<i4").to(torch.int64)
            try:
                pyramid = FeaturePyramid(levels, (H, W))
            except ShapeError as err:
                raise CacheFormatError(f"inconsistent pyramid before offset {fh.tell()}: {err}") from err
            yield FeatureRecord(int(sid), image, pyramid, soft, label)
        trailing = fh.read(1)
        if trailing:
            raise CacheFormatError(f"unexpected trailing bytes at offset {fh.tell() - 1}")


# -------------------------------------------------------------- feature sources


class EncodedFeatureSource:
    """Online encoder over a fixed image set, re-encoded every epoch."""

    def __init__(self, teacher, images, spec: DatasetSpec, interpreter=None, chunk_size=32, prefetch_depth=128):
        self.teacher, self.images, self.spec = teacher, images, spec
        self.interpreter = interpreter
        self.chunk_size, self.prefetch_depth = chunk_size, prefetch_depth

    def __len__(self):
        return self.images.shape[0]

    def records(self, epoch: int, order=None) -> Iterator[FeatureRecord]:
        return iterate_encoded(
            self.teacher, self.images, self.spec, epoch, order=order, interpreter=self.interpreter,
            chunk_size=self.chunk_size, prefetch_depth=self.prefetch_depth,
        )


class CachedFeatureSource:
    """Records loaded once from an offline cache; identical every epoch."""

    def __init__(self, path):
        self.path = Path(path)
        self._records = {r.sample_id: r for r in load_cache(self.path)}
        self._ids = sorted(self._records)

    def __len__(self):
        return len(self._ids)

    def records(self, epoch: int, order=None) -> Iterator[FeatureRecord]:
        ids = self._ids if order is None else [self._ids[i] for i in order]
        return (self._records[i] for i in ids)


class SynthesizedFeatureSource:
    """Fresh samples from a generator each epoch."""

    def __init__(self, sampler, n: int, spec: DatasetSpec, seed: int = 0, interpreter=None):
        self.sampler, self.n, self.spec, self.seed = sampler, n, spec, seed
        self.interpreter = interpreter

    def __len__(self):
        return self.n

    def records(self, epoch: int, order=None) -> Iterator[FeatureRecord]:
        from gendistill.rng import key_seed

        return iterate_synthesized(
            self.sampler, self.n, self.spec, key_seed(self.seed, epoch) % 2**31, interpreter=self.interpreter
        )


# ------------------------------------------------------------ shapes dataset

SHAPES = ("circle", "square", "triangle", "cross")


def _smooth_noise(rng: np.random.Generator, res: int, cells: int) -> np.ndarray:
    coarse = rng.standard_normal((3, cells, cells))
    t = torch.from_numpy(coarse)[None]
    up = torch.nn.functional.interpolate(t, size=(res, res), mode="bicubic", align_corners=True)
    return up[0].numpy()


def _shape_mask(kind: str, yy, xx, cy, cx, r, angle) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "circle":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return (np.abs(u) <= r * 0.8) & (np.abs(v) <= r * 0.8)
    if kind == "triangle":
        # equilateral triangle with circumradius r
        k = np.sqrt(3.0)
        return (v >= -r / 2) & (k * u + v <= r) & (-k * u + v <= r)
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(u) <= r) & (np.abs(v) <= w)) | ((np.abs(v) <= r) & (np.abs(u) <= w))
    raise ValueError(kind)


def generate_shapes_dataset(
    n: int, classes: int = 5, resolution: int = 64, seed: int = 0, max_shapes: int = 3
) -> tuple[torch.Tensor, torch.Tensor]:
    """Images in [-1, 1] of colored shapes on textured backgrounds, with masks.

    Class 0 is background; class k >= 1 is shape type ``SHAPES[(k-1) % 4]``
    drawn at a size band that depends on ``(k-1) // 4``. Shape color is
    random and independent of class, so classes must be told apart by form.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if resolution % 32:
        raise ConfigError(f"resolution {resolution} is not divisible by 32")
    if n < 0:
        raise ConfigError("n must be non-negative")
    res = resolution
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    images = np.empty((n, 3, res, res), dtype=np.float32)
    masks = np.zeros((n, res, res), dtype=np.int64)
    for i in range(n):
        rng = keyed_numpy(0x5AE5, seed, i)
        base = rng.uniform(-0.6, 0.6, size=(3, 1, 1))
        img = base + 0.25 * _smooth_noise(rng, res, 4) + 0.08 * rng.standard_normal((3, res, res))
        mask = masks[i]
        for _ in range(rng.integers(1, max_shapes + 1)):
            k = int(rng.integers(1, classes))
            kind = SHAPES[(k - 1) % len(SHAPES)]
            band = (k - 1) // len(SHAPES)
            r = rng.uniform(0.09, 0.17) * res * (1 + 0.5 * band)
            cy, cx = rng.uniform(r, res - r, size=2)
            region = _shape_mask(kind, yy, xx, cy, cx, r, rng.uniform(0, 2 * np.pi))
            color = rng.uniform(-1, 1, size=3)
            shade = color[:, None, None] + 0.05 * rng.standard_normal((3, res, res))
            img = np.where(region[None], shade, img)
            mask[region] = k
        images[i] = np.clip(img, -1, 1)
    return torch.from_numpy(images), torch.from_numpy(masks)
