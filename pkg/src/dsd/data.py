"""Procedural two-domain image datasets with held-out unknown classes.

Each class is a template of stroke primitives (bars, diagonals, corners,
blocks) laid out on the patch grid, so different patches carry different
class evidence. Source images are rendered from per-sample base content;
target images of known classes re-render the *same* base content through a
domain transform (per-channel affine colour change, translation jitter and
additive noise), so with all shift parameters at zero the known part of the
target domain is an exact copy of the source domain. Unknown classes appear
only in the target domain.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import ImageSample
from .numerics import make_rng

MAGIC = b"DSDDATA\x00"
VERSION = 1


def _primitive_library(g: int) -> list[tuple[str, np.ndarray, str]]:
    """(name, g x g cell mask, stroke) for every primitive on a g x g grid."""
    lib = []
    for i in range(g):
        m = np.zeros((g, g), bool)
        m[i, :] = True
        lib.append((f"hbar{i}", m, "h"))
        m = np.zeros((g, g), bool)
        m[:, i] = True
        lib.append((f"vbar{i}", m, "v"))
    lib.append(("diag", np.eye(g, dtype=bool), "d"))
    lib.append(("anti", np.fliplr(np.eye(g, dtype=bool)), "a"))
    half = max(1, g // 2)
    for name, (r0, c0) in {"tl": (0, 0), "tr": (0, g - half), "bl": (g - half, 0), "br": (g - half, g - half)}.items():
        m = np.zeros((g, g), bool)
        m[r0 : r0 + half, c0 : c0 + half] = True
        lib.append((f"block_{name}", m, "o"))
    for name, (r, c) in {"tl": (0, 0), "tr": (0, g - 1), "bl": (g - 1, 0), "br": (g - 1, g - 1)}.items():
        m = np.zeros((g, g), bool)
        m[r, :] = True
        m[:, c] = True
        lib.append((f"corner_{name}", m, "h" if r == 0 else "v"))
    return lib


@dataclass(frozen=True)
class SyntheticConfig:
    n_known: int = 4
    n_unknown: int = 3
    per_class: int = 50
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    parts_per_class: int = 2
    # within-domain variation of the shared base content
    content_noise_std: float = 0.15
    content_jitter: int = 1
    content_background: float = 0.0  # per-channel background offset drawn from [-b, b]
    # domain shift applied to the target domain
    color_gain_shift: float = 0.3
    color_bias_shift: float = 0.2
    noise_std: float = 0.1
    jitter: int = 0
    # "novel": every class uses its own primitives; "hybrid": unknown classes
    # recombine parts of known classes; "random": independent draws per class
    unknown_templates: str = "novel"
    # optional explicit templates: tuple of tuples of primitive names
    templates: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.n_known < 1 or self.n_unknown < 0 or self.per_class < 1:
            raise ValueError("need n_known >= 1, n_unknown >= 0, per_class >= 1")
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        for name in ("content_noise_std", "content_background", "color_gain_shift", "color_bias_shift", "noise_std"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.unknown_templates not in ("hybrid", "novel", "random"):
            raise ValueError(f"unknown_templates must be 'hybrid', 'novel' or 'random', got {self.unknown_templates!r}")
        if self.jitter < 0 or self.content_jitter < 0:
            raise ValueError("jitter must be non-negative")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["templates"] = [list(t) for t in self.templates]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        d["templates"] = tuple(tuple(t) for t in d.get("templates", ()))
        return cls(**d)


class HiddenLabels:
    """Target evaluation labels; only evaluation code calls :meth:`reveal`."""

    __slots__ = ("_values",)

    def __init__(self, values):
        self._values = np.asarray(values, dtype=np.int64)

    def reveal(self) -> np.ndarray:
        return self._values

    def __len__(self) -> int:
        return len(self._values)

    def __repr__(self) -> str:
        return f"HiddenLabels(n={len(self._values)})"


@dataclass
class DatasetSplit:
    source_x: np.ndarray  # (Ns, C, H, W)
    source_y: np.ndarray  # (Ns,)
    target_x: np.ndarray  # (Nt, C, H, W)
    target_labels: HiddenLabels
    n_known: int
    config: dict = field(default_factory=dict)

    @property
    def n_source(self) -> int:
        return len(self.source_x)

    @property
    def n_target(self) -> int:
        return len(self.target_x)

    def source_sample(self, i: int) -> ImageSample:
        return ImageSample(self.source_x[i], "source", int(self.source_y[i]))

    def target_sample(self, i: int) -> ImageSample:
        return ImageSample(self.target_x[i], "target")

    def with_target_labels(self, labels) -> "DatasetSplit":
        return dataclasses.replace(self, target_labels=HiddenLabels(labels))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _stroke_patch(kind: str, p: int) -> np.ndarray:
    patch = np.zeros((p, p))
    mid = p // 2
    lo, hi = max(0, mid - 1), min(p, mid + 1)
    if kind == "h":
        patch[lo:hi, :] = 1.0
    elif kind == "v":
        patch[:, lo:hi] = 1.0
    elif kind == "d":
        patch[np.arange(p), np.arange(p)] = 1.0
    elif kind == "a":
        patch[np.arange(p), p - 1 - np.arange(p)] = 1.0
    elif p > 2:
        patch[1 : p - 1, 1 : p - 1] = 1.0
    else:
        patch[:] = 1.0
    return patch


def render_template(parts, library: dict, size: int, patch: int) -> np.ndarray:
    """Grayscale (size x size) image of a template's strokes."""
    img = np.zeros((size, size))
    g = size // patch
    for name in parts:
        mask, stroke = library[name]
        sp = _stroke_patch(stroke, patch)
        for r in range(g):
            for c in range(g):
                if mask[r, c]:
                    cell = img[r * patch : (r + 1) * patch, c * patch : (c + 1) * patch]
                    np.maximum(cell, sp, out=cell)
    return img


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate the last two axes with zero fill."""
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = img[..., ys, xs]
    return out


def choose_templates(cfg: SyntheticConfig, rng: np.random.Generator) -> list[tuple[str, ...]]:
    lib = _primitive_library(cfg.grid)
    names = [n for n, _, _ in lib]
    masks = {n: m for n, m, _ in lib}
    total = cfg.n_known + cfg.n_unknown
    if cfg.templates:
        if len(cfg.templates) != total:
            raise ValueError(f"{len(cfg.templates)} templates given for {total} classes")
        chosen = [tuple(t) for t in cfg.templates]
        for t in chosen:
            for n in t:
                if n not in masks:
                    raise ValueError(f"unknown primitive {n!r}")
    elif cfg.unknown_templates == "hybrid":
        chosen = _hybrid_templates(cfg, names, rng)
    elif cfg.unknown_templates == "novel":
        chosen = _novel_templates(cfg, names, rng)
    else:
        chosen = _random_templates(cfg, names, rng)
    lib_map = {n: (m, s) for n, m, s in lib}
    rendered = [render_template(t, lib_map, cfg.image_size, cfg.patch_size) for t in chosen]
    for i in range(total):
        for j in range(i):
            if np.array_equal(rendered[i], rendered[j]):
                raise ValueError(f"class templates {chosen[j]} and {chosen[i]} collide")
    return chosen


def _random_templates(cfg: SyntheticConfig, names: list[str], rng: np.random.Generator) -> list[tuple[str, ...]]:
    """Every class draws its own random set of primitives."""
    total = cfg.n_known + cfg.n_unknown
    chosen, seen = [], set()
    attempts = 0
    while len(chosen) < total:
        attempts += 1
        if attempts > 10000:
            raise ValueError("could not find enough distinct class templates")
        parts = tuple(sorted(str(n) for n in rng.choice(names, size=cfg.parts_per_class, replace=False)))
        if parts in seen:
            continue
        seen.add(parts)
        chosen.append(parts)
    return chosen


def _novel_templates(cfg: SyntheticConfig, names: list[str], rng: np.random.Generator) -> list[tuple[str, ...]]:
    """Every class gets its own disjoint set of primitives."""
    total, p = cfg.n_known + cfg.n_unknown, cfg.parts_per_class
    if total * p > len(names):
        raise ValueError(f"{total} classes x {p} parts need more than the {len(names)} available primitives")
    pool = [str(names[i]) for i in rng.permutation(len(names))[: total * p]]
    return [tuple(sorted(pool[i * p : (i + 1) * p])) for i in range(total)]


def _hybrid_templates(cfg: SyntheticConfig, names: list[str], rng: np.random.Generator) -> list[tuple[str, ...]]:
    """Known classes get disjoint primitive sets; each unknown class mixes parts of different known classes."""
    k, p = cfg.n_known, cfg.parts_per_class
    if k * p > len(names):
        raise ValueError(f"{k} known classes x {p} parts need more than the {len(names)} available primitives")
    pool = [str(names[i]) for i in rng.permutation(len(names))[: k * p]]
    known = [tuple(sorted(pool[i * p : (i + 1) * p])) for i in range(k)]
    if cfg.n_unknown and k < 2:
        raise ValueError("hybrid unknown classes need at least 2 known classes")
    chosen, seen = list(known), set(known)
    attempts = 0
    while len(chosen) < k + cfg.n_unknown:
        attempts += 1
        if attempts > 10000:
            raise ValueError("could not find enough distinct hybrid templates")
        donors = rng.choice(k, size=min(p, k), replace=False)
        parts = [known[d][int(rng.integers(p))] for d in donors]
        while len(parts) < p:
            parts.append(known[int(donors[len(parts) % len(donors)])][int(rng.integers(p))])
        parts = tuple(sorted(set(parts)))
        if len(parts) < 2 or parts in seen:
            continue
        seen.add(parts)
        chosen.append(parts)
    return chosen


def _base_content(template: np.ndarray, cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    color = rng.uniform(0.5, 1.0, size=cfg.channels)
    j = cfg.content_jitter
    dy, dx = (rng.integers(-j, j + 1, size=2) if j else (0, 0))
    img = color[:, None, None] * _shift(template, int(dy), int(dx))[None]
    back = cfg.content_background * rng.uniform(-1.0, 1.0, size=cfg.channels)
    return img + back[:, None, None] + cfg.content_noise_std * rng.standard_normal(img.shape)


def domain_transform(cfg: SyntheticConfig, rng: np.random.Generator):
    """Per-channel gain and bias of the target domain."""
    gain = 1.0 + cfg.color_gain_shift * rng.uniform(-1.0, 1.0, size=cfg.channels)
    bias = cfg.color_bias_shift * rng.uniform(-1.0, 1.0, size=cfg.channels)
    return gain, bias


def _to_target(img: np.ndarray, gain, bias, cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    j = cfg.jitter
    dy, dx = (rng.integers(-j, j + 1, size=2) if j else (0, 0))
    out = _shift(img, int(dy), int(dx))
    out = gain[:, None, None] * out + bias[:, None, None]
    if cfg.noise_std:
        out = out + cfg.noise_std * rng.standard_normal(out.shape)
    else:
        rng.standard_normal(out.shape)  # keep the stream aligned across shift settings
    return out


def generate(cfg: SyntheticConfig) -> DatasetSplit:
    rng = make_rng(cfg.seed)
    templates = choose_templates(cfg, rng)
    lib = {n: (m, s) for n, m, s in _primitive_library(cfg.grid)}
    images = [render_template(t, lib, cfg.image_size, cfg.patch_size) for t in templates]
    # separate streams: content does not depend on the shift settings
    content_rng, shift_rng = (np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    gain, bias = domain_transform(cfg, shift_rng)

    src_x, src_y, tgt_x, tgt_y = [], [], [], []
    for k in range(cfg.n_known):
        for _ in range(cfg.per_class):
            base = _base_content(images[k], cfg, content_rng)
            src_x.append(base)
            src_y.append(k)
            tgt_x.append(_to_target(base, gain, bias, cfg, shift_rng))
            tgt_y.append(k)
    for u in range(cfg.n_unknown):
        k = cfg.n_known + u
        for _ in range(cfg.per_class):
            base = _base_content(images[k], cfg, content_rng)
            tgt_x.append(_to_target(base, gain, bias, cfg, shift_rng))
            tgt_y.append(k)
    meta = cfg.to_dict()
    meta["class_templates"] = [list(t) for t in templates]
    shape = (0,) + cfg.image_shape
    return DatasetSplit(
        source_x=np.array(src_x).reshape((-1,) + cfg.image_shape) if src_x else np.zeros(shape),
        source_y=np.array(src_y, dtype=np.int64),
        target_x=np.array(tgt_x).reshape((-1,) + cfg.image_shape) if tgt_x else np.zeros(shape),
        target_labels=HiddenLabels(tgt_y),
        n_known=cfg.n_known,
        config=meta,
    )


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------

_REC = struct.Struct("<BBi")


def save(split: DatasetSplit, path) -> Path:
    """Write the dataset container (see README for the layout)."""
    path = Path(path)
    shape = tuple(split.source_x.shape[1:]) if split.n_source else tuple(split.target_x.shape[1:])
    header = json.dumps(
        {
            "config": split.config,
            "n_known": split.n_known,
            "n_source": split.n_source,
            "n_target": split.n_target,
            "shape": list(shape),
        },
        sort_keys=True,
    ).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for x, y in zip(split.source_x, split.source_y):
            fh.write(_REC.pack(0, 0, int(y)))
            fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
        for x, y in zip(split.target_x, split.target_labels.reveal()):
            fh.write(_REC.pack(1, 1, int(y)))
            fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
    return path


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("dataset file is truncated")
    return buf


def load(path) -> DatasetSplit:
    path = Path(path)
    with path.open("rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a dataset file (bad magic)")
        version, hlen = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        shape = tuple(header["shape"])
        n_pix = int(np.prod(shape))
        out = {0: ([], []), 1: ([], [])}
        for _ in range(header["n_source"] + header["n_target"]):
            domain, hidden, label = _REC.unpack(_read_exact(fh, _REC.size))
            if domain not in (0, 1) or hidden != domain:
                raise ValueError("corrupt dataset record")
            pix = np.frombuffer(_read_exact(fh, 8 * n_pix), dtype="<f8").astype(np.float64).reshape(shape)
            out[domain][0].append(pix)
            out[domain][1].append(label)
        if fh.read(1):
            raise ValueError("trailing bytes after the last dataset record")

    def stack(xs):
        return np.array(xs).reshape((-1,) + shape) if xs else np.zeros((0,) + shape)

    return DatasetSplit(
        source_x=stack(out[0][0]),
        source_y=np.array(out[0][1], dtype=np.int64),
        target_x=stack(out[1][0]),
        target_labels=HiddenLabels(out[1][1]),
        n_known=header["n_known"],
        config=header["config"],
    )


def export_manifest(split: DatasetSplit, path) -> Path:
    """CSV with one row per sample: index, domain, visible label (blank for target)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "domain", "visible_label"])
        for i, y in enumerate(split.source_y):
            w.writerow([i, "source", int(y)])
        for i in range(split.n_target):
            w.writerow([split.n_source + i, "target", ""])
    return path
