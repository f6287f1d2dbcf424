"""Frame sequences: moving-sprite synthesis, image I/O, splits and sliding windows."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image


class DataError(ValueError):
    """Unreadable or inconsistent dataset files."""


@dataclass(frozen=True)
class FrameSequence:
    id: str
    frames: tuple[np.ndarray, ...]  # each 1×h×w, values in [0, 1]
    masks: tuple[np.ndarray, ...]  # each h×w, values in {0, 1}

    def __post_init__(self):
        frames = tuple(np.asarray(f, dtype=np.float64).reshape((1,) + np.shape(f)[-2:]) for f in self.frames)
        masks = tuple(np.asarray(m, dtype=np.float64).reshape(np.shape(m)[-2:]) for m in self.masks)
        if not frames or len(frames) != len(masks):
            raise DataError(f"sequence {self.id!r}: need equal, nonzero numbers of frames and masks")
        shape = frames[0].shape
        if any(f.shape != shape for f in frames) or any(m.shape != shape[1:] for m in masks):
            raise DataError(f"sequence {self.id!r}: frames and masks must share one shape")
        if any(not np.isin(m, (0.0, 1.0)).all() for m in masks):
            raise DataError(f"sequence {self.id!r}: masks must be binary")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "masks", masks)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape[1:]

    def slice(self, start: int, stop: int, suffix: str) -> "FrameSequence":
        return FrameSequence(f"{self.id}{suffix}", self.frames[start:stop], self.masks[start:stop])


# --- synthesis ---------------------------------------------------------------


@dataclass
class MovingSpriteConfig:
    height: int = 64
    width: int = 64
    length: int = 20
    sprites: int = 1
    velocity_range: tuple[int, int] = (1, 3)  # |pixels/frame| per axis
    glyph_source: str | None = None  # IDX file of glyph images; procedural when None
    glyph_size: tuple[int, int] = (10, 14)
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("sequence length must be >= 1")
        if self.sprites < 1:
            raise ValueError("need at least one sprite")


def threshold_labels(frame, tau: float = 0.5) -> np.ndarray:
    """Binary mask: 1 where the pixel exceeds ``tau``."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    return (arr > tau).astype(np.float64)


def procedural_glyph(rng: np.random.Generator, size: int) -> np.ndarray:
    """Anti-aliased disc, bar or cross on a size×size tile (4× supersampled)."""
    ss = 4
    n = size * ss
    yy, xx = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2.0
    kind = rng.integers(3)
    if kind == 0:
        hi = ((yy - c) ** 2 + (xx - c) ** 2) <= (n / 2.0 - ss) ** 2
    else:
        thick = n * rng.uniform(0.25, 0.4) / 2
        horiz = np.abs(yy - c) <= thick
        vert = np.abs(xx - c) <= thick
        if kind == 1:
            hi = vert if rng.integers(2) else horiz
            margin = ss
            hi = hi & (yy >= margin) & (yy < n - margin) & (xx >= margin) & (xx < n - margin)
        else:
            hi = (horiz | vert) & (yy >= ss) & (yy < n - ss) & (xx >= ss) & (xx < n - ss)
    return hi.reshape(size, ss, size, ss).mean(axis=(1, 3))


def read_idx(path) -> np.ndarray:
    """Array from an IDX file (unsigned-byte payloads, e.g. magic 0x00000803)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DataError(f"{path}: unsupported IDX magic {raw[:4].hex()}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != math.prod(dims):
        raise DataError(f"{path}: expected {math.prod(dims)} values, found {body.size}")
    return body.reshape(dims)


def write_idx(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, images.ndim) + struct.pack(f">{images.ndim}I", *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def render_sequence(glyphs, starts, velocities, canvas: tuple[int, int], length: int, tau: float = 0.5) -> tuple[list, list]:
    """Translate glyphs with constant velocities, reflecting at the canvas edges.

    ``starts`` and ``velocities`` are (x, y) pairs, x counting columns and y
    rows. Sprites are composited with a per-pixel max; masks threshold the
    composited frame.
    """
    H, W = canvas
    pos = [list(map(int, s)) for s in starts]
    vel = [list(map(int, v)) for v in velocities]
    frames, masks = [], []
    for _ in range(length):
        frame = np.zeros((H, W))
        for g, (c, r) in zip(glyphs, pos):
            gh, gw = g.shape
            np.maximum(frame[r:r + gh, c:c + gw], g, out=frame[r:r + gh, c:c + gw])
        frames.append(frame[None])
        masks.append(threshold_labels(frame, tau))
        for g, p, v in zip(glyphs, pos, vel):
            for axis, limit in ((0, W - g.shape[1]), (1, H - g.shape[0])):
                nxt = p[axis] + v[axis]
                if nxt < 0 or nxt > limit:
                    v[axis] = -v[axis]
                    nxt = p[axis] + v[axis]
                    nxt = min(max(nxt, 0), limit)
                p[axis] = nxt
    return frames, masks


def synthesize_moving_sprites(cfg: MovingSpriteConfig, seq_id: str = "seq") -> FrameSequence:
    rng = np.random.default_rng(cfg.seed)
    if cfg.glyph_source:
        bank = read_idx(cfg.glyph_source).astype(np.float64) / 255.0
        glyphs = [bank[i] for i in rng.integers(len(bank), size=cfg.sprites)]
    else:
        lo, hi = cfg.glyph_size
        glyphs = [procedural_glyph(rng, int(rng.integers(lo, hi + 1))) for _ in range(cfg.sprites)]
    vmin, vmax = cfg.velocity_range
    starts, vels = [], []
    for g in glyphs:
        gh, gw = g.shape
        if gh > cfg.height or gw > cfg.width:
            raise ValueError(f"sprite {gh}×{gw} does not fit the {cfg.height}×{cfg.width} canvas")
        if max(abs(vmin), abs(vmax)) >= min(cfg.height, cfg.width):
            raise ValueError("velocity magnitude must be smaller than the canvas")
        starts.append((int(rng.integers(0, cfg.width - gw + 1)), int(rng.integers(0, cfg.height - gh + 1))))
        speed = rng.integers(vmin, vmax + 1, size=2)
        sign = rng.choice([-1, 1], size=2)
        vels.append(tuple(int(s) for s in speed * sign))
    frames, masks = render_sequence(glyphs, starts, vels, (cfg.height, cfg.width), cfg.length, cfg.threshold)
    return FrameSequence(seq_id, tuple(frames), tuple(masks))


def synthesize_dataset(cfg: MovingSpriteConfig, count: int) -> list[FrameSequence]:
    """``count`` sequences; sequence i uses seed ``cfg.seed * 1000 + i``."""
    return [
        synthesize_moving_sprites(replace(cfg, seed=cfg.seed * 1000 + i), seq_id=f"seq_{i:03d}")
        for i in range(count)
    ]


# --- image files ----------------------------------------------------------------------


def read_gray(path) -> np.ndarray:
    """8-bit grayscale image (PGM or PNG) normalised to [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1"):
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as err:
        raise DataError(f"cannot read image {path}: {err}") from None
    return arr / 255.0


def write_gray(path, image) -> None:
    """Write a [0, 1] image as 8-bit grayscale; the suffix picks PGM or PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    img = Image.fromarray(np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8), mode="L")
    path = Path(path)
    img.save(path, format="PPM" if path.suffix.lower() == ".pgm" else "PNG")


def _stems(folder: Path) -> dict[str, Path]:
    out = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() in (".pgm", ".png"):
            out[p.stem] = p
    return out


def load_sequence_dir(path) -> FrameSequence:
    """Read ``frames/NNNN.(pgm|png)`` and ``masks/NNNN.(pgm|png)`` from ``path``."""
    root = Path(path)
    fdir, mdir = root / "frames", root / "masks"
    if not fdir.is_dir() or not mdir.is_dir():
        raise DataError(f"{root}: expected frames/ and masks/ directories")
    frames_by, masks_by = _stems(fdir), _stems(mdir)
    for stem in frames_by:
        if stem not in masks_by:
            raise DataError(f"{root}: missing masks/{stem} for frames/{stem}")
    for stem in masks_by:
        if stem not in frames_by:
            raise DataError(f"{root}: missing frames/{stem} for masks/{stem}")
    frames, masks = [], []
    shape = None
    for stem in sorted(frames_by):
        f = read_gray(frames_by[stem])
        m = (read_gray(masks_by[stem]) > 0.5).astype(np.float64)
        if shape is None:
            shape = f.shape
        for kind, arr in (("frames", f), ("masks", m)):
            if arr.shape != shape:
                raise DataError(f"{root}: {kind}/{stem} has shape {arr.shape}, expected {shape}")
        frames.append(f[None])
        masks.append(m)
    if not frames:
        raise DataError(f"{root}: no frames found")
    return FrameSequence(root.name, tuple(frames), tuple(masks))


def save_sequence_dir(seq: FrameSequence, path, suffix: str = ".pgm") -> None:
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, (f, m) in enumerate(zip(seq.frames, seq.masks)):
        write_gray(root / "frames" / f"{i:04d}{suffix}", f)
        write_gray(root / "masks" / f"{i:04d}{suffix}", m)


def load_dataset_dir(path) -> list[FrameSequence]:
    """Every sequence directory below ``path`` (or ``path`` itself if it is one)."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    if (root / "frames").is_dir():
        return [load_sequence_dir(root)]
    seqs = [load_sequence_dir(p) for p in sorted(root.iterdir()) if p.is_dir() and (p / "frames").is_dir()]
    if not seqs:
        raise DataError(f"{root}: no sequence directories found")
    return seqs


# --- splits and windows -----------------------------------------------------------------

SPLIT_POLICIES = ("half_per_sequence", "seventy_thirty_by_sequence")


@dataclass
class DatasetSplit:
    train: list[FrameSequence]
    test: list[FrameSequence]
    policy: str = field(default="half_per_sequence")


def split(sequences: Sequence[FrameSequence], policy: str = "half_per_sequence", seed: int = 0) -> DatasetSplit:
    """Per-sequence half/half split, or a seeded 70/30 split of whole sequences."""
    if not sequences:
        raise ValueError("cannot split an empty dataset")
    if policy == "half_per_sequence":
        train, test = [], []
        for seq in sequences:
            if len(seq) < 2:
                raise ValueError(f"sequence {seq.id!r} has {len(seq)} frame(s); the half split needs at least 2")
            cut = math.ceil(len(seq) / 2)
            train.append(seq.slice(0, cut, "/train"))
            test.append(seq.slice(cut, len(seq), "/test"))
        return DatasetSplit(train, test, policy)
    if policy == "seventy_thirty_by_sequence":
        order = np.random.default_rng(seed).permutation(len(sequences))
        n_train = int(math.floor(0.7 * len(sequences)))
        return DatasetSplit([sequences[i] for i in order[:n_train]], [sequences[i] for i in order[n_train:]], policy)
    raise ValueError(f"unknown split policy {policy!r}; expected one of {SPLIT_POLICIES}")


@dataclass(frozen=True)
class Window:
    seq_id: str
    last_index: int
    frames: tuple[np.ndarray, ...]
    target: np.ndarray


def sliding_windows(seq: FrameSequence, L: int) -> list[Window]:
    """Stride-1 windows of ``L`` frames; each target is the mask of the window's last frame."""
    if L < 1:
        raise ValueError("window length must be >= 1")
    if len(seq) < L:
        raise ValueError(f"sequence {seq.id!r} has {len(seq)} frames, shorter than the window {L}")
    return [Window(seq.id, i + L - 1, seq.frames[i:i + L], seq.masks[i + L - 1]) for i in range(len(seq) - L + 1)]


def all_windows(sequences: Sequence[FrameSequence], L: int) -> list[Window]:
    out = []
    for seq in sequences:
        if len(seq) >= L:
            out.extend(sliding_windows(seq, L))
    return out
