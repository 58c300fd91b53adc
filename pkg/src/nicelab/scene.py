"""Synthetic panoptic-narrative scenes and the NICELAB1 dataset format.

A scene is a few horizontal "stuff" bands with rectangles and ellipses
("things") painted on top. Every category present gets one phrase; a thing
category with two or more instances gets a plural phrase whose mask is the
union of its instances. All geometry is integer arithmetic on a seeded PCG64
stream, so scenes are identical across platforms.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NICELAB1"
FORMAT_VERSION = 1

# token ids
TOK_A, TOK_SOME, TOK_THE = 0, 1, 2
COLOR_TOKENS = {"red": 3, "green": 4, "blue": 5, "yellow": 6, "magenta": 7, "cyan": 8}
SHAPE_TOKENS = {"box": 9, "ball": 10}
STUFF_TOKENS = {"sky": 11, "grass": 12, "water": 13, "sand": 14}
MIN_VOCAB = 16
VOCAB_WORDS = {TOK_A: "a", TOK_SOME: "some", TOK_THE: "the",
               **{v: k for k, v in COLOR_TOKENS.items()},
               **{v: k for k, v in SHAPE_TOKENS.items()},
               **{v: k for k, v in STUFF_TOKENS.items()}}

# (color word, shape, rgb, texture)
THING_CATEGORIES = [
    ("red", "box", (220, 40, 40), "flat"),
    ("green", "ball", (40, 200, 60), "checker"),
    ("blue", "box", (50, 60, 230), "checker"),
    ("yellow", "ball", (235, 220, 40), "flat"),
    ("magenta", "box", (210, 50, 200), "dots"),
    ("cyan", "ball", (40, 210, 220), "dots"),
]
STUFF_CATEGORIES = [
    ("sky", (150, 190, 240), "flat"),
    ("grass", (60, 110, 40), "vstripes"),
    ("water", (20, 40, 110), "hstripes"),
    ("sand", (200, 170, 120), "dots"),
]


class ConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``record`` is the index of the offending scene."""

    def __init__(self, message, record=None):
        self.record = record
        super().__init__(message if record is None else f"record {record}: {message}")


class DatasetVersionError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    height: int = 64
    width: int = 64
    min_instances: int = 1
    max_instances: int = 4
    min_stuff: int = 1
    max_stuff: int = 2
    max_phrases: int = 6
    vocab_size: int = MIN_VOCAB
    min_size: int = 8
    max_size: int = 24
    repeat_prob: float = 0.35
    noise: int = 6
    # explicit thing category ids, one entry per instance; overrides random sampling
    thing_categories: tuple | None = None

    def validate(self):
        for name in ("height", "width"):
            v = getattr(self, name)
            if not 16 <= v <= 128:
                raise ConfigError(f"{name}={v} outside [16, 128]")
        if not 0 <= self.min_instances <= self.max_instances <= 8:
            raise ConfigError(f"instances range [{self.min_instances}, {self.max_instances}] must lie in [0, 8]")
        if not 1 <= self.min_stuff <= self.max_stuff <= len(STUFF_CATEGORIES):
            raise ConfigError(f"stuff range [{self.min_stuff}, {self.max_stuff}] invalid")
        if self.vocab_size < MIN_VOCAB:
            raise ConfigError(f"vocab_size={self.vocab_size} must be >= {MIN_VOCAB}")
        if self.max_phrases < self.max_stuff + 1:
            raise ConfigError("max_phrases must leave room for at least one thing phrase")
        if not 2 <= self.min_size <= self.max_size <= min(self.height, self.width) // 2:
            raise ConfigError(f"thing size range [{self.min_size}, {self.max_size}] invalid for the canvas")
        if self.thing_categories is not None:
            if len(self.thing_categories) > 8:
                raise ConfigError("at most 8 forced instances")
            if any(not 0 <= c < len(THING_CATEGORIES) for c in self.thing_categories):
                raise ConfigError("unknown thing category")


@dataclass(eq=False)
class PhraseAnnotation:
    tokens: list
    mask: np.ndarray  # uint8 H0 x W0 in {0, 1}
    box: tuple  # (x1, y1, x2, y2), half-open, pixels
    is_thing: bool
    is_plural: bool

    def __eq__(self, other):
        if not isinstance(other, PhraseAnnotation):
            return NotImplemented
        return (list(self.tokens) == list(other.tokens) and self.is_thing == other.is_thing
                and self.is_plural == other.is_plural and tuple(self.box) == tuple(other.box)
                and self.mask.shape == other.mask.shape and np.array_equal(self.mask, other.mask))

    @property
    def text(self) -> str:
        return " ".join(VOCAB_WORDS.get(t, f"<{t}>") for t in self.tokens)


@dataclass(eq=False)
class Scene:
    image: np.ndarray  # H0 x W0 x 3, values k/255
    phrases: list = field(default_factory=list)
    seed: int = 0

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.seed == other.seed and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image) and self.phrases == other.phrases)


def tight_box(mask: np.ndarray):
    """(min col, min row, max col + 1, max row + 1) of the support, or None if empty."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _texture(kind: str, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    if kind == "checker":
        return np.where(((ys // 3) + (xs // 3)) % 2 == 0, 30, -30)
    if kind == "vstripes":
        return np.where((xs // 2) % 2 == 0, 25, -25)
    if kind == "hstripes":
        return np.where((ys // 2) % 2 == 0, 35, -35)
    if kind == "dots":
        return np.where((ys % 4 == 0) & (xs % 4 == 0), 60, 0)
    return np.zeros_like(ys)


def _shape_mask(shape: str, x0: int, y0: int, w: int, h: int, H: int, W: int) -> np.ndarray:
    m = np.zeros((H, W), dtype=np.uint8)
    if shape == "box":
        m[y0:y0 + h, x0:x0 + w] = 1
        return m
    # ellipse inscribed in the w x h box, tested at doubled pixel-centre coordinates
    ys, xs = np.mgrid[0:h, 0:w]
    dx = 2 * xs + 1 - w
    dy = 2 * ys + 1 - h
    inside = dx * dx * h * h + dy * dy * w * w <= w * w * h * h
    m[y0:y0 + h, x0:x0 + w] = inside
    return m


def _band_cuts(rng, H: int, n: int):
    min_band = H // 4
    cuts = [0]
    for k in range(n - 1):
        lo = cuts[-1] + min_band
        hi = H - min_band * (n - 1 - k)
        cuts.append(int(rng.integers(lo, hi + 1)))
    cuts.append(H)
    return cuts


def generate_scene(seed: int, config: GenerationConfig | None = None) -> Scene:
    cfg = config or GenerationConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    H, W = cfg.height, cfg.width

    n_stuff = int(rng.integers(cfg.min_stuff, cfg.max_stuff + 1))
    stuff_ids = [int(s) for s in rng.permutation(len(STUFF_CATEGORIES))[:n_stuff]]
    cuts = _band_cuts(rng, H, n_stuff)

    if cfg.thing_categories is not None:
        wanted = list(cfg.thing_categories)
    else:
        n_inst = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        wanted = []
        budget = cfg.max_phrases - n_stuff
        for _ in range(n_inst):
            used = sorted(set(wanted))
            if used and (rng.random() < cfg.repeat_prob or len(used) >= budget):
                wanted.append(used[int(rng.integers(len(used)))])
            else:
                fresh = [c for c in range(len(THING_CATEGORIES)) if c not in used]
                wanted.append(fresh[int(rng.integers(len(fresh)))])

    placed = []  # (category, mask)
    boxes = []  # occupied rectangles (x0, y0, x1, y1) half-open
    for cat in wanted:
        for _ in range(60):
            w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            h = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            x0 = int(rng.integers(0, W - w + 1))
            y0 = int(rng.integers(0, H - h + 1))
            # one free pixel around each thing keeps same-category instances disconnected
            if all(x0 + w + 1 <= bx0 or bx1 + 1 <= x0 or y0 + h + 1 <= by0 or by1 + 1 <= y0
                   for bx0, by0, bx1, by1 in boxes):
                boxes.append((x0, y0, x0 + w, y0 + h))
                placed.append((cat, _shape_mask(THING_CATEGORIES[cat][1], x0, y0, w, h, H, W)))
                break

    ys, xs = np.mgrid[0:H, 0:W]
    img = np.zeros((H, W, 3), dtype=np.int64)
    thing_union = np.zeros((H, W), dtype=bool)
    phrases = []

    stuff_masks = []
    for k, sid in enumerate(stuff_ids):
        band = np.zeros((H, W), dtype=bool)
        band[cuts[k]:cuts[k + 1]] = True
        _, rgb, tex = STUFF_CATEGORIES[sid]
        img[band] = np.array(rgb) + _texture(tex, ys[band], xs[band])[:, None]
        stuff_masks.append(band)

    by_cat = {}
    for cat, m in placed:
        sel = m.astype(bool)
        _, _, rgb, tex = THING_CATEGORIES[cat]
        img[sel] = np.array(rgb) + _texture(tex, ys[sel], xs[sel])[:, None]
        thing_union |= sel
        by_cat.setdefault(cat, []).append(sel)

    for cat in sorted(by_cat):
        union = np.logical_or.reduce(by_cat[cat]).astype(np.uint8)
        plural = len(by_cat[cat]) >= 2
        color, shape, _, _ = THING_CATEGORIES[cat]
        tokens = [TOK_SOME if plural else TOK_A, COLOR_TOKENS[color], SHAPE_TOKENS[shape]]
        phrases.append(PhraseAnnotation(tokens, union, tight_box(union), True, plural))

    for sid, band in zip(stuff_ids, stuff_masks):
        m = (band & ~thing_union).astype(np.uint8)
        tokens = [TOK_THE, STUFF_TOKENS[STUFF_CATEGORIES[sid][0]]]
        phrases.append(PhraseAnnotation(tokens, m, tight_box(m), False, False))

    if cfg.noise:
        img = img + rng.integers(-cfg.noise, cfg.noise + 1, size=img.shape)
    img = np.clip(img, 0, 255).astype(np.uint8)
    return Scene(image=img.astype(np.float64) / 255.0, phrases=phrases, seed=int(seed))


def generate_dataset(seed: int, count: int, config: GenerationConfig | None = None) -> list:
    """Scene ``i`` uses seed ``seed + i``."""
    return [generate_scene(seed + i, config) for i in range(count)]


# ---------------------------------------------------------------- run-length encoding

def rle_encode(mask: np.ndarray) -> list:
    """Row-major (start, length) runs of ones."""
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    padded = np.concatenate([[0], flat, [0]])
    edges = np.flatnonzero(np.diff(padded))
    starts, ends = edges[0::2], edges[1::2]
    return [(int(s), int(e - s)) for s, e in zip(starts, ends)]


def rle_decode(runs, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=np.uint8)
    for start, length in runs:
        if start < 0 or length < 0 or start + length > flat.size:
            raise ValueError(f"run ({start}, {length}) exceeds mask of {flat.size} pixels")
        flat[start:start + length] = 1
    return flat.reshape(shape)


# ---------------------------------------------------------------- file io

def _write_scene(buf, scene: Scene):
    H, W = scene.height, scene.width
    buf.write(struct.pack("<qHHH", scene.seed, H, W, len(scene.phrases)))
    buf.write(np.round(scene.image * 255.0).astype(np.uint8).tobytes())
    for p in scene.phrases:
        buf.write(struct.pack("<H", len(p.tokens)))
        buf.write(struct.pack(f"<{len(p.tokens)}H", *p.tokens))
        flags = (1 if p.is_thing else 0) | (2 if p.is_plural else 0)
        box = p.box if p.box is not None else (0.0, 0.0, 0.0, 0.0)
        buf.write(struct.pack("<B4d", flags, *box))
        runs = rle_encode(p.mask)
        buf.write(struct.pack("<I", len(runs)))
        if runs:
            buf.write(np.asarray(runs, dtype="<u4").tobytes())


def dumps_dataset(scenes) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(scenes)))
    for s in scenes:
        _write_scene(buf, s)
    return buf.getvalue()


def save_dataset(scenes, path) -> None:
    Path(path).write_bytes(dumps_dataset(scenes))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.record = None

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError(f"unexpected end of file at byte {self.pos}", self.record)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def loads_dataset(data: bytes) -> list:
    r = _Reader(data)
    if r.read(len(MAGIC)) != MAGIC:
        raise DatasetFormatError("bad magic, not a NICELAB1 dataset")
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"dataset version {version}, this build reads version {FORMAT_VERSION}")
    scenes = []
    for idx in range(count):
        r.record = idx
        seed, H, W, n = r.unpack("<qHHH")
        if H == 0 or W == 0:
            raise DatasetFormatError("zero image extent", idx)
        img = np.frombuffer(r.read(H * W * 3), dtype=np.uint8).reshape(H, W, 3)
        phrases = []
        for _ in range(n):
            (nt,) = r.unpack("<H")
            tokens = list(r.unpack(f"<{nt}H"))
            flags, *box = r.unpack("<B4d")
            (nr,) = r.unpack("<I")
            runs = np.frombuffer(r.read(8 * nr), dtype="<u4").reshape(nr, 2)
            try:
                mask = rle_decode(runs.tolist(), (H, W))
            except ValueError as exc:
                raise DatasetFormatError(str(exc), idx) from None
            phrases.append(PhraseAnnotation(tokens, mask, tuple(box), bool(flags & 1), bool(flags & 2)))
        scenes.append(Scene(img.astype(np.float64) / 255.0, phrases, seed))
    if r.pos != len(data):
        raise DatasetFormatError(f"{len(data) - r.pos} trailing bytes after {count} records")
    return scenes


def load_dataset(path) -> list:
    return loads_dataset(Path(path).read_bytes())


def format_sidecar(scenes) -> str:
    """Human-readable per-scene phrase and box listing."""
    lines = [f"# {len(scenes)} scenes"]
    for i, s in enumerate(scenes):
        lines.append(f"scene {i} seed={s.seed} size={s.width}x{s.height} phrases={len(s.phrases)}")
        for j, p in enumerate(s.phrases):
            kind = "thing" if p.is_thing else "stuff"
            num = "plural" if p.is_plural else "single"
            box = ",".join(f"{v:g}" for v in p.box)
            lines.append(f"  [{j}] {p.text!r:<22s} {kind:<5s} {num:<6s} box=({box}) area={int(p.mask.sum())}")
    return "\n".join(lines) + "\n"
