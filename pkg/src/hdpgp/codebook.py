"""Visual-word codebook: flow quantization, clip segmentation and corpus I/O.

A visual word is a (cell, direction) pair.  Cells are non-overlapping
``cell_size`` squares tiling the frame (partial border cells are dropped) and
directions are 8 bins of 45 degrees, bin 0 pointing along +x and bins
increasing counterclockwise as seen on screen (image y grows downward, so the
angle is measured on ``(dx, -dy)``).

Word index layout::

    index = ((cell_y * n_cols) + cell_x) * n_directions + direction
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from hdpgp.errors import DataError

CORPUS_SCHEMA = "corpus/1"
FLO_MAGIC = b"PIEH"


@dataclass(frozen=True)
class GridSpec:
    frame_width: int
    frame_height: int
    cell_size: int = 8
    n_directions: int = 8
    magnitude_threshold: float = 1.0

    def __post_init__(self):
        if self.cell_size < 1:
            raise DataError(f"cell_size must be positive, got {self.cell_size}")
        if self.n_directions != 8:
            raise DataError("only 8 direction bins are supported")
        if self.frame_width < self.cell_size or self.frame_height < self.cell_size:
            raise DataError(
                f"frame {self.frame_width}x{self.frame_height} smaller than one "
                f"{self.cell_size}px cell"
            )
        if not self.magnitude_threshold >= 0:
            raise DataError("magnitude_threshold must be non-negative")

    @property
    def n_cols(self) -> int:
        return self.frame_width // self.cell_size

    @property
    def n_rows(self) -> int:
        return self.frame_height // self.cell_size

    @property
    def n_cells(self) -> int:
        return self.n_cols * self.n_rows

    @property
    def codebook_size(self) -> int:
        return self.n_cells * self.n_directions

    @classmethod
    def from_cells(cls, n_cols: int, n_rows: int, cell_size: int = 8, **kw) -> "GridSpec":
        return cls(n_cols * cell_size, n_rows * cell_size, cell_size, **kw)


@dataclass(frozen=True)
class VisualWord:
    index: int
    cell_x: int
    cell_y: int
    direction: int


def encode(cell_x, cell_y, direction, grid: GridSpec):
    """Word index for ``(cell_x, cell_y, direction)``; works on scalars or arrays."""
    cx = np.asarray(cell_x)
    cy = np.asarray(cell_y)
    d = np.asarray(direction)
    if (
        np.any((cx < 0) | (cx >= grid.n_cols))
        or np.any((cy < 0) | (cy >= grid.n_rows))
        or np.any((d < 0) | (d >= grid.n_directions))
    ):
        raise DataError("cell or direction outside the grid")
    idx = (cy * grid.n_cols + cx) * grid.n_directions + d
    return int(idx) if idx.ndim == 0 else idx.astype(np.int64)


def decode(index, grid: GridSpec):
    """Inverse of :func:`encode`: returns ``(cell_x, cell_y, direction)``."""
    idx = np.asarray(index)
    if np.any((idx < 0) | (idx >= grid.codebook_size)):
        raise DataError(f"word index outside [0, {grid.codebook_size})")
    direction = idx % grid.n_directions
    cell = idx // grid.n_directions
    cx, cy = cell % grid.n_cols, cell // grid.n_cols
    if idx.ndim == 0:
        return int(cx), int(cy), int(direction)
    return cx, cy, direction


def word(index: int, grid: GridSpec) -> VisualWord:
    cx, cy, d = decode(int(index), grid)
    return VisualWord(int(index), cx, cy, d)


def direction_bin(dx, dy, n_directions: int = 8):
    """Quantize flow vectors into direction bins.

    Angles on a bin boundary (within 1e-9 of a bin width, which absorbs the
    rounding of ``atan2``) go to the lower of the two neighbouring bin
    indices, so 22.5 deg -> 0 and 337.5 deg -> 0.
    """
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float)
    width = 360.0 / n_directions
    deg = np.degrees(np.arctan2(-dy, dx)) % 360.0
    t = deg / width
    lo = np.floor(t)
    frac = t - lo
    hi = lo + 1
    lo_bin = lo.astype(np.int64) % n_directions
    hi_bin = hi.astype(np.int64) % n_directions
    out = np.where(frac < 0.5, lo_bin, hi_bin)
    out = np.where(np.abs(frac - 0.5) < 1e-9, np.minimum(lo_bin, hi_bin), out)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class FlowField:
    """Dense flow between two frames; ``vectors`` has shape (height, width, 2)."""

    vectors: np.ndarray

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def height(self) -> int:
        return self.vectors.shape[0]


def read_flo(path) -> FlowField:
    """Read a Middlebury ``.flo`` file (little-endian)."""
    raw = Path(path).read_bytes()
    if raw[:4] != FLO_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    width, height = struct.unpack("<ii", raw[4:12])
    if width <= 0 or height <= 0:
        raise DataError(f"{path}: bad dimensions {width}x{height}")
    data = np.frombuffer(raw, dtype="<f4", offset=12)
    if data.size != width * height * 2:
        raise DataError(f"{path}: expected {width * height * 2} floats, got {data.size}")
    return FlowField(data.reshape(height, width, 2).astype(np.float64))


def write_flo(field: FlowField, path) -> None:
    h, w = field.height, field.width
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(field.vectors, dtype="<f4").tobytes())


def quantize_flow(field: FlowField, grid: GridSpec) -> np.ndarray:
    """Turn one flow field into visual words, one per moving cell.

    Flow is averaged over each cell first; the mean vector becomes a word when
    its magnitude exceeds ``grid.magnitude_threshold``.  Returns word indices
    in ascending cell order.
    """
    v = np.asarray(field.vectors, dtype=float)
    if v.ndim != 3 or v.shape[2] != 2:
        raise DataError(f"flow vectors must have shape (H, W, 2), got {v.shape}")
    if v.shape[0] != grid.frame_height or v.shape[1] != grid.frame_width:
        raise DataError(
            f"flow is {v.shape[1]}x{v.shape[0]}, grid expects "
            f"{grid.frame_width}x{grid.frame_height}"
        )
    if not np.all(np.isfinite(v)):
        raise DataError("flow field contains non-finite values")
    c = grid.cell_size
    cropped = v[: grid.n_rows * c, : grid.n_cols * c]
    means = cropped.reshape(grid.n_rows, c, grid.n_cols, c, 2).mean(axis=(1, 3))
    mag = np.hypot(means[..., 0], means[..., 1])
    cy, cx = np.nonzero(mag > grid.magnitude_threshold)
    if cy.size == 0:
        return np.zeros(0, dtype=np.int64)
    bins = direction_bin(means[cy, cx, 0], means[cy, cx, 1], grid.n_directions)
    return encode(cx, cy, np.atleast_1d(bins), grid)


@dataclass(frozen=True)
class ClipDocument:
    clip_id: int
    frame_range: tuple[int, int]
    words: tuple[int, ...]

    @property
    def n_words(self) -> int:
        return len(self.words)

    def array(self) -> np.ndarray:
        return np.asarray(self.words, dtype=np.int64)


@dataclass(frozen=True)
class Corpus:
    grid: GridSpec
    clips: tuple[ClipDocument, ...] = ()
    clip_length: int = 75

    def __post_init__(self):
        object.__setattr__(self, "clips", tuple(self.clips))
        prev = None
        size = self.grid.codebook_size
        for clip in self.clips:
            if prev is not None:
                if clip.clip_id <= prev.clip_id:
                    raise DataError(f"clip_id {clip.clip_id} not increasing")
                if clip.frame_range[0] != prev.frame_range[1]:
                    raise DataError(f"clip {clip.clip_id}: frame ranges not contiguous")
            if clip.frame_range[1] <= clip.frame_range[0]:
                raise DataError(f"clip {clip.clip_id}: empty frame range")
            if clip.words and (min(clip.words) < 0 or max(clip.words) >= size):
                raise DataError(f"clip {clip.clip_id}: word index outside [0, {size})")
            prev = clip

    def __len__(self) -> int:
        return len(self.clips)

    def __iter__(self) -> Iterator[ClipDocument]:
        return iter(self.clips)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Corpus(self.grid, self.clips[i], self.clip_length)
        return self.clips[i]

    @property
    def n_tokens(self) -> int:
        return sum(c.n_words for c in self.clips)


def segment_clips(
    word_stream: Iterable[Sequence[int]],
    clip_length: int = 75,
    grid: GridSpec | None = None,
    first_frame: int = 0,
) -> Corpus:
    """Group per-frame word multisets into non-overlapping clip documents.

    A trailing partial clip is kept when it spans at least half of
    ``clip_length`` frames and dropped otherwise.
    """
    if clip_length < 1:
        raise DataError("clip_length must be >= 1")
    if grid is None:
        raise DataError("segment_clips needs the grid the words were encoded with")
    frames = [list(f) for f in word_stream]
    clips = []
    start = 0
    while start < len(frames):
        chunk = frames[start : start + clip_length]
        if len(chunk) < clip_length and 2 * len(chunk) < clip_length:
            break
        bag = tuple(int(w) for f in chunk for w in f)
        clips.append(
            ClipDocument(
                len(clips),
                (first_frame + start, first_frame + start + len(chunk)),
                bag,
            )
        )
        start += clip_length
    return Corpus(grid, tuple(clips), clip_length)


# --------------------------------------------------------------------------
# JSON Lines persistence


def corpus_header(corpus: Corpus, config_hash: str | None = None) -> dict:
    g = corpus.grid
    header = {
        "schema": CORPUS_SCHEMA,
        "frame_width": g.frame_width,
        "frame_height": g.frame_height,
        "cell_size": g.cell_size,
        "n_directions": g.n_directions,
        "clip_length": corpus.clip_length,
        "magnitude_threshold": g.magnitude_threshold,
    }
    if config_hash is not None:
        header["config_hash"] = config_hash
    return header


def clip_to_json(clip: ClipDocument) -> dict:
    return {
        "clip_id": clip.clip_id,
        "frame_start": clip.frame_range[0],
        "frame_end": clip.frame_range[1],
        "words": list(clip.words),
    }


def save_corpus(corpus: Corpus, path, config_hash: str | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(corpus_header(corpus, config_hash)) + "\n")
        for clip in corpus.clips:
            fh.write(json.dumps(clip_to_json(clip)) + "\n")


def grid_from_header(header: dict) -> GridSpec:
    return GridSpec(
        int(header["frame_width"]),
        int(header["frame_height"]),
        int(header.get("cell_size", 8)),
        int(header.get("n_directions", 8)),
        float(header.get("magnitude_threshold", 1.0)),
    )


def _parse_header(line: str, path) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or header.get("schema") != CORPUS_SCHEMA:
        got = header.get("schema") if isinstance(header, dict) else None
        raise DataError(f"{path}:1: expected schema {CORPUS_SCHEMA!r}, got {got!r}")
    for key in ("frame_width", "frame_height", "cell_size", "n_directions", "clip_length"):
        if key not in header:
            raise DataError(f"{path}:1: header missing {key!r}")
    return header


def parse_clip_line(line: str, lineno: int, grid: GridSpec, path="<corpus>") -> ClipDocument:
    try:
        rec = json.loads(line)
        clip_id = int(rec["clip_id"])
        frame_range = (int(rec["frame_start"]), int(rec["frame_end"]))
        words = tuple(int(w) for w in rec["words"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}:{lineno}: malformed clip line ({exc})") from None
    size = grid.codebook_size
    for w in words:
        if w < 0 or w >= size:
            raise DataError(
                f"{path}:{lineno}: clip {clip_id} has word {w} outside [0, {size})"
            )
    return ClipDocument(clip_id, frame_range, words)


def iter_corpus(path) -> tuple[dict, Iterator[ClipDocument]]:
    """Open a corpus file for streaming; returns the header and a clip iterator."""
    fh = open(path)
    first = fh.readline()
    if not first.strip():
        fh.close()
        raise DataError(f"{path}: missing header line")
    header = _parse_header(first, path)
    grid = grid_from_header(header)

    def clips():
        with fh:
            for lineno, line in enumerate(fh, start=2):
                if line.strip():
                    yield parse_clip_line(line, lineno, grid, path)

    return header, clips()


def load_corpus(path) -> Corpus:
    header, clips = iter_corpus(path)
    grid = grid_from_header(header)
    try:
        return Corpus(grid, tuple(clips), int(header["clip_length"]))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def split_corpus(corpus: Corpus, n_first: int) -> tuple[Corpus, Corpus]:
    return corpus[:n_first], corpus[n_first:]


def flatten(corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate all clip words; returns ``(words, offsets)`` with ``len(offsets) == D + 1``."""
    lengths = np.array([c.n_words for c in corpus.clips], dtype=np.int64)
    offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    if offsets[-1] == 0:
        return np.zeros(0, dtype=np.int64), offsets
    words = np.concatenate([c.array() for c in corpus.clips if c.n_words])
    return words, offsets
