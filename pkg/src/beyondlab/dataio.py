"""Synthetic data, the binary dataset container, checkpoints and run outputs."""

from __future__ import annotations

import colorsys
import csv
import hashlib
import io
import json
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MAGIC = b"BYND"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHBBH")

CKPT_MAGIC = b"BYNDCKPT"
CKPT_VERSION = 1


class DataIOError(Exception):
    kind = "io"


class BadMagicError(DataIOError):
    kind = "bad-magic"


class VersionMismatchError(DataIOError):
    kind = "version"


class TruncationError(DataIOError):
    kind = "truncated"


class ChecksumError(DataIOError):
    kind = "checksum"


class TopologyMismatchError(DataIOError):
    kind = "topology"


class RunExistsError(DataIOError):
    kind = "run-exists"


@dataclass
class DatasetContainer:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) uint8
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8).reshape(-1)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label outside num_classes")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetContainer):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.provenance == other.provenance
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def as_float(self) -> np.ndarray:
        """Images as (N, C, H, W) float64 in [0, 1]."""
        return self.images.transpose(0, 3, 1, 2).astype(np.float64) / 255.0

    @classmethod
    def from_float(cls, x: np.ndarray, labels, num_classes: int, provenance: str = "") -> "DatasetContainer":
        imgs = np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(0, 2, 3, 1)
        return cls(imgs, np.asarray(labels), num_classes, provenance)

    def subset(self, idx) -> "DatasetContainer":
        return DatasetContainer(self.images[idx], self.labels[idx], self.num_classes, self.provenance)

    def to_bytes(self) -> bytes:
        n, h, w, c = self.images.shape
        tag = self.provenance.encode("utf-8")
        head = _HEADER.pack(MAGIC, VERSION, n, h, w, c, self.num_classes, len(tag))
        return head + tag + self.images.tobytes() + self.labels.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "DatasetContainer":
        if len(raw) < 4 or raw[:4] != MAGIC:
            raise BadMagicError("not a dataset container (bad magic)")
        if len(raw) < _HEADER.size:
            raise TruncationError("header truncated")
        _, version, n, h, w, c, k, tag_len = _HEADER.unpack_from(raw)
        if version != VERSION:
            raise VersionMismatchError(f"container version {version}, expected {VERSION}")
        off = _HEADER.size
        need = off + tag_len + n * h * w * c + n
        if len(raw) < need:
            raise TruncationError(f"payload truncated: {len(raw)} of {need} bytes")
        if len(raw) > need:
            raise TruncationError(f"trailing bytes: {len(raw)} vs {need}")
        tag = raw[off:off + tag_len].decode("utf-8")
        off += tag_len
        imgs = np.frombuffer(raw, np.uint8, n * h * w * c, off).reshape(n, h, w, c)
        off += n * h * w * c
        labels = np.frombuffer(raw, np.uint8, n, off)
        return cls(imgs.copy(), labels.copy(), k, tag)


def save_dataset(path, data: DatasetContainer) -> None:
    _atomic_write(Path(path), data.to_bytes())


def load_dataset(path) -> DatasetContainer:
    return DatasetContainer.from_bytes(Path(path).read_bytes())


# -- synthetic motifs --------------------------------------------------------

def _motif_masks(u: np.ndarray, v: np.ndarray) -> list[np.ndarray]:
    """Boolean masks on centred, scale-normalised coordinates (radius ~1)."""
    r = np.hypot(u, v)
    au, av = np.abs(u), np.abs(v)
    return [
        r <= 1.0,                                        # disk
        (r <= 1.0) & (r >= 0.6),                         # ring
        (au <= 0.85) & (av <= 0.85),                     # square
        (au <= 1.0) & (av <= 0.25),                      # horizontal bar
        (au <= 0.25) & (av <= 1.0),                      # vertical bar
        ((au <= 0.22) | (av <= 0.22)) & (r <= 1.05),     # cross
        (au + av <= 1.05),                               # diamond
        (v >= -0.8) & (v <= 0.8) & (au <= (v + 0.8) * 0.62),  # triangle
        ((np.abs(u - v) <= 0.3) | (np.abs(u + v) <= 0.3)) & (r <= 1.05),  # x-cross
        ((au <= 0.9) & (av <= 0.9)) & ~((au <= 0.5) & (av <= 0.5)),       # hollow square
        ((u >= -0.9) & (u <= -0.45) & (av <= 0.9)) | ((v >= 0.45) & (v <= 0.9) & (au <= 0.9)),  # L
        ((v >= -0.9) & (v <= -0.5) & (au <= 0.9)) | ((au <= 0.22) & (av <= 0.9)),  # T
        (np.hypot(u - 0.5, v) <= 0.42) | (np.hypot(u + 0.5, v) <= 0.42),  # two dots
        (u / 1.0) ** 2 + (v / 0.5) ** 2 <= 1.0,           # ellipse
        (r <= 1.0) & (np.hypot(u - 0.45, v) >= 0.75),    # crescent
        ((np.floor((u + 1) * 1.5) + np.floor((v + 1) * 1.5)) % 2 == 0) & (au <= 1) & (av <= 1),  # checker
    ]


N_MOTIFS = 16


def generate_synthetic_dataset(
    classes: int = 10,
    per_class: int = 100,
    size: tuple[int, int, int] = (32, 32, 3),
    seed: int = 0,
    provenance: str | None = None,
    hue_jitter: float = 0.03,
) -> DatasetContainer:
    """Class-balanced colored-motif images.

    Class ``c`` draws motif ``c`` in hue ``c / classes`` over a dark textured
    background; position, scale and hue are jittered per image.  With
    ``hue_jitter`` >= 0.5 the hue carries no class information.
    """
    if not 2 <= classes <= N_MOTIFS:
        raise ValueError(f"unsupported class count {classes}; need 2..{N_MOTIFS}")
    h, w, ch = size
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(n)]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    imgs = np.empty((n, h, w, ch), dtype=np.uint8)
    for i, lab in enumerate(labels):
        cy = h / 2 - 0.5 + rng.uniform(-0.12, 0.12) * h
        cx = w / 2 - 0.5 + rng.uniform(-0.12, 0.12) * w
        scale = rng.uniform(0.25, 0.34) * min(h, w)
        mask = _motif_masks((xx - cx) / scale, (yy - cy) / scale)[lab]
        hue = (lab / classes + rng.uniform(-hue_jitter, hue_jitter)) % 1.0
        fg = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.65, 1.0), rng.uniform(0.7, 1.0)))
        bg = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.5), rng.uniform(0.05, 0.35)))
        if ch == 1:
            fg, bg = fg.mean(keepdims=True), bg.mean(keepdims=True)
        img = np.where(mask[..., None], fg[:ch], bg[:ch])
        img = img + rng.normal(0.0, 0.03, size=img.shape)
        imgs[i] = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
    tag = provenance if provenance is not None else f"synthetic/classes={classes}/seed={seed}"
    return DatasetContainer(imgs, labels.astype(np.uint8), classes, tag)


# -- checkpoints ---------------------------------------------------------------

def _checksum(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=8).digest()


def save_checkpoint_arrays(path, params: Sequence[tuple[str, np.ndarray]], header: Mapping) -> None:
    """Write a header document + float32 blob + 64-bit checksum."""
    meta = dict(header)
    meta["params"] = [[name, list(arr.shape)] for name, arr in params]
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = b"".join(np.asarray(arr, dtype="<f4").tobytes() for _, arr in params)
    raw = CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(text)) + text + blob + _checksum(blob)
    _atomic_write(Path(path), raw)


def load_checkpoint_arrays(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    raw = Path(path).read_bytes()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise BadMagicError("not a checkpoint (bad magic)")
    off = len(CKPT_MAGIC)
    if len(raw) < off + 6:
        raise TruncationError("checkpoint header truncated")
    version, text_len = struct.unpack_from("<HI", raw, off)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    off += 6
    if len(raw) < off + text_len + 8:
        raise TruncationError("checkpoint truncated")
    try:
        meta = json.loads(raw[off:off + text_len].decode("utf-8"))
        spec = [(str(name), tuple(int(s) for s in shape)) for name, shape in meta["params"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise TopologyMismatchError(f"unreadable checkpoint header: {exc}") from None
    off += text_len
    blob, digest = raw[off:-8], raw[-8:]
    if _checksum(blob) != digest:
        raise ChecksumError("checkpoint blob checksum mismatch")
    expected = 4 * sum(int(np.prod(shape)) for _, shape in spec)
    if expected != len(blob):
        raise TopologyMismatchError(f"header declares {expected} blob bytes, found {len(blob)}")
    arrays, pos = [], 0
    for name, shape in spec:
        cnt = int(np.prod(shape))
        arr = np.frombuffer(blob, "<f4", cnt, pos).astype(np.float64).reshape(shape)
        arrays.append((name, arr))
        pos += 4 * cnt
    return meta, arrays


# -- run outputs ---------------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def table_to_csv(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    writer.writeheader()
    for row in rows:
        writer.writerow({c: _fmt(row.get(c, "")) for c in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def curve_to_svg(points: Sequence[tuple[float, float]], title: str = "", xlabel: str = "fpr", ylabel: str = "tpr") -> str:
    """Minimal deterministic line plot on the unit square."""
    size, pad = 320, 40
    span = size - 2 * pad

    def sx(v):
        return pad + v * span

    def sy(v):
        return size - pad - v * span

    path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in points)
    esc = title.replace("&", "&amp;").replace("<", "&lt;")
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n'
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#888"/>\n'
        f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(1)}" y2="{sy(1)}" stroke="#ccc" stroke-dasharray="4"/>\n'
        f'<polyline fill="none" stroke="#c0392b" stroke-width="2" points="{path}"/>\n'
        f'<text x="{size / 2}" y="{pad / 2}" text-anchor="middle" font-size="13">{esc}</text>\n'
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">{xlabel}</text>\n'
        f'<text x="12" y="{size / 2}" font-size="12" transform="rotate(-90 12 {size / 2})">{ylabel}</text>\n'
        "</svg>\n"
    )


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def write_results(
    root,
    run_id: str,
    tables: Mapping[str, Sequence[Mapping]] | None = None,
    curves: Mapping[str, Sequence[tuple[float, float, float]]] | None = None,
    verdicts: Sequence[Mapping] | None = None,
    summary: Mapping | None = None,
    extra: Mapping[str, str] | None = None,
    force: bool = False,
) -> Path:
    """Write a run directory atomically.

    Files are staged in a sibling temp directory which is renamed into place;
    with ``force`` an existing run is swapped out only after staging succeeds.
    Curves are ``(fpr, tpr, threshold)`` triples, written as CSV and SVG.
    """
    root = Path(root)
    final = root / run_id
    if final.exists() and not force:
        raise RunExistsError(f"run '{run_id}' exists; use --force to overwrite")
    root.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(dir=root, prefix=f".{run_id}.stage."))
    try:
        for name, rows in (tables or {}).items():
            (stage / f"{name}.csv").write_text(table_to_csv(list(rows)), newline="")
        for name, pts in (curves or {}).items():
            rows = [{"fpr": p[0], "tpr": p[1], "threshold": p[2]} for p in pts]
            (stage / f"{name}.csv").write_text(table_to_csv(rows, ["fpr", "tpr", "threshold"]), newline="")
            (stage / f"{name}.svg").write_text(curve_to_svg([(p[0], p[1]) for p in pts], title=name))
        if verdicts is not None:
            (stage / "verdicts.json").write_text(dumps_json(list(verdicts)))
        for fname, text in (extra or {}).items():
            (stage / fname).write_text(text)
        (stage / "summary.json").write_text(dumps_json(dict(summary or {})))
        if final.exists():
            trash = Path(tempfile.mkdtemp(dir=root, prefix=f".{run_id}.old."))
            os.replace(final, trash / "run")
            os.replace(stage, final)
            shutil.rmtree(trash, ignore_errors=True)
        else:
            os.replace(stage, final)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return final
