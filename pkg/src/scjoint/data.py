"""Synthetic salient / camouflaged datasets, manifests and image I/O.

Generated images are single-channel.  Every image has a smooth, textured
background.  A *salient* object is a deformed ellipse filled with a nearly
flat intensity ``contrast`` above the local background.  A *camouflaged*
object keeps the background texture and is only shifted ``contrast`` below
it.  A *dual* image carries one of each, disjoint, with one mask apiece.
With ``distractor_rate > 0`` a salient or camouflaged image may also carry
an unlabeled object of the other kind.

Manifest schema (JSON, version 1)::

    {"version": 1,
     "task_kind": "salient" | "camouflaged" | "dual",
     "entries": [{"id": str, "image_path": str, "mask_path": str,
                  "extra_mask_path": str  (dual only)}, ...]}

Paths are relative to the manifest's directory.  8-bit images are read as
PNG (via Pillow) or binary PGM (``P5``), chosen by file extension.  The PGM
bytes written here are exactly ``b"P5\\n<W> <H>\\n255\\n"`` followed by the
``H*W`` pixel bytes in row-major order.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "GEN_KINDS",
    "GenSpec",
    "SamplePair",
    "Dataset",
    "DatasetError",
    "generate",
    "load",
    "load_manifest",
    "discover",
    "read_manifest",
    "write_manifest",
    "read_gray",
    "write_gray",
    "encode_pgm",
    "decode_pgm",
    "to_uint8",
    "atomic_write_bytes",
]

log = logging.getLogger(__name__)

GEN_KINDS = ("salient", "camouflaged", "dual")
MANIFEST_VERSION = 1
IMAGE_EXTS = (".png", ".pgm", ".jpg", ".jpeg", ".bmp")
_DEFAULT_CONTRAST = {"salient": 0.8, "camouflaged": 0.08}
MIN_AREA, MAX_AREA = 0.02, 0.30
_MAX_ATTEMPTS = 100


class DatasetError(Exception):
    """A dataset could not be generated or loaded; ``offenders`` lists entry ids."""

    def __init__(self, message: str, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


# --------------------------------------------------------------- image I/O


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
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


def to_uint8(arr) -> np.ndarray:
    """Quantize a [0, 1] map to 8 bits (round half to even, clipped)."""
    return np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {img.shape}")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError("only 8-bit binary PGM (P5, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise ValueError("truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def read_gray(path) -> np.ndarray:
    """Read an 8-bit single-channel image as ``uint8 [H, W]``."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".pgm":
        return decode_pgm(data)
    with Image.open(io.BytesIO(data)) as im:
        return np.array(im.convert("L"), dtype=np.uint8)


def write_gray(path, img: np.ndarray) -> None:
    """Atomically write ``img`` (uint8, or float in [0, 1]) as PNG or PGM."""
    path = Path(path)
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    if path.suffix.lower() == ".pgm":
        data = encode_pgm(img)
    else:
        buf = io.BytesIO()
        Image.fromarray(img, mode="L").save(buf, format="PNG")
        data = buf.getvalue()
    atomic_write_bytes(path, data)


# --------------------------------------------------------------- manifests


def write_manifest(path, task_kind: str, entries: list[dict]) -> dict:
    ids = [e["id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate ids in manifest", sorted({i for i in ids if ids.count(i) > 1}))
    doc = {
        "version": MANIFEST_VERSION,
        "task_kind": task_kind,
        "entries": sorted(entries, key=lambda e: e["id"]),
    }
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    return doc


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DatasetError(f"{path}: manifest must be a JSON object")
    if doc.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    if not isinstance(doc.get("entries"), list):
        raise DatasetError(f"{path}: manifest has no entries list")
    ids = [e.get("id") for e in doc["entries"]]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate entry ids", sorted({i for i in ids if ids.count(i) > 1}))
    return doc


# --------------------------------------------------------------- generation


@dataclass
class GenSpec:
    kind: str
    count: int
    seed: int
    image_size: int = 64
    contrast: float | None = None
    texture_grain: float = 2.0
    texture_std: float = 0.05
    format: str = "png"
    id_prefix: str | None = None
    distractor_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in GEN_KINDS:
            raise ValueError(f"kind must be one of {GEN_KINDS}, got {self.kind!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.format not in ("png", "pgm"):
            raise ValueError("format must be 'png' or 'pgm'")
        if self.contrast is not None and not 0 < self.contrast <= 1:
            raise ValueError("contrast must lie in (0, 1]")
        if not 0 <= self.distractor_rate <= 1:
            raise ValueError("distractor_rate must lie in [0, 1]")

    def contrast_for(self, kind: str) -> float:
        if self.contrast is not None and self.kind != "dual":
            return self.contrast
        return _DEFAULT_CONTRAST[kind]

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown gen spec keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _texture(rng: np.random.Generator, size: int, grain: float, std: float) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.normal(size=(size, size)), grain, mode="wrap")
    return t / (t.std() + 1e-12) * std


def _blob(rng: np.random.Generator, size: int, lo: float, hi: float) -> np.ndarray:
    """A deformed-ellipse mask covering a fraction of the image in [lo, hi]."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(_MAX_ATTEMPTS):
        area = rng.uniform(lo, hi) * size * size
        aspect = rng.uniform(0.6, 1.0)
        a = math.sqrt(area / (math.pi * aspect))
        b = a * aspect
        margin = a * 1.15 + 1
        if 2 * margin >= size:
            continue
        cy, cx = rng.uniform(margin, size - margin, size=2)
        rot = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(rot) + dy * math.sin(rot)
        v = -dx * math.sin(rot) + dy * math.cos(rot)
        theta = np.arctan2(v / b, u / a)
        wobble = np.ones_like(theta)
        for k in (2, 3, 4):
            wobble += rng.uniform(0, 0.12) * np.cos(k * theta + rng.uniform(0, 2 * math.pi))
        mask = np.hypot(u / a, v / b) <= wobble
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask
    raise DatasetError("could not place an object with a valid area")


def _disjoint_pair(rng: np.random.Generator, size: int):
    for _ in range(_MAX_ATTEMPTS):
        a = _blob(rng, size, MIN_AREA, MAX_AREA / 2)
        b = _blob(rng, size, MIN_AREA, MAX_AREA / 2)
        # keep a one-pixel gap so the two objects never touch
        if not (ndimage.binary_dilation(a) & b).any():
            return a, b
    raise DatasetError("could not place two disjoint objects")


def _render(rng: np.random.Generator, spec: GenSpec):
    s = spec.image_size
    base = rng.uniform(0.2, 0.25)
    bg = base + _texture(rng, s, spec.texture_grain, spec.texture_std)
    img = bg.copy()
    extra = None
    distract = spec.kind != "dual" and spec.distractor_rate > 0 and rng.random() < spec.distractor_rate
    if spec.kind == "dual" or distract:
        sal, cod = _disjoint_pair(rng, s)
    elif spec.kind == "salient":
        sal, cod = _blob(rng, s, MIN_AREA, MAX_AREA), None
    else:
        sal, cod = None, _blob(rng, s, MIN_AREA, MAX_AREA)
    if sal is not None:
        fill = base + spec.contrast_for("salient") + 0.3 * _texture(rng, s, spec.texture_grain, spec.texture_std)
        img[sal] = fill[sal]
    if cod is not None:
        img[cod] = bg[cod] - spec.contrast_for("camouflaged")
    if spec.kind == "dual":
        mask, extra = sal, cod
    else:
        # a distractor of the other kind stays unlabeled
        mask = sal if spec.kind == "salient" else cod
    return np.clip(img, 0.0, 1.0), mask, extra


def generate(spec: GenSpec, out_dir) -> dict:
    """Write ``count`` image/mask files plus ``manifest.json`` under ``out_dir``.

    Output is a pure function of ``spec``: each entry draws from its own
    ``default_rng([seed, index])`` stream.
    """
    out = Path(out_dir)
    prefix = spec.id_prefix or spec.kind
    ext = "." + spec.format
    entries = []
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed, i])
        img, mask, extra = _render(rng, spec)
        eid = f"{prefix}_{i:05d}"
        entry = {"id": eid, "image_path": f"images/{eid}{ext}", "mask_path": f"masks/{eid}{ext}"}
        write_gray(out / entry["image_path"], to_uint8(img))
        write_gray(out / entry["mask_path"], mask.astype(np.uint8) * 255)
        if extra is not None:
            entry["extra_mask_path"] = f"masks_extra/{eid}{ext}"
            write_gray(out / entry["extra_mask_path"], extra.astype(np.uint8) * 255)
        entries.append(entry)
    return write_manifest(out / "manifest.json", spec.kind, entries)


# ------------------------------------------------------------------ loading


@dataclass
class SamplePair:
    id: str
    image: np.ndarray
    mask: np.ndarray
    extra_mask: np.ndarray | None = None


@dataclass
class Dataset:
    task_kind: str
    pairs: list = field(default_factory=list)
    root: Path | None = None
    manifest: dict | None = None

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.pairs]

    def images(self) -> np.ndarray:
        return np.stack([p.image for p in self.pairs])

    def masks(self) -> np.ndarray:
        return np.stack([p.mask for p in self.pairs])

    def subset(self, ids) -> "Dataset":
        keep = set(ids)
        return Dataset(self.task_kind, [p for p in self.pairs if p.id in keep], self.root, self.manifest)


def _binarize(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float64) / 255.0) >= 0.5


def _load_entries(root: Path, task_kind: str, entries: list[dict]) -> Dataset:
    pairs, offenders, problems = [], [], []
    for e in sorted(entries, key=lambda e: e["id"]):
        eid = e["id"]
        try:
            img = read_gray(root / e["image_path"])
            mask = _binarize(read_gray(root / e["mask_path"]))
            extra = None
            if e.get("extra_mask_path"):
                extra = _binarize(read_gray(root / e["extra_mask_path"]))
        except (OSError, ValueError) as exc:
            offenders.append(eid)
            problems.append(f"{eid}: {exc}")
            continue
        if img.shape != mask.shape or (extra is not None and extra.shape != mask.shape):
            offenders.append(eid)
            problems.append(f"{eid}: image {img.shape} vs mask {mask.shape}")
            continue
        pairs.append(SamplePair(eid, img.astype(np.float64) / 255.0, mask, extra))
    if offenders:
        raise DatasetError("dataset load failed:\n  " + "\n  ".join(problems), offenders)
    return Dataset(task_kind, pairs, root)


def load_manifest(path) -> Dataset:
    path = Path(path)
    try:
        doc = read_manifest(path)
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    ds = _load_entries(path.parent, doc.get("task_kind", "salient"), doc["entries"])
    ds.manifest = doc
    return ds


def discover(root, task_kind: str = "salient") -> list[dict]:
    """Pair ``images/<stem>.*`` with ``masks/<stem>.*`` under ``root``."""
    root = Path(root)

    def stems(sub: str) -> dict[str, str]:
        d = root / sub
        found = {}
        if d.is_dir():
            for f in sorted(d.iterdir()):
                if f.suffix.lower() in IMAGE_EXTS and f.stem not in found:
                    found[f.stem] = f"{sub}/{f.name}"
        return found

    imgs, masks = stems("images"), stems("masks")
    unmatched = sorted(set(imgs) ^ set(masks))
    if unmatched:
        log.warning("%s: skipping %d files without a partner: %s", root, len(unmatched), unmatched[:10])
    return [
        {"id": s, "image_path": imgs[s], "mask_path": masks[s]} for s in sorted(set(imgs) & set(masks))
    ]


def load(path, task_kind: str | None = None) -> Dataset:
    """Load a manifest file, a directory holding one, or an images/ + masks/ tree."""
    path = Path(path)
    if path.is_dir():
        if (path / "manifest.json").exists():
            return load_manifest(path / "manifest.json")
        entries = discover(path, task_kind or "salient")
        if not entries:
            raise DatasetError(f"{path}: no manifest.json and no images/ + masks/ pairs")
        return _load_entries(path, task_kind or "salient", entries)
    return load_manifest(path)
