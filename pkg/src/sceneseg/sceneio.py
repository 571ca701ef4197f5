"""Rasters in and out: scenes, label maps, palettes and model files."""
import hashlib
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import BNState
from .errors import ContractError, FormatError, InputError
from .segnet import N_BLOCKS, ModelParams, param_shapes

IGNORE = -1

# colours of the ISPRS 2D labelling legend
ISPRS_PALETTE = (
    ("impervious_surfaces", (255, 255, 255)),
    ("building", (0, 0, 255)),
    ("low_vegetation", (0, 255, 255)),
    ("tree", (0, 255, 0)),
    ("car", (255, 255, 0)),
    ("clutter", (255, 0, 0)),
)

BINARY_PALETTE = (("other", (0, 0, 0)), ("building", (255, 255, 255)))

_FALLBACK_BASE = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
)


@dataclass
class Scene:
    """Channels-first float32 raster. ``mean``/``std`` are raw per-band stats."""

    data: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    normalized: bool = True

    @property
    def bands(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def denormalize(self):
        if not self.normalized:
            return self.data.astype(np.float64)
        return self.data * self.std[:, None, None] + self.mean[:, None, None]


@dataclass
class SegmentationMap:
    labels: np.ndarray
    K: int

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class ReferenceMap:
    labels: np.ndarray
    ignored: int
    warning: str = None


class Palette(tuple):
    """Ordered ``(class_name, (r, g, b))`` entries with unique colours."""

    def __new__(cls, entries):
        entries = tuple((str(n), tuple(int(v) for v in rgb)) for n, rgb in entries)
        colours = [rgb for _, rgb in entries]
        if len(set(colours)) != len(colours):
            raise InputError("palette colours must be unique")
        for rgb in colours:
            if len(rgb) != 3 or not all(0 <= v <= 255 for v in rgb):
                raise InputError(f"bad palette colour {rgb}")
        return super().__new__(cls, entries)

    @property
    def names(self):
        return [n for n, _ in self]

    @property
    def colours(self):
        return np.array([rgb for _, rgb in self], dtype=np.uint8).reshape(-1, 3)

    def index(self, name):
        return self.names.index(name)


def isprs_palette():
    return Palette(ISPRS_PALETTE)


def fallback_palette(k=8):
    """Distinguishable colours for raw cluster ids; the first 8 are fixed."""
    colours = list(_FALLBACK_BASE[:k])
    rng = np.random.default_rng(0)
    while len(colours) < k:
        c = tuple(int(v) for v in rng.integers(0, 256, 3))
        if c not in colours:
            colours.append(c)
    return Palette((f"cluster_{i}", c) for i, c in enumerate(colours))


def load_palette(path):
    """Read a JSON array of ``{"name": ..., "rgb": [r, g, b]}``."""
    with open(path) as f:
        entries = json.load(f)
    try:
        return Palette((e["name"], e["rgb"]) for e in entries)
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: palette entries need 'name' and 'rgb'") from exc


def save_palette(palette, path):
    with open(path, "w") as f:
        json.dump([{"name": n, "rgb": list(rgb)} for n, rgb in palette], f, indent=1)


# ----------------------------------------------------------------- rasters


def _read_raster(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        import tifffile

        try:
            with tifffile.TiffFile(path) as tif:
                page = tif.pages[0]
                if int(page.compression) != 1:
                    raise InputError(f"{path}: compressed TIFF ({page.compression.name}) is not supported")
                series = tif.series[0]
                arr = series.asarray()
                axes = series.axes
        except tifffile.TiffFileError as exc:
            raise InputError(f"{path}: unreadable TIFF: {exc}") from exc
        if arr.ndim == 2:
            arr = arr[None]
        elif arr.ndim != 3:
            raise InputError(f"{path}: expected a 2-D or 3-D raster, got axes {axes}")
        elif axes.endswith("S"):
            arr = np.moveaxis(arr, -1, 0)
    else:
        import cv2

        arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if arr is None:
            raise InputError(f"{path}: unreadable image")
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = np.moveaxis(arr, -1, 0)
            # BGR(A) -> RGB(A)
            arr = np.concatenate([arr[2::-1], arr[3:]]) if arr.shape[0] >= 3 else arr
    if arr.dtype not in (np.uint8, np.uint16):
        raise InputError(f"{path}: unsupported sample type {arr.dtype} (need 8 or 16 bit)")
    return np.ascontiguousarray(arr)


def load_scene(path, normalize=True):
    """Load an 8/16-bit PNG or uncompressed TIFF as a channels-first Scene.

    With ``normalize`` every band is z-scored with scene-wide statistics;
    constant bands become all zeros.
    """
    raw = _read_raster(path).astype(np.float64)
    return scene_from_array(raw, normalize)


def scene_from_array(raw, normalize=True):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[None]
    mean = raw.mean(axis=(1, 2))
    std = raw.std(axis=(1, 2))
    if normalize:
        safe = np.where(std > 0, std, 1.0)
        data = (raw - mean[:, None, None]) / safe[:, None, None]
        data[std == 0] = 0.0
    else:
        data = raw
    return Scene(data.astype(np.float32), mean, std, normalize)


def _write_rgb(rgb, path):
    import cv2

    if not cv2.imwrite(str(path), np.ascontiguousarray(rgb[..., ::-1])):
        raise InputError(f"{path}: could not write image")


def _read_rgb(path):
    arr = _read_raster(path)
    if arr.dtype != np.uint8 or arr.shape[0] < 3:
        raise InputError(f"{path}: expected an 8-bit RGB image")
    return np.moveaxis(arr[:3], 0, -1)


def colourize(labels, colours):
    colours = np.asarray(colours, dtype=np.uint8)
    if labels.size and (labels.min() < 0 or labels.max() >= len(colours)):
        raise ContractError(f"label values must lie in [0, {len(colours)})")
    return colours[labels]


def decode_colours(rgb, colours):
    """Exact colour match to palette index; anything else is ``IGNORE``."""
    colours = np.asarray(colours, dtype=np.int64)
    key = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    pal = (colours[:, 0] << 16) | (colours[:, 1] << 8) | colours[:, 2]
    order = np.argsort(pal)
    pos = np.searchsorted(pal[order], key)
    pos = np.clip(pos, 0, len(pal) - 1)
    hit = pal[order][pos] == key
    return np.where(hit, order[pos], IGNORE)


def write_segmentation(seg, path, palette=None, cluster_to_class=None):
    """Render a cluster map as an 8-bit RGB PNG.

    Without ``cluster_to_class`` clusters get the fallback colours. With it,
    each cluster takes the colour of its class in ``palette`` (ISPRS by
    default); the mapping may name classes or give their palette index.
    """
    labels = seg.labels if isinstance(seg, SegmentationMap) else np.asarray(seg)
    if cluster_to_class is None:
        k = seg.K if isinstance(seg, SegmentationMap) else int(labels.max()) + 1
        _write_rgb(colourize(labels, fallback_palette(max(k, 1)).colours), path)
        return
    palette = palette or isprs_palette()
    present = np.unique(labels)
    # one extra slot after the palette: black for clusters mapped to None
    undefined = len(palette)
    lut = np.zeros(int(present.max()) + 1 if present.size else 1, dtype=np.int64)
    for cl in present:
        key = int(cl)
        if key in cluster_to_class:
            cls = cluster_to_class[key]
        elif str(key) in cluster_to_class:
            cls = cluster_to_class[str(key)]
        else:
            raise ContractError(f"cluster {key} has no class in the mapping")
        if cls is None:
            lut[cl] = undefined
        else:
            lut[cl] = palette.index(cls) if isinstance(cls, str) else int(cls)
    colours = np.vstack([palette.colours, [[0, 0, 0]]])
    _write_rgb(colourize(lut[labels], colours), path)


def read_segmentation(path, K=None):
    """Inverse of ``write_segmentation`` without a mapping."""
    rgb = _read_rgb(path)
    k = K or 256
    labels = decode_colours(rgb, fallback_palette(k).colours)
    if np.any(labels == IGNORE):
        raise InputError(f"{path}: contains colours outside the cluster palette")
    return SegmentationMap(labels, K or int(labels.max()) + 1)


def read_reference(path, palette=None):
    """Per-pixel class indices of a colour-coded reference mask."""
    palette = palette or isprs_palette()
    labels = decode_colours(_read_rgb(path), palette.colours)
    ignored = int(np.count_nonzero(labels == IGNORE))
    warning = None
    if ignored > 0.5 * labels.size:
        warning = f"{path}: {ignored}/{labels.size} pixels match no palette colour; wrong palette?"
        warnings.warn(warning)
    return ReferenceMap(labels, ignored, warning)


# ------------------------------------------------------------------ models

MAGIC = b"SSEG"
VERSION = 1


def config_digest(config):
    """sha256 of a config mapping, serialized with sorted keys."""
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def _model_entries(params):
    last = f"conv{N_BLOCKS + 1}.bias"
    for name, arr in params.tensors.items():
        yield name, arr
        if name.startswith("conv") and (name.endswith(".beta") or name == last):
            block = int(name[4:].split(".")[0]) - 1
            state = params.running[block]
            if state is not None:
                yield f"conv{block + 1}.running_mean", state.mean
                yield f"conv{block + 1}.running_var", state.var


def dump_model(params):
    """Serialize to bytes; see ``save_model`` for the layout."""
    entries = list(_model_entries(params))
    digest = params.digest.encode()
    out = [MAGIC, struct.pack("<IIII", VERSION, params.K, params.ratio, params.bands),
           struct.pack("<qI", params.seed, len(digest)), digest, struct.pack("<I", len(entries))]
    for name, arr in entries:
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_model(params, path):
    """Write ``params`` to ``path``.

    Layout, little-endian: ``b"SSEG"``, u32 version, u32 K, u32 attention
    ratio, u32 bands, i64 seed, u32 digest length + utf-8 config digest,
    u32 entry count, then per entry (in layer order, running statistics
    right after each block's ``beta`` and after the output ``bias``): u32 name length + name, u32 ndim,
    ndim x u32 dims, float32 payload.
    """
    Path(path).write_bytes(dump_model(params))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated model file while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_model(buf):
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a model file", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported model version {version}", 4)
    K, ratio, bands = r.unpack("<III", "header")
    seed, dlen = r.unpack("<qI", "seed")
    digest = r.take(dlen, "digest").decode()
    (count,) = r.unpack("<I", "entry count")
    try:
        shapes = param_shapes(bands, K, ratio)
    except ZeroDivisionError:
        raise FormatError(f"invalid attention ratio {ratio}", 12) from None
    tensors, running = {}, {}
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "name").decode(errors="replace")
        (ndim,) = r.unpack("<I", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        size = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * size, name), dtype="<f4").reshape(shape).astype(np.float32)
        if name in shapes:
            if tuple(shape) != shapes[name]:
                raise FormatError(f"{name}: shape {shape}, expected {shapes[name]}", at)
            tensors[name] = arr
        elif name.endswith((".running_mean", ".running_var")):
            running[name] = arr
        else:
            raise FormatError(f"unknown entry {name!r}", at)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last entry", r.pos)
    missing = [k for k in shapes if k not in tensors]
    if missing:
        raise FormatError(f"missing entries {missing}", r.pos)
    states = []
    for i in range(1, N_BLOCKS + 2):
        m, v = running.get(f"conv{i}.running_mean"), running.get(f"conv{i}.running_var")
        states.append(BNState(m, v) if m is not None and v is not None else None)
    ordered = {k: tensors[k] for k in shapes}
    return ModelParams(ordered, states, K, ratio, seed, digest)


def load_model(path):
    return parse_model(Path(path).read_bytes())
