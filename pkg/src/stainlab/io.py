"""File formats: feature sets, feature maps, prompt fixtures, checkpoints, images.

Binary containers are little-endian:

* ``FSET``: magic, u32 n, u32 d, ``n*d`` float32 row-major.
* ``FMAP``: magic, u32 H, u32 W, u32 D, ``H*W*D`` float32.
* ``PEMB``: magic, u32 n_stains, u32 E, then per stain a u16 name length,
  UTF-8 name bytes and E float32 values.
"""

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ImageReadError, StainLookupError

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated file")
    return data


def _read_payload(fh, count, path):
    payload = _read_exact(fh, 4 * count, path)
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64)


# --- feature sets ----------------------------------------------------------


def write_feature_set(path, features) -> None:
    x = np.asarray(features, dtype="<f4")
    if x.ndim != 2:
        raise ValueError(f"feature set must be n x d, got {x.shape}")
    with open(path, "wb") as fh:
        fh.write(b"FSET" + struct.pack("<II", *x.shape))
        fh.write(np.ascontiguousarray(x).tobytes())


def write_feature_csv(path, features, ids=None) -> None:
    x = np.asarray(features, dtype=np.float64)
    ids = ids if ids is not None else range(len(x))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"f{i}" for i in range(x.shape[1])])
        for i, row in zip(ids, x):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_feature_set(path) -> np.ndarray:
    """Read an ``n x d`` feature matrix from an FSET binary or an ``id,f0..`` CSV."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == b"FSET":
            n, d = struct.unpack("<II", _read_exact(fh, 8, path))
            return _read_payload(fh, n * d, path).reshape(n, d)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except UnicodeDecodeError:
        raise FormatError(f"{path}: neither FSET binary nor CSV") from None
    if not rows or not rows[0] or rows[0][0] != "id":
        raise FormatError(f"{path}: CSV feature file must start with an 'id,f0,...' header")
    d = len(rows[0]) - 1
    expected = ["id"] + [f"f{i}" for i in range(d)]
    if rows[0] != expected:
        raise FormatError(f"{path}: unexpected CSV header {rows[0]}")
    try:
        data = [[float(v) for v in r[1:]] for r in rows[1:] if r]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if any(len(r) != d for r in data):
        raise FormatError(f"{path}: ragged CSV rows")
    return np.array(data, dtype=np.float64).reshape(len(data), d)


# --- feature / probability maps ---------------------------------------------


def write_fmap(path, array) -> None:
    x = np.asarray(array, dtype="<f4")
    if x.ndim != 3:
        raise ValueError(f"feature map must be H x W x D, got {x.shape}")
    with open(path, "wb") as fh:
        fh.write(b"FMAP" + struct.pack("<III", *x.shape))
        fh.write(np.ascontiguousarray(x).tobytes())


def read_fmap(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != b"FMAP":
            raise FormatError(f"{path}: bad magic, expected FMAP")
        h, w, d = struct.unpack("<III", _read_exact(fh, 12, path))
        return _read_payload(fh, h * w * d, path).reshape(h, w, d)


# --- prompt embeddings ------------------------------------------------------


def write_prompt_fixture(path, embeddings: dict) -> None:
    vecs = {k: np.asarray(v, dtype="<f4").ravel() for k, v in embeddings.items()}
    dims = {v.size for v in vecs.values()}
    if len(dims) != 1:
        raise ValueError(f"all prompt embeddings must share a length, got {sorted(dims)}")
    with open(path, "wb") as fh:
        fh.write(b"PEMB" + struct.pack("<II", len(vecs), dims.pop()))
        for name, v in vecs.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw + v.tobytes())


def read_prompt_fixture(path) -> dict:
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != b"PEMB":
            raise FormatError(f"{path}: bad magic, expected PEMB")
        n, e = struct.unpack("<II", _read_exact(fh, 8, path))
        for _ in range(n):
            (length,) = struct.unpack("<H", _read_exact(fh, 2, path))
            try:
                name = _read_exact(fh, length, path).decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError(f"{path}: stain name is not UTF-8") from None
            out[name] = np.frombuffer(_read_exact(fh, 4 * e, path), dtype="<f4").astype(np.float64)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {n} stains")
    return out


def load_prompt_vector(path, stain: str) -> np.ndarray:
    table = read_prompt_fixture(path)
    if stain not in table:
        raise StainLookupError(f"stain {stain!r} not in {path} (available: {', '.join(table)})")
    return table[stain]


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, tensors: dict) -> None:
    """Write ``<path>.bin`` (concatenated little-endian float64) and ``<path>.json`` manifest."""
    path = Path(path)
    entries, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(a.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "dtype": "<f8"})
            offset += a.nbytes
    manifest = {"format": "stainlab-checkpoint", "version": 1, "tensors": entries}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_checkpoint(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.with_suffix(".json").read_text())
        blob = path.with_suffix(".bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc})") from None
    out = {}
    for ent in manifest.get("tensors", []):
        count = int(np.prod(ent["shape"], dtype=np.int64))
        end = ent["offset"] + 8 * count
        if end > len(blob):
            raise FormatError(f"{path}: tensor {ent['name']} runs past end of data")
        out[ent["name"]] = np.frombuffer(blob[ent["offset"] : end], dtype=ent["dtype"]).reshape(ent["shape"]).astype(np.float64)
    return out


# --- images ------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Decode an 8-bit RGB PNG/TIFF into an ``H x W x 3`` uint8 array."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise ImageReadError(path, f"unsupported image mode {im.mode} (need 8-bit RGB)")
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageReadError):
            raise
        raise ImageReadError(path, f"cannot decode image ({exc})") from None


def write_image(path, img) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path)


def write_pgm16(path, values, scale_max: float, comment: str = "") -> None:
    """Binary 16-bit PGM; ``values`` in ``[0, scale_max]`` map linearly to ``[0, 65535]``."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("PGM export needs a 2-D map")
    q = np.round(np.clip(v / scale_max, 0.0, 1.0) * 65535).astype(">u2")
    header = "P5\n"
    for line in (comment or f"value = pixel / 65535 * {scale_max!r}").splitlines():
        header += f"# {line}\n"
    header += f"{v.shape[1]} {v.shape[0]}\n65535\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + q.tobytes())


def read_pgm16(path):
    """Return ``(uint16 array, comment lines)`` from a file written by :func:`write_pgm16`."""
    data = Path(path).read_bytes()
    tokens, comments, pos = [], [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comments.append(data[pos + 1 : end].decode("ascii").strip())
            pos = end + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data[pos + 1 :], dtype=dtype).reshape(h, w)
    return arr.astype(np.uint16), comments
