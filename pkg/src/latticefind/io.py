"""File I/O: grayscale images (PNG or CSV matrix), atom CSVs, JSON schemas.

All writers are atomic (temp file in the target directory, then rename)
so a crashed run never leaves a truncated artifact.  CSV matrices are
row-major with %.17g cells, which round-trips float64 exactly.  PNG
pixels are scaled to [0, 1] on read (8-bit /255, 16-bit /65535).

Every machine-readable JSON artifact carries a ``schema`` field of the
form ``latticefind/<name>/v1`` and validates against the matching schema
file shipped under ``schemas/``, so consumers can rely on the layout
without reading this codebase.
"""

from __future__ import annotations

import functools
import io as _stdio
import json
import os
import tempfile
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image as PILImage

from .errors import FileFormatError
from .imaging import AtomMap, Image

ATOMS_HEADER = "m,n,alpha"

SCHEMA_NAMES = ("result", "lattice", "trace", "manifest", "report", "catalog")
SCHEMA_VERSION = "v1"


def schema_tag(name: str) -> str:
    """The ``schema`` field value for artifact kind ``name``."""
    if name not in SCHEMA_NAMES:
        raise ValueError(f"unknown schema {name!r}; expected one of {SCHEMA_NAMES}")
    return f"latticefind/{name}/{SCHEMA_VERSION}"


@functools.lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    if name not in SCHEMA_NAMES:
        raise ValueError(f"unknown schema {name!r}; expected one of {SCHEMA_NAMES}")
    ref = resources.files(__package__) / "schemas" / f"{name}.{SCHEMA_VERSION}.json"
    return json.loads(ref.read_text(encoding="utf-8"))


def validate_payload(payload: dict, name: str) -> None:
    """Raise jsonschema.ValidationError unless payload matches the schema."""
    jsonschema.validate(
        instance=payload,
        schema=load_schema(name),
        cls=jsonschema.Draft202012Validator,
    )


def write_bytes_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_text_atomic(path: Path, text: str) -> None:
    write_bytes_atomic(Path(path), text.encode("utf-8"))


def write_json_atomic(path: Path, payload: dict) -> None:
    """Serialize with sorted keys and a trailing newline (deterministic bytes).

    NaN and infinity are rejected: they are not valid JSON, so callers
    must map them to null before serializing.
    """
    write_text_atomic(
        Path(path), json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"
    )


def read_json(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def read_image(path: Path) -> Image:
    """Load a grayscale frame from .png or .csv by extension."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".csv":
        try:
            arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
        except ValueError as exc:
            raise FileFormatError(f"{path}: not a numeric CSV matrix: {exc}") from exc
        return Image(arr)
    if suffix == ".png":
        with PILImage.open(path) as im:
            mode = im.mode
            arr = np.asarray(im, dtype=np.float64)
        if mode == "L":
            return Image(arr / 255.0)
        if mode in ("I", "I;16", "I;16B", "I;16L"):
            return Image(arr / 65535.0)
        if mode == "F":
            return Image(arr)
        raise FileFormatError(f"{path}: unsupported PNG mode {mode!r}; expected grayscale")
    raise FileFormatError(f"{path}: unsupported image extension {suffix!r} (use .png or .csv)")


def write_image_csv(path: Path, image: Image) -> None:
    buf = _stdio.StringIO()
    np.savetxt(buf, image.pixels, delimiter=",", fmt="%.17g")
    write_text_atomic(Path(path), buf.getvalue())


def write_image_png(path: Path, image: Image, bit_depth: int = 16, rescale: bool = False):
    """Write a grayscale PNG; returns the (vmin, vmax) used for scaling.

    With ``rescale`` the frame is affinely mapped onto the full integer
    range; otherwise values are clipped to [0, 1].  16-bit output uses
    mode I;16.
    """
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    arr = image.pixels
    if rescale:
        vmin = float(arr.min())
        vmax = float(arr.max())
        scale = vmax - vmin
        unit = (arr - vmin) / scale if scale > 0 else np.zeros_like(arr)
    else:
        vmin, vmax = 0.0, 1.0
        unit = np.clip(arr, 0.0, 1.0)
    if bit_depth == 8:
        quant = np.round(unit * 255.0).astype(np.uint8)
        pil = PILImage.fromarray(quant, mode="L")
    else:
        quant = np.round(unit * 65535.0).astype(np.uint16)
        pil = PILImage.fromarray(quant)
    buf = _stdio.BytesIO()
    pil.save(buf, format="PNG")
    write_bytes_atomic(Path(path), buf.getvalue())
    return vmin, vmax


def write_atoms_csv(path: Path, atoms: AtomMap) -> None:
    """Write `m,n,alpha` rows, one per atom, in lexicographic site order."""
    lines = [ATOMS_HEADER]
    for (m, n), alpha in atoms.items_sorted():
        lines.append(f"{m},{n},{alpha:.17g}")
    write_text_atomic(Path(path), "\n".join(lines) + "\n")


def read_atoms_csv(path: Path, rows: int, cols: int) -> AtomMap:
    with open(path, "r", encoding="utf-8") as fh:
        raw = [line.strip() for line in fh if line.strip()]
    if not raw or raw[0].replace(" ", "") != ATOMS_HEADER:
        raise FileFormatError(f"{path}: expected header '{ATOMS_HEADER}'")
    entries: dict[tuple[int, int], float] = {}
    for lineno, line in enumerate(raw[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise FileFormatError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        try:
            m, n, alpha = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise FileFormatError(f"{path}:{lineno}: {exc}") from exc
        entries[(m, n)] = alpha
    try:
        return AtomMap(rows, cols, entries)
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc


def sha256_file(path: Path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
