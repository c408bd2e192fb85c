"""On-disk formats: PFM images, PNG slices, stack directories, manifests.

A stack on disk is one directory holding slice_%03d.pfm (or .png) files, a
metadata.txt sidecar with per-slice lines
``index,focus_distance_mm,principal_point_x_px,principal_point_y_px``, a
camera.txt file with the capture intrinsics, and optionally the ground-truth
depth as depth.pfm.

PFM files are written bit-exactly: header ``PF`` (color) or ``Pf``
(grayscale), a ``<width> <height>`` line, a ``-1.0`` scale line marking
little-endian 32-bit floats, rows stored bottom-up.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._version import __version__
from .optics import camera_config_from_text, camera_config_to_text
from .simulator import FocalSlice, FocalStack
from .validation import DataError

__all__ = [
    "read_pfm",
    "write_pfm",
    "read_png",
    "write_png",
    "read_keyvalues",
    "write_keyvalues",
    "read_camera_file",
    "write_camera_file",
    "save_stack",
    "load_stack",
    "RunManifest",
    "write_manifest",
    "read_manifest",
]


def write_pfm(path, data):
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        magic = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    else:
        raise DataError(f"PFM data must be HxW or HxWx3, got {arr.shape}")
    height, width = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{width} {height}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(arr).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise DataError(f"{path}: not a PFM file (magic {magic!r})")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise DataError(f"{path}: malformed PFM dimension line")
        width, height = (int(v) for v in dims)
        scale = float(fh.readline().strip())
        channels = 3 if magic == b"PF" else 1
        count = width * height * channels
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(fh.read(count * 4), dtype=dtype)
        if raw.size != count:
            raise DataError(f"{path}: truncated PFM payload")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(raw.reshape(shape)).astype(np.float32).copy()


def write_png(path, image):
    """Write a [0, 1] float image as 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized).save(path, format="PNG")


def read_png(path):
    """Read a PNG into a [0, 1] float array (RGB kept as 3 channels)."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img)
    return arr.astype(np.float64) / 255.0


def write_keyvalues(path, items):
    with open(path, "w", encoding="ascii") as fh:
        for key, value in items.items():
            fh.write(f"{key} = {value}\n")


def read_keyvalues(path):
    items = {}
    with open(path, "r", encoding="ascii") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}: malformed key-value line {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            items[key] = value
    return items


def write_camera_file(path, config):
    Path(path).write_text(camera_config_to_text(config), encoding="ascii")


def read_camera_file(path):
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as exc:
        raise DataError(f"cannot read camera file {path}: {exc}") from exc
    return camera_config_from_text(text)


def save_stack(directory, stack, depth_mm=None, image_format="pfm"):
    """Write a stack directory (slices, metadata.txt, camera.txt[, depth.pfm])."""
    if image_format not in ("pfm", "png"):
        raise DataError(f"image_format must be 'pfm' or 'png', got {image_format!r}")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# index,focus_distance_mm,principal_point_x_px,principal_point_y_px"]
    for sl in stack.slices:
        name = f"slice_{sl.slice_index:03d}.{image_format}"
        if image_format == "pfm":
            write_pfm(out / name, sl.pixels)
        else:
            write_png(out / name, sl.pixels)
        px, py = sl.principal_point_px
        lines.append(
            f"{sl.slice_index},{sl.focus_distance_mm!r},{float(px)!r},{float(py)!r}"
        )
    (out / "metadata.txt").write_text("\n".join(lines) + "\n", encoding="ascii")
    write_camera_file(out / "camera.txt", stack.config)
    if depth_mm is not None:
        write_pfm(out / "depth.pfm", depth_mm)


def load_stack(directory):
    """Load a stack directory; returns (stack, depth_mm or None)."""
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"{directory} is not a stack directory")
    meta_path = root / "metadata.txt"
    if not meta_path.exists():
        raise DataError(f"{directory} has no metadata.txt")
    config = read_camera_file(root / "camera.txt")

    records = []
    for raw in meta_path.read_text(encoding="ascii").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise DataError(f"metadata.txt: malformed line {raw!r}")
        records.append(
            (int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]))
        )
    records.sort(key=lambda r: r[0])
    if not records:
        raise DataError("metadata.txt lists no slices")

    slices = []
    for index, focus, px, py in records:
        pfm = root / f"slice_{index:03d}.pfm"
        png = root / f"slice_{index:03d}.png"
        if pfm.exists():
            pixels = np.clip(read_pfm(pfm).astype(np.float64), 0.0, 1.0)
        elif png.exists():
            pixels = read_png(png)
        else:
            raise DataError(f"missing slice image for index {index}")
        if pixels.ndim == 2:
            pixels = np.repeat(pixels[..., None], 3, axis=2)
        slices.append(
            FocalSlice(
                pixels=pixels,
                focus_distance_mm=focus,
                principal_point_px=(px, py),
                slice_index=index,
            )
        )
    depth = None
    if (root / "depth.pfm").exists():
        depth = read_pfm(root / "depth.pfm").astype(np.float64)
    return FocalStack(slices=slices, config=config), depth


@dataclass
class RunManifest:
    """Everything that determines a tool run's outputs.

    Two runs with equal manifests must produce bit-identical outputs.
    """

    subcommand: str
    parameters: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    seed: int = None
    version: str = __version__

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def write_manifest(directory, manifest):
    path = Path(directory) / "manifest.json"
    path.write_text(manifest.to_json(), encoding="ascii")
    return path


def read_manifest(path):
    data = json.loads(Path(path).read_text(encoding="ascii"))
    return RunManifest(**data)
