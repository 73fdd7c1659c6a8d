"""Volumes, label volumes, training windows and their binary file formats.

ISAV1 (image volume), little-endian::

    b"ISAV1" | u32 n_slices | u32 H | u32 W | f32 xy_spacing | f32 inter_slice | f32[n*H*W]

ISLB1 (label volume) has the same header with magic ``b"ISLB1"`` and a
u8 payload restricted to {0, 1}.
"""
import logging
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DimensionError, FormatError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = b"ISAV1"
LABEL_MAGIC = b"ISLB1"
_HEADER = struct.Struct("<5sIIIff")


@dataclass
class Volume:
    """Stack of axial slices, shape (n_slices, H, W)."""

    slices: np.ndarray
    x_y_spacing_mm: float = 1.0
    inter_slice_distance_mm: float = 1.0
    patient_id: str = ""

    def __post_init__(self):
        self.slices = np.asarray(self.slices)
        if self.slices.ndim != 3:
            raise DimensionError(f"volume must be (n_slices, H, W), got {self.slices.shape}")
        if self.slices.shape[0] < 2:
            raise DimensionError(f"volume needs at least 2 slices, got {self.slices.shape[0]}")
        if self.x_y_spacing_mm <= 0 or self.inter_slice_distance_mm <= 0:
            raise ValueError("spacings must be positive")

    @property
    def n_slices(self):
        return self.slices.shape[0]

    @property
    def shape(self):
        return self.slices.shape

    def __len__(self):
        return self.n_slices

    def __getitem__(self, i):
        return self.slices[i]


@dataclass
class TrainWindow:
    """T+2 consecutive slices (I_0 ... I_{T+1}) with their labels."""

    images: np.ndarray
    labels: np.ndarray
    T: int
    volume_id: str = ""
    start: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[0] != self.T + 2 or self.labels.shape != self.images.shape:
            raise DimensionError(f"window with T={self.T} needs {self.T + 2} co-registered slices, "
                                 f"got images {self.images.shape} labels {self.labels.shape}")


def normalize_volume(raw):
    """Per-volume min-max rescale of intensities to [0, 1]."""
    data = np.asarray(raw.slices, dtype=np.float64)
    if not np.isfinite(data).all():
        raise DegenerateInputError("volume contains non-finite intensities")
    lo, hi = data.min(), data.max()
    if not hi > lo:
        raise DegenerateInputError(f"constant volume (all intensities = {lo}) cannot be normalized")
    scaled = ((data - lo) / (hi - lo)).astype(np.float32)
    np.clip(scaled, 0.0, 1.0, out=scaled)
    return Volume(scaled, raw.x_y_spacing_mm, raw.inter_slice_distance_mm, raw.patient_id)


def partition_windows(volume, T, labels=None, with_flag=False):
    """Split a volume into disjoint, ordered windows of T+2 consecutive slices.

    Windows start at slice 0 with stride T+2; a trailing remainder shorter
    than T+2 is dropped. Too few slices gives an empty list and, when
    ``with_flag`` is set, a True warning flag.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    images = volume.slices
    label_arr = np.zeros(images.shape, dtype=np.uint8) if labels is None else np.asarray(
        labels.slices if isinstance(labels, Volume) else labels)
    size = T + 2
    count = images.shape[0] // size
    short = count == 0
    if short:
        logger.warning("volume %r has %d slices, fewer than T+2=%d; no windows", volume.patient_id,
                       images.shape[0], size)
    windows = [
        TrainWindow(images[i * size:(i + 1) * size], label_arr[i * size:(i + 1) * size], T,
                    volume.patient_id, i * size)
        for i in range(count)
    ]
    return (windows, short) if with_flag else windows


# -- file formats ------------------------------------------------------------------

def _encode(magic, slices, xy, dz, payload_dtype):
    n, h, w = slices.shape
    return _HEADER.pack(magic, n, h, w, xy, dz) + np.ascontiguousarray(slices, dtype=payload_dtype).tobytes()


def encode_slices(slices, xy_spacing=1.0, inter_slice=1.0, labels=False):
    """Encode an (n, H, W) stack (any n >= 1) as ISAV1, or ISLB1 when ``labels``."""
    data = np.asarray(slices)
    if data.ndim != 3:
        raise DimensionError(f"slices must be (n, H, W), got {data.shape}")
    if labels:
        if not np.isin(data, (0, 1)).all():
            raise ValueError("label volume must be binary")
        return _encode(LABEL_MAGIC, data, xy_spacing, inter_slice, "u1")
    if not np.isfinite(data).all():
        raise ValueError("refusing to store non-finite intensities")
    return _encode(IMAGE_MAGIC, data, xy_spacing, inter_slice, "<f4")


def encode_volume(volume):
    return encode_slices(volume.slices, volume.x_y_spacing_mm, volume.inter_slice_distance_mm)


def encode_labels(volume):
    return encode_slices(volume.slices, volume.x_y_spacing_mm, volume.inter_slice_distance_mm, labels=True)


def decode_slices(buf):
    """Decode ISAV1 or ISLB1 bytes to ``(slices, xy_spacing, inter_slice, is_label)``."""
    buf = bytes(buf)
    if len(buf) < len(IMAGE_MAGIC):
        raise FormatError("file shorter than the magic", len(buf))
    magic = buf[:5]
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC):
        raise FormatError(f"bad magic {magic!r}", 0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, n, h, w, xy, dz = _HEADER.unpack_from(buf)
    itemsize = 4 if magic == IMAGE_MAGIC else 1
    expected = n * h * w * itemsize
    payload = len(buf) - _HEADER.size
    if payload < expected:
        raise FormatError(f"truncated payload: header says {n}x{h}x{w} but only {payload} of {expected} "
                          f"payload bytes present", len(buf))
    if payload > expected:
        raise FormatError(f"payload length {payload} inconsistent with header dims {n}x{h}x{w}",
                          _HEADER.size + expected)
    if magic == IMAGE_MAGIC:
        data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(n, h, w).astype(np.float32)
        bad = np.flatnonzero(~np.isfinite(data.reshape(-1)))
        if bad.size:
            raise FormatError("non-finite intensity", _HEADER.size + 4 * int(bad[0]))
    else:
        data = np.frombuffer(buf, dtype="u1", offset=_HEADER.size).reshape(n, h, w).copy()
        bad = np.flatnonzero(data.reshape(-1) > 1)
        if bad.size:
            raise FormatError("label value outside {0, 1}", _HEADER.size + int(bad[0]))
    return data, float(xy), float(dz), magic == LABEL_MAGIC


def decode_volume(buf, patient_id=""):
    """Decode ISAV1 or ISLB1 bytes into a :class:`Volume`; the magic decides which."""
    data, xy, dz, _ = decode_slices(buf)
    return Volume(data, xy, dz, patient_id)


def store_slices(path, slices, xy_spacing=1.0, inter_slice=1.0, labels=False):
    with open(path, "wb") as fh:
        fh.write(encode_slices(slices, xy_spacing, inter_slice, labels))


def load_slices(path):
    with open(path, "rb") as fh:
        return decode_slices(fh.read())


def store_volume(path, volume, labels=False):
    with open(path, "wb") as fh:
        fh.write(encode_labels(volume) if labels else encode_volume(volume))


def load_volume(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_volume(buf, patient_id=os.path.basename(str(path)).split(".")[0])


def import_raw_slices(directory, height, width, xy_spacing=1.0, inter_slice=1.0, normalize=True):
    """Build a volume from a directory of headerless little-endian f32 slice files (sorted by name)."""
    names = sorted(f for f in os.listdir(directory) if not f.startswith("."))
    if not names:
        raise FileNotFoundError(f"no slice files in {directory}")
    slices = []
    for name in names:
        raw = np.fromfile(os.path.join(directory, name), dtype="<f4")
        if raw.size != height * width:
            raise FormatError(f"{name}: {raw.size * 4} bytes, expected {height * width * 4}", raw.size * 4)
        slices.append(raw.reshape(height, width))
    vol = Volume(np.stack(slices), xy_spacing, inter_slice, os.path.basename(os.path.normpath(directory)))
    return normalize_volume(vol) if normalize else vol


def write_pgm(path, image):
    """Write a [0, 1] image as 8-bit binary PGM (P5)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.round(img * 255).astype(np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None:
        raise FormatError("not a binary PGM", 0)
    w, h, maxval = (int(v) for v in m.groups())
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
    return data.astype(np.float64) / maxval
