"""Bit-exact file formats: MSEQ sequences, mask sidecars, CSV/PGM exports.

MSEQ layout (all little-endian):

    bytes 0..5   magic  b"MSEQ1\\x00"
    u32          H
    u32          W
    u32          T+1 (frame count)
    f32          pixel spacing in mm
    u32          flags (bit 0: a parallel ``<path>.mask`` file exists)
    then         (T+1) * H * W float32 values, row-major, frame-major

The mask sidecar is raw uint8, one byte per pixel, same frame-major
order, validated against the main header. Write->read round-trips are
bit-exact.
"""

from __future__ import annotations

import csv
import os
import struct

import numpy as np

from .sequence import ImageSequence

MAGIC = b"MSEQ1\x00"
_HEADER = struct.Struct("<III f I")
HEADER_SIZE = len(MAGIC) + _HEADER.size
FLAG_HAS_MASK = 1


class SeqFormatError(ValueError):
    """Malformed sequence file; message carries the byte-level diagnosis."""


def write_mseq(seq: ImageSequence, path: str) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    flags = FLAG_HAS_MASK if seq.masks is not None else 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(seq.height, seq.width, frames.shape[0],
                              seq.spacing_mm, flags))
        fh.write(frames.tobytes())
    if seq.masks is not None:
        with open(path + ".mask", "wb") as fh:
            fh.write(np.ascontiguousarray(seq.masks, dtype=np.uint8).tobytes())


def read_mseq(path: str) -> ImageSequence:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise SeqFormatError(f"{path}: only {len(raw)} bytes, header needs {HEADER_SIZE}")
    if raw[:len(MAGIC)] != MAGIC:
        raise SeqFormatError(f"{path}: bad magic at byte 0: {raw[:len(MAGIC)]!r}")
    h, w, count, spacing, flags = _HEADER.unpack_from(raw, len(MAGIC))
    if spacing <= 0:
        raise SeqFormatError(f"{path}: spacing {spacing} at byte {len(MAGIC) + 12} "
                             "must be positive")
    expected = HEADER_SIZE + 4 * h * w * count
    if len(raw) != expected:
        raise SeqFormatError(f"{path}: payload truncated or padded: expected "
                             f"{expected} bytes, found {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", count=h * w * count,
                           offset=HEADER_SIZE).reshape(count, h, w).copy()
    masks = None
    if flags & FLAG_HAS_MASK:
        mask_path = path + ".mask"
        if not os.path.exists(mask_path):
            raise SeqFormatError(f"{path}: header flags a mask but {mask_path} is missing")
        mraw = np.fromfile(mask_path, dtype=np.uint8)
        if mraw.size != h * w * count:
            raise SeqFormatError(f"{mask_path}: expected {h * w * count} bytes, "
                                 f"found {mraw.size}")
        masks = mraw.reshape(count, h, w).astype(bool)
    return ImageSequence(frames, float(spacing), masks)


# -- exports ---------------------------------------------------------------


def write_pgm(path: str, gray: np.ndarray) -> None:
    """8-bit binary PGM (P5). ``gray`` must already be uint8-ranged."""
    g = np.clip(np.asarray(gray), 0, 255).astype(np.uint8)
    if g.ndim != 2:
        raise ValueError(f"write_pgm: need a 2-d image, got {g.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii"))
        fh.write(g.tobytes())


def _try_write_png(path: str, gray: np.ndarray) -> bool:
    try:
        from PIL import Image
    except ImportError:
        return False
    Image.fromarray(np.clip(gray, 0, 255).astype(np.uint8), mode="L").save(path)
    return True


def frame_to_gray(frame: np.ndarray) -> np.ndarray:
    """Intensity in [0,1] -> [0,255], clipped."""
    return np.clip(frame, 0.0, 1.0) * 255.0


def detjac_to_gray(det: np.ndarray) -> np.ndarray:
    """Fixed map: determinant 1.0 -> gray 128 (0 -> 0, >= 2 saturates)."""
    return np.clip(det * 128.0, 0.0, 255.0)


def magnitude_to_gray(mag: np.ndarray) -> np.ndarray:
    peak = float(np.max(mag))
    return mag * (255.0 / peak) if peak > 0 else np.zeros_like(mag)


def write_volume_csv(path: str, volumes_mm2: np.ndarray, extra: dict | None = None) -> None:
    """Columns: t, volume_mm2 (plus any extra named curves)."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "volume_mm2", *extra.keys()])
        for t, vol in enumerate(volumes_mm2):
            writer.writerow([t, repr(float(vol)),
                             *(repr(float(extra[k][t])) for k in extra)])


def write_metrics_csv(path: str, per_frame: dict) -> None:
    """One row per frame from a dict of equal-length named columns."""
    keys = list(per_frame)
    length = len(per_frame[keys[0]])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", *keys])
        for i in range(length):
            writer.writerow([i, *(repr(float(per_frame[k][i])) for k in keys)])


def export_figures(seq: ImageSequence, tracking, outdir: str,
                   volumes_mm2: np.ndarray | None = None, png: bool = False) -> list[str]:
    """Write frames, warped frames, det-Jacobian and displacement maps.

    ``tracking`` is an applications.TrackingResult. Returns the written
    paths. PNG copies are written when Pillow is available and requested.
    """
    from .deformation import displacement, jacobian_determinant
    from . import kernels

    os.makedirs(outdir, exist_ok=True)
    if not os.access(outdir, os.W_OK):
        raise OSError(f"export_figures: {outdir} is not writable")
    written = []

    def emit(name, gray):
        p = os.path.join(outdir, name + ".pgm")
        write_pgm(p, gray)
        written.append(p)
        if png and _try_write_png(os.path.join(outdir, name + ".png"), gray):
            written.append(os.path.join(outdir, name + ".png"))

    phi = tracking.deformations
    warped = kernels.gather_bilinear(
        np.broadcast_to(seq.moving, (phi.shape[0], 1) + seq.moving.shape).copy().astype(phi.dtype),
        phi[:, 0], phi[:, 1])[:, 0]
    det = jacobian_determinant(phi)
    disp = np.linalg.norm(displacement(phi), axis=1)
    for t in range(seq.frames.shape[0]):
        emit(f"frame_{t:03d}", frame_to_gray(seq.frames[t]))
    for t in range(phi.shape[0]):
        emit(f"warped_{t + 1:03d}", frame_to_gray(warped[t]))
        emit(f"detjac_{t + 1:03d}", detjac_to_gray(det[t]))
        emit(f"dispmag_{t + 1:03d}", magnitude_to_gray(disp[t]))
    if volumes_mm2 is not None:
        p = os.path.join(outdir, "volume_curve.csv")
        write_volume_csv(p, volumes_mm2)
        written.append(p)
    return written
