"""Binary grid-sequence files (GSEQ1), instance sidecars and checkpoints."""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .grid import (
    FlowGrid,
    Frame,
    FrameSequence,
    GridGeometry,
    OccupancyStateGrid,
    Pose2D,
    SemanticGrid,
    VehicleInstance,
    VelocityGrid,
)

GSEQ_MAGIC = b"GSEQ\x00\x01\x00\x00"
CKPT_MAGIC = b"GFCK\x00\x01\x00\x00"
STANDARD_CHANNELS = 8
# optional 9th plane carrying a warped semantic prediction
EXTENDED_CHANNELS = 9

_HEADER = struct.Struct("<IIIIdd")
_FRAME = struct.Struct("<dddd")


class FormatError(ValueError):
    pass


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".instances.json")


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def frame_planes(frame: Frame) -> np.ndarray:
    flow = frame.flow.data if frame.flow is not None else np.full((2,) + frame.semantic.shape, np.nan)
    return np.concatenate([frame.state.data, frame.velocity.data, frame.semantic.data[None], flow])


def encode_gseq(seq: FrameSequence, extra_planes: Optional[list] = None) -> bytes:
    g = seq.geometry
    n_ch = STANDARD_CHANNELS if extra_planes is None else EXTENDED_CHANNELS
    parts = [GSEQ_MAGIC, _HEADER.pack(g.width_cells, g.height_cells, len(seq.frames), n_ch,
                                      g.cell_size_m, seq.dt_s)]
    for k, frame in enumerate(seq.frames):
        parts.append(_FRAME.pack(frame.timestamp_s, *frame.pose.as_tuple()))
        planes = frame_planes(frame)
        if extra_planes is not None:
            planes = np.concatenate([planes, np.asarray(extra_planes[k], dtype=np.float64)[None]])
        parts.append(planes.astype("<f4").tobytes(order="C"))
    return b"".join(parts)


def write_gseq(path, seq: FrameSequence, extra_planes=None, meta: Optional[dict] = None) -> Path:
    """Write ``seq`` plus its instances sidecar (and optional meta sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_gseq(seq, extra_planes))
    instances = [[vi.to_dict() for vi in inst] for inst in seq.instances]
    sidecar_path(path).write_text(json.dumps(instances, sort_keys=True))
    if meta is not None:
        meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2))
    return path


def decode_gseq(blob: bytes):
    """Parse GSEQ1 bytes into ``(geometry, dt, frames_raw)``.

    ``frames_raw`` is a list of ``(timestamp, pose tuple, planes)`` with
    ``planes`` shaped ``(channel_count, H, W)`` in float64.
    """
    if blob[:8] != GSEQ_MAGIC:
        raise FormatError("not a GSEQ1 file (bad magic)")
    off = 8
    width, height, n_frames, n_ch, cell, dt = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    if n_ch < STANDARD_CHANNELS:
        raise FormatError(f"GSEQ1 needs at least {STANDARD_CHANNELS} channels, got {n_ch}")
    plane_bytes = 4 * n_ch * width * height
    expected = off + n_frames * (_FRAME.size + plane_bytes)
    if len(blob) != expected:
        raise FormatError(f"GSEQ1 size mismatch: expected {expected} bytes, got {len(blob)}")
    frames = []
    for _ in range(n_frames):
        t, x, y, h = _FRAME.unpack_from(blob, off)
        off += _FRAME.size
        planes = np.frombuffer(blob, dtype="<f4", count=n_ch * width * height, offset=off)
        off += plane_bytes
        frames.append((t, (x, y, h), planes.reshape(n_ch, height, width).astype(np.float64)))
    return GridGeometry(width, height, cell), dt, frames


def _planes_to_frame(t, pose, planes) -> Frame:
    flow = None if np.all(np.isnan(planes[6:8])) else FlowGrid(planes[6:8])
    state = np.clip(planes[0:3], 0.0, 1.0)
    total = state.sum(axis=0)
    # float32 storage can push the simplex sum a hair above 1
    state = np.where(total > 1.0, state / np.maximum(total, 1e-12), state)
    return Frame(t, OccupancyStateGrid(state), VelocityGrid(planes[3:5]),
                 SemanticGrid(np.clip(planes[5], 0.0, 1.0)), flow, Pose2D(*pose))


def read_gseq(path, with_extra: bool = False):
    """Read a GSEQ1 file and its sidecar (if present) into a ``FrameSequence``.

    With ``with_extra=True`` also return the list of extra planes (or None).
    """
    path = Path(path)
    geometry, dt, raw = decode_gseq(path.read_bytes())
    frames = [_planes_to_frame(t, pose, planes) for t, pose, planes in raw]
    side = sidecar_path(path)
    instances = ()
    if side.exists():
        data = json.loads(side.read_text())
        if len(data) != len(frames):
            raise FormatError("instances sidecar frame count does not match GSEQ1 file")
        instances = tuple(tuple(VehicleInstance.from_dict(d) for d in per) for per in data)
    seq = FrameSequence(geometry, tuple(frames), instances)
    if with_extra:
        extra = [planes[8] for _, _, planes in raw] if raw and raw[0][2].shape[0] > 8 else None
        return seq, extra
    return seq


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], manifest: dict) -> Path:
    """Named float32 parameter table plus ``<path>.json`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    path.write_bytes(b"".join(parts))
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return path


def read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise FormatError("not a gridflow checkpoint")
    off = 8
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    manifest_file = path.with_suffix(path.suffix + ".json")
    manifest = json.loads(manifest_file.read_text()) if manifest_file.exists() else {}
    return tensors, manifest
