"""Binary and text file formats.

All multi-byte integers are little-endian; tensor payloads are raw
little-endian buffers. Every format round-trips byte-exactly:
write(read(f)) reproduces f.

Checkpoint ("CHRN"):
    magic 4s | version u32 | meta_len u32 | meta utf-8 "key: value" lines |
    tensor_count u32 | per tensor: name_len u32, name utf-8, dtype u8
    (0=f32, 1=f64), rank u8, extents u64[rank], raw data.

Dataset container ("CHRD"):
    magic 4s | version u32 | clip_count u32 | per clip: spec_len u32,
    spec utf-8 "key: value" lines, T u32, H u32, W u32, frames u8[T*H*W*3],
    track_count u32, per track: sprite_id u32, local_u f32, local_v f32,
    positions f32[T*2], visible u8[T].

Trajectory interchange: plain text, see write_trajectories.
"""

from __future__ import annotations

import io
import struct

import numpy as np

FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed or mismatched file content."""


def encode_kv(meta: dict) -> str:
    return "".join(f"{k}: {v}\n" for k, v in meta.items())


def decode_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise FormatError(f"bad key-value line: {line!r}")
        k, v = line.split(":", 1)
        out[k.strip()] = v.strip()
    return out


def _write_u32(f, v):
    f.write(struct.pack("<I", v))


def _read_u32(f) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("truncated file (expected u32)")
    return struct.unpack("<I", raw)[0]


def _read_exact(f, n: int) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated file (expected {n} bytes, got {len(raw)})")
    return raw


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict):
    buf = io.BytesIO()
    buf.write(b"CHRN")
    _write_u32(buf, FORMAT_VERSION)
    meta_bytes = encode_kv(meta).encode("utf-8")
    _write_u32(buf, len(meta_bytes))
    buf.write(meta_bytes)
    _write_u32(buf, len(tensors))
    seen = set()
    for name, arr in tensors.items():
        if name in seen:
            raise FormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        name_bytes = name.encode("utf-8")
        _write_u32(buf, len(name_bytes))
        buf.write(name_bytes)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"CHRN":
            raise FormatError(f"{path}: not a checkpoint file (bad magic)")
        version = _read_u32(f)
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        meta = decode_kv(_read_exact(f, _read_u32(f)).decode("utf-8"))
        count = _read_u32(f)
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = _read_exact(f, _read_u32(f)).decode("utf-8")
            if name in tensors:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            tag, rank = struct.unpack("<BB", _read_exact(f, 2))
            if tag not in _TAG_DTYPES:
                raise FormatError(f"{path}: unknown dtype tag {tag}")
            shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
            n = int(np.prod(shape)) if rank else 1
            dtype = _TAG_DTYPES[tag]
            raw = _read_exact(f, n * dtype.itemsize)
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        return tensors, meta


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

def write_dataset(path, clips):
    """clips: iterable of synthdata.Clip."""
    buf = io.BytesIO()
    buf.write(b"CHRD")
    _write_u32(buf, FORMAT_VERSION)
    clips = list(clips)
    _write_u32(buf, len(clips))
    for clip in clips:
        spec_bytes = encode_kv(clip.spec.to_meta()).encode("utf-8")
        _write_u32(buf, len(spec_bytes))
        buf.write(spec_bytes)
        frames = np.ascontiguousarray(clip.frames, dtype=np.uint8)
        t, h, w, c = frames.shape
        if c != 3:
            raise FormatError("frames must be (T,H,W,3) u8")
        _write_u32(buf, t)
        _write_u32(buf, h)
        _write_u32(buf, w)
        buf.write(frames.tobytes())
        _write_u32(buf, len(clip.tracks))
        for tr in clip.tracks:
            if not np.isfinite(tr.positions).all():
                raise FormatError("track positions must be finite")
            buf.write(struct.pack("<Iff", tr.sprite_id, float(tr.local_xy[0]), float(tr.local_xy[1])))
            buf.write(np.ascontiguousarray(tr.positions, dtype="<f4").tobytes())
            buf.write(np.ascontiguousarray(tr.visible, dtype=np.uint8).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_dataset(path):
    from .synthdata import Clip, GroundTruthTrack, SceneSpec

    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"CHRD":
            raise FormatError(f"{path}: not a dataset file (bad magic)")
        version = _read_u32(f)
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        clips = []
        for _ in range(_read_u32(f)):
            spec = SceneSpec.from_meta(decode_kv(_read_exact(f, _read_u32(f)).decode("utf-8")))
            t = _read_u32(f)
            h = _read_u32(f)
            w = _read_u32(f)
            frames = np.frombuffer(_read_exact(f, t * h * w * 3), dtype=np.uint8)
            frames = frames.reshape(t, h, w, 3).copy()
            tracks = []
            for _ in range(_read_u32(f)):
                sprite_id, lu, lv = struct.unpack("<Iff", _read_exact(f, 12))
                pos = np.frombuffer(_read_exact(f, t * 2 * 4), dtype="<f4").reshape(t, 2).copy()
                vis = np.frombuffer(_read_exact(f, t), dtype=np.uint8).astype(bool)
                tracks.append(GroundTruthTrack(positions=pos, visible=vis,
                                               sprite_id=sprite_id, local_xy=(lu, lv)))
            clips.append(Clip(frames=frames, tracks=tracks, spec=spec))
        return clips


# ---------------------------------------------------------------------------
# trajectory interchange (text)
# ---------------------------------------------------------------------------

def write_trajectories(path, clip_id, mode: str, frames: int, predictions):
    """predictions: list of tracker.TrackPrediction."""
    lines = [
        "# tempotrack trajectory v1",
        f"clip: {clip_id}",
        f"mode: {mode}",
        f"frames: {frames}",
        f"queries: {len(predictions)}",
    ]
    for pred in predictions:
        q = pred.query
        if pred.positions.shape != (frames, 2):
            raise FormatError(
                f"prediction has {pred.positions.shape[0]} positions, expected {frames}"
            )
        lines.append(f"query: t={q.t} x={q.x:.6f} y={q.y:.6f}")
        for t in range(frames):
            lines.append(f"{t} {pred.positions[t, 0]:.6f} {pred.positions[t, 1]:.6f}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_trajectories(path):
    from .tracker import QueryPoint, TrackPrediction

    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or not lines[0].startswith("# tempotrack trajectory"):
        raise FormatError(f"{path}: not a trajectory file")
    header = decode_kv("\n".join(lines[1:5]))
    frames = int(header["frames"])
    n_queries = int(header["queries"])
    preds = []
    i = 5
    for _ in range(n_queries):
        if not lines[i].startswith("query:"):
            raise FormatError(f"{path}: expected query line at {i + 1}")
        fields = dict(part.split("=") for part in lines[i].split()[1:])
        query = QueryPoint(x=float(fields["x"]), y=float(fields["y"]), t=int(fields["t"]))
        i += 1
        pos = np.zeros((frames, 2), dtype=np.float64)
        for t in range(frames):
            idx, x, y = lines[i].split()
            if int(idx) != t:
                raise FormatError(f"{path}: frame index mismatch at line {i + 1}")
            pos[t] = (float(x), float(y))
            i += 1
        preds.append(TrackPrediction(query=query, positions=pos))
    return header, preds


def read_queries_file(path):
    """Plain text query list: one 'x y t' triple per line; # comments allowed."""
    from .tracker import QueryPoint

    queries = []
    with open(path, "r", encoding="utf-8") as f:
        for ln_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{ln_no}: expected 'x y t', got {line!r}")
            queries.append(QueryPoint(x=float(parts[0]), y=float(parts[1]), t=int(parts[2])))
    return queries


# ---------------------------------------------------------------------------
# portable pixmap
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray):
    """8-bit binary RGB pixmap (P6). image: (H, W, 3) uint8."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise FormatError(f"write_ppm expects (H,W,3) uint8, got {image.shape} {image.dtype}")
    with open(path, "wb") as f:
        f.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise FormatError(f"{path}: not a binary pixmap")
        w, h = map(int, f.readline().split())
        maxval = int(f.readline())
        if maxval != 255:
            raise FormatError(f"{path}: unsupported max value {maxval}")
        data = np.frombuffer(_read_exact(f, w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).copy()
