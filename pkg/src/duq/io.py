"""File formats: DUQ1 rasters, ASCII PLY clouds, DUQM checkpoints, JSON reports, sweep CSV.

DUQ1 raster (all integers little-endian)::

    offset  size        field
    0       4           magic b"DUQ1"
    4       4           width   (u32)
    8       4           height  (u32)
    12      4           channels (u32)
    16      channels    one semantic tag byte per plane: 0 depth, 1 sigma, 2 variance, 3 mask
    16+c    4*w*h*c     float32 planes, one after another, each row-major

DUQM checkpoint::

    0       4           magic b"DUQM"
    4       4           format version (u32, currently 1)
    8       4           length L of the JSON header (u32)
    12      L           UTF-8 JSON: network config, seeds, optimizer settings, init variance
    12+L    8           parameter count N (u64)
    20+L    8*N         float64 parameters; per layer the weight matrix (row-major, in x out)
                        followed by its bias
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from duq.errors import FormatError
from duq.geometry import SweepRow, UncertainPointCloud
from duq.predictive import DepthRaster, GaussianPrediction, PredictiveSampleSet
from duq.toynet import ToyNetConfig, ToyNetParams, n_params

RASTER_MAGIC = b"DUQ1"
CHECKPOINT_MAGIC = b"DUQM"
CHECKPOINT_VERSION = 1
REPORT_SCHEMA_VERSION = 1
SWEEP_HEADER = ("percentile", "rmse_t_m", "rmse_r_deg", "n_pairs", "n_failed")


class Channel(IntEnum):
    DEPTH = 0
    SIGMA = 1
    VAR = 2
    MASK = 3


@dataclass
class RasterBundle:
    width: int
    height: int
    planes: list[tuple[Channel, np.ndarray]] = field(default_factory=list)

    def add(self, tag: Channel, values) -> "RasterBundle":
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 1 and self.height == 1:
            arr = arr[None, :]
        if arr.shape != (self.height, self.width):
            raise FormatError(f"plane shape {arr.shape} does not match {self.height}x{self.width}")
        self.planes.append((Channel(tag), arr.astype(np.float32)))
        return self

    def tags(self) -> list[Channel]:
        return [t for t, _ in self.planes]

    def first(self, tag: Channel) -> np.ndarray | None:
        for t, a in self.planes:
            if t == tag:
                return a
        return None

    def all(self, tag: Channel) -> list[np.ndarray]:
        return [a for t, a in self.planes if t == tag]


def encode_raster(bundle: RasterBundle) -> bytes:
    c = len(bundle.planes)
    head = RASTER_MAGIC + struct.pack("<III", bundle.width, bundle.height, c)
    tags = bytes(int(t) for t, _ in bundle.planes)
    data = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in bundle.planes)
    return head + tags + data


def decode_raster(buf: bytes) -> RasterBundle:
    if len(buf) < 16:
        raise FormatError(f"truncated raster header: expected at least 16 bytes, got {len(buf)}", offset=len(buf))
    if buf[:4] != RASTER_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {RASTER_MAGIC!r}", offset=0)
    w, h, c = struct.unpack_from("<III", buf, 4)
    if w == 0 or h == 0:
        raise FormatError(f"raster dimensions must be positive, got {w}x{h}", offset=4)
    expected = 16 + c + 4 * w * h * c
    if len(buf) != expected:
        kind = "truncated" if len(buf) < expected else "oversized"
        raise FormatError(f"{kind} raster: expected {expected} bytes, got {len(buf)}",
                          offset=min(len(buf), expected))
    bundle = RasterBundle(w, h)
    plane_bytes = 4 * w * h
    for k in range(c):
        tag_off = 16 + k
        try:
            tag = Channel(buf[tag_off])
        except ValueError:
            raise FormatError(f"unknown channel tag {buf[tag_off]}", offset=tag_off) from None
        start = 16 + c + k * plane_bytes
        arr = np.frombuffer(buf, dtype="<f4", count=w * h, offset=start).reshape(h, w).astype(np.float32)
        if tag in (Channel.DEPTH, Channel.MASK):
            bad = np.flatnonzero(np.isnan(arr))
            if tag == Channel.MASK and bad.size == 0:
                bad = np.flatnonzero((arr != 0.0) & (arr != 1.0))
            if bad.size:
                what = "NaN in depth plane" if tag == Channel.DEPTH else f"mask value {arr.flat[bad[0]]} not in {{0, 1}}"
                raise FormatError(f"{what} (plane {k}, pixel {bad[0]})", offset=start + 4 * int(bad[0]))
        bundle.planes.append((tag, arr))
    return bundle


def write_raster(bundle: RasterBundle, path) -> None:
    Path(path).write_bytes(encode_raster(bundle))


def read_raster(path) -> RasterBundle:
    return decode_raster(Path(path).read_bytes())


def is_raster_file(path) -> bool:
    with open(path, "rb") as f:
        return f.read(4) == RASTER_MAGIC


# conversions between bundles and domain objects

def _as_2d(a: np.ndarray) -> np.ndarray:
    return a[None, :] if a.ndim == 1 else a


def depth_to_bundle(depth: DepthRaster) -> RasterBundle:
    b = RasterBundle(depth.width, depth.height)
    b.add(Channel.DEPTH, np.where(depth.valid, depth.values, 0.0))
    b.add(Channel.MASK, depth.valid.astype(np.float64))
    return b


def bundle_to_depth(bundle: RasterBundle) -> DepthRaster:
    d = bundle.first(Channel.DEPTH)
    if d is None:
        raise FormatError("raster has no depth plane")
    d = d.astype(np.float64)
    m = bundle.first(Channel.MASK)
    valid = (m == 1.0) if m is not None else np.isfinite(d) & (d > 0)
    return DepthRaster(np.where(valid, d, 1.0), valid)


def samples_to_bundle(samples: PredictiveSampleSet) -> RasterBundle:
    means = samples.means
    sig = samples.sigmas
    if means.ndim == 2:
        means, sig = means[:, None, :], sig[:, None, :]
    if means.ndim != 3:
        raise FormatError(f"sample rasters must be 1-D or 2-D, got shape {samples.shape}")
    b = RasterBundle(means.shape[2], means.shape[1])
    for m, s in zip(means, sig):
        b.add(Channel.DEPTH, m)
        b.add(Channel.SIGMA, s)
    return b


def bundle_to_samples(bundle: RasterBundle) -> PredictiveSampleSet:
    tags = bundle.tags()
    if not tags or len(tags) % 2 or any(t != (Channel.DEPTH if i % 2 == 0 else Channel.SIGMA)
                                        for i, t in enumerate(tags)):
        raise FormatError("sample set raster must hold alternating depth/sigma planes")
    means = np.stack([a for t, a in bundle.planes if t == Channel.DEPTH]).astype(np.float64)
    sigmas = np.stack([a for t, a in bundle.planes if t == Channel.SIGMA]).astype(np.float64)
    return PredictiveSampleSet(means, sigmas)


def gaussian_to_bundle(pred: GaussianPrediction) -> RasterBundle:
    mean = _as_2d(pred.mean)
    b = RasterBundle(mean.shape[1], mean.shape[0])
    b.add(Channel.DEPTH, mean)
    b.add(Channel.VAR, _as_2d(pred.var_epistemic))
    b.add(Channel.VAR, _as_2d(pred.var_aleatoric))
    b.add(Channel.VAR, _as_2d(pred.var_total))
    return b


def bundle_to_gaussian(bundle: RasterBundle) -> GaussianPrediction:
    """Mean plus (epistemic, aleatoric, total) variance planes; a bare depth raster has zero variance.

    The total is recomputed from the stored parts so it equals their sum exactly.
    """
    if bundle.tags()[:4] == [Channel.DEPTH, Channel.VAR, Channel.VAR, Channel.VAR]:
        _, epi, ale, _ = (a.astype(np.float64) for _, a in bundle.planes[:4])
        return GaussianPrediction.from_parts(bundle.planes[0][1].astype(np.float64), epi, ale)
    d = bundle.first(Channel.DEPTH)
    if d is None:
        raise FormatError("prediction raster has no depth plane")
    sigma = bundle.first(Channel.SIGMA)
    ale = np.zeros(d.shape) if sigma is None else sigma.astype(np.float64) ** 2
    return GaussianPrediction.from_parts(d.astype(np.float64), np.zeros(d.shape), ale)


# PLY

def _ply_header(n: int, comments=()) -> list[str]:
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines += [f"element vertex {n}", "property float x", "property float y", "property float z",
              "property float sigma", "end_header"]
    return lines


def encode_ply(cloud: UncertainPointCloud, comments=()) -> str:
    data = np.column_stack([cloud.points, cloud.sigma]).astype(np.float32)
    lines = _ply_header(len(cloud), comments)
    lines += [" ".join("%.9g" % v for v in row) for row in data]
    return "\n".join(lines) + "\n"


def decode_ply(text: str) -> UncertainPointCloud:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    expected_props = ["x", "y", "z", "sigma"]

    def line(i):
        if i >= len(lines):
            raise FormatError("unexpected end of header", line=i + 1)
        return lines[i].strip()

    if line(0) != "ply":
        raise FormatError("first line must be 'ply'", line=1)
    if line(1) != "format ascii 1.0":
        raise FormatError(f"unsupported format line {line(1)!r}", line=2)
    i = 2
    n = None
    props = []
    while True:
        s = line(i)
        tok = s.split()
        if not tok or tok[0] == "comment" or tok[0] == "obj_info":
            pass
        elif tok[0] == "element":
            if n is not None or len(tok) != 3 or tok[1] != "vertex" or not tok[2].isdigit():
                raise FormatError(f"expected a single 'element vertex <n>', got {s!r}", line=i + 1)
            n = int(tok[2])
        elif tok[0] == "property":
            if n is None or len(tok) != 3 or tok[1] != "float":
                raise FormatError(f"bad property line {s!r}", line=i + 1)
            props.append(tok[2])
        elif tok[0] == "end_header":
            break
        else:
            raise FormatError(f"unexpected header line {s!r}", line=i + 1)
        i += 1
    if n is None:
        raise FormatError("missing 'element vertex' line", line=i + 1)
    if props != expected_props:
        raise FormatError(f"vertex properties {props} != {expected_props}", line=i + 1)
    body = lines[i + 1:]
    if len(body) != n:
        raise FormatError(f"expected {n} vertex lines, found {len(body)}", line=i + 2 + min(len(body), n))
    data = np.empty((n, 4), dtype=np.float32)
    for k, row in enumerate(body):
        tok = row.split()
        if len(tok) != 4:
            raise FormatError(f"vertex line needs 4 values, got {len(tok)}", line=i + 2 + k)
        try:
            vals = [float(t) for t in tok]
        except ValueError:
            raise FormatError(f"non-numeric vertex value in {row!r}", line=i + 2 + k) from None
        if not all(math.isfinite(v) for v in vals) or vals[3] < 0:
            raise FormatError("vertex values must be finite with sigma >= 0", line=i + 2 + k)
        data[k] = vals
    return UncertainPointCloud(data[:, :3].astype(np.float64), data[:, 3].astype(np.float64))


def write_ply(cloud: UncertainPointCloud, path, comments=()) -> None:
    Path(path).write_text(encode_ply(cloud, comments), encoding="ascii")


def read_ply(path) -> UncertainPointCloud:
    return decode_ply(Path(path).read_text(encoding="ascii"))


# checkpoints

def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def encode_checkpoint(params: ToyNetParams, config: ToyNetConfig) -> bytes:
    header = {"config": config.to_dict(), "meta": _json_safe(params.meta), "init_variance_semantics": "variance"}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    flat = params.flat()
    return (CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob
            + struct.pack("<Q", flat.size) + flat.astype("<f8").tobytes())


def decode_checkpoint(buf: bytes) -> tuple[ToyNetParams, ToyNetConfig]:
    if len(buf) < 12:
        raise FormatError(f"truncated checkpoint: {len(buf)} bytes", offset=len(buf))
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    if len(buf) < 12 + hlen + 8:
        raise FormatError(f"truncated checkpoint header: expected {12 + hlen + 8} bytes, got {len(buf)}",
                          offset=len(buf))
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
        config = ToyNetConfig.from_dict(header["config"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}", offset=12) from None
    (n,) = struct.unpack_from("<Q", buf, 12 + hlen)
    start = 20 + hlen
    if len(buf) != start + 8 * n:
        raise FormatError(f"checkpoint payload: expected {start + 8 * n} bytes, got {len(buf)}",
                          offset=min(len(buf), start + 8 * n))
    if n != n_params(config):
        raise FormatError(f"{n} parameters stored, config needs {n_params(config)}", offset=12 + hlen)
    flat = np.frombuffer(buf, dtype="<f8", count=n, offset=start).astype(np.float64)
    return ToyNetParams.from_flat(config, flat, header.get("meta", {})), config


def write_checkpoint(params: ToyNetParams, config: ToyNetConfig, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params, config))


def read_checkpoint(path) -> tuple[ToyNetParams, ToyNetConfig]:
    return decode_checkpoint(Path(path).read_bytes())


# reports

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if v is None:
        return "null"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if not math.isfinite(v):
            return "null"
        return "%.9g" % v
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, np.ndarray):
        v = v.tolist()
    if isinstance(v, dict):
        items = sorted((str(k), x) for k, x in v.items())
        return "{" + ",".join(f"{json.dumps(k)}:{_fmt(x)}" for k, x in items) + "}"
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(_fmt(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def dumps_report(report: dict) -> str:
    """Deterministic JSON: sorted keys, floats as %.9g, non-finite floats as null."""
    return _fmt(report) + "\n"


def write_report(report: dict, path) -> None:
    Path(path).write_text(dumps_report(report), encoding="utf-8")


def config_hash(config: dict) -> str:
    return hashlib.sha256(dumps_report(config).encode("utf-8")).hexdigest()[:16]


# sweep CSV

def encode_sweep_csv(rows: list[SweepRow], provenance: dict | None = None) -> str:
    buf = _io.StringIO()
    if provenance:
        buf.write("# " + " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow(["%.2f" % r.percentile, "%.9g" % r.rmse_t, "%.9g" % r.rmse_r, r.n_pairs, r.n_failed])
    return buf.getvalue()


def write_sweep_csv(rows: list[SweepRow], path, provenance: dict | None = None) -> None:
    Path(path).write_text(encode_sweep_csv(rows, provenance), encoding="utf-8")


def read_sweep_csv(path) -> list[SweepRow]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    if tuple(header or ()) != SWEEP_HEADER:
        raise FormatError(f"unexpected sweep header {header}", line=1)
    rows = []
    for k, rec in enumerate(reader, start=2):
        if len(rec) != len(SWEEP_HEADER):
            raise FormatError(f"expected {len(SWEEP_HEADER)} fields, got {len(rec)}", line=k)
        rows.append(SweepRow(float(rec[0]), float(rec[1]), float(rec[2]), int(rec[3]), int(rec[4])))
    return rows
