"""File formats, dataset windowing helpers, and run manifests.

Disk storage is 32-bit little-endian float throughout; everything is
widened to float64 the moment it enters memory. All writers go through a
write-to-temp-then-rename so a crash never leaves a half-written file
behind.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    ParameterShapeError,
    ParseError,
    PayloadError,
    VersionMismatchError,
)
from .tokenizer import TokenizerParams
from .transformer import Block, ModelConfig, ModelState, init_model
from .triplets import GRAPH_NEIGHBORS, ModalityKind

_TENSOR_MAGIC = b"PGT1"
_CKPT_MAGIC = b"PGCK"
_CKPT_VERSION = 1


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".pg-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# single-tensor files: magic, u32 rank, rank x u64 dims, f32 row-major data
# ---------------------------------------------------------------------------

def write_tensor(path: str, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    header = struct.pack("<4sI", _TENSOR_MAGIC, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    _atomic_write(path, header + dims + arr.astype("<f4").tobytes(order="C"))


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise PayloadError(f"{path}: truncated header")
    magic, rank = struct.unpack_from("<4sI", blob, 0)
    if magic != _TENSOR_MAGIC:
        raise PayloadError(f"{path}: bad magic {magic!r}")
    if rank > 32:
        raise PayloadError(f"{path}: implausible rank {rank}")
    need = 8 + 8 * rank
    if len(blob) < need:
        raise PayloadError(f"{path}: truncated dimension list")
    shape = struct.unpack_from(f"<{rank}Q", blob, 8) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(blob) != need + 4 * count:
        raise PayloadError(f"{path}: payload is {len(blob) - need} bytes, "
                           f"expected {4 * count}")
    flat = np.frombuffer(blob, dtype="<f4", count=count, offset=need)
    return flat.astype(np.float64).reshape(shape)


# ---------------------------------------------------------------------------
# checkpoints: header, JSON manifest, per-parameter f32 blobs with checksums
# ---------------------------------------------------------------------------

@dataclass
class CheckpointBundle:
    state: ModelState
    step: int
    rng_state: object
    manifest: dict


def save_checkpoint(path: str, state: ModelState, step: int = 0, rng_state=None) -> None:
    named = state.named()
    entries = []
    blobs = []
    offset = 0
    for name in sorted(named):
        blob = np.ascontiguousarray(named[name].data).astype("<f4").tobytes(order="C")
        entries.append({
            "name": name,
            "shape": list(named[name].data.shape),
            "dtype": "<f4",
            "offset": offset,
            "nbytes": len(blob),
            "crc32": zlib.crc32(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": _CKPT_VERSION,
        "config": state.config.to_dict(),
        "step": int(step),
        "rng_state": rng_state,
        "entries": entries,
        "payload_nbytes": offset,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    header = struct.pack("<4sIII", _CKPT_MAGIC, _CKPT_VERSION, len(mbytes),
                         zlib.crc32(mbytes))
    _atomic_write(path, header + mbytes + b"".join(blobs))


def _rebuild_state(config: ModelConfig, arrays: dict) -> ModelState:
    def take(name):
        if name not in arrays:
            raise PayloadError(f"manifest is missing parameter {name!r}")
        return Tensor(arrays.pop(name), requires_grad=True)

    tok_fields = [f.name for f in dataclasses.fields(TokenizerParams)]
    tokenizer = TokenizerParams(**{f: take(f"tokenizer.{f}") for f in tok_fields})
    blocks = []
    for i in range(config.n_blocks):
        names = [f.name for f in dataclasses.fields(Block)]
        blocks.append(Block(**{n: take(f"block{i}.{n}") for n in names}))
    state = ModelState(
        config=config,
        tokenizer=tokenizer,
        input_w=take("input.w"),
        input_b=take("input.b"),
        blocks=blocks,
        final_gain=take("final_gain"),
        pos_table=take("pos_table") if config.global_topology == "additive" else None,
    )
    head = []
    while f"head.{len(head)}.w" in arrays:
        i = len(head)
        head.append((take(f"head.{i}.w"), take(f"head.{i}.b")))
    state.head = head
    if arrays:
        raise PayloadError(f"unrecognized parameters in file: {sorted(arrays)}")
    return state


def _check_against_config(entries: dict, expected: ModelConfig) -> None:
    reference = {name: tuple(t.data.shape)
                 for name, t in init_model(expected, seed=0).named().items()}
    for name in sorted(set(entries) | set(reference)):
        found = entries.get(name)
        want = reference.get(name)
        if want is None:
            raise ParameterShapeError(name, (), found)
        if found is None:
            raise ParameterShapeError(name, want, ())
        if tuple(found) != want:
            raise ParameterShapeError(name, want, found)


def load_checkpoint(path: str, expected_config: ModelConfig | None = None) -> CheckpointBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise PayloadError(f"{path}: truncated header")
    magic, version, mlen, mcrc = struct.unpack_from("<4sIII", blob, 0)
    if magic != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != _CKPT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, "
                                   f"this build reads {_CKPT_VERSION}")
    if len(blob) < 16 + mlen:
        raise PayloadError(f"{path}: truncated manifest")
    mbytes = blob[16:16 + mlen]
    if zlib.crc32(mbytes) != mcrc:
        raise PayloadError(f"{path}: manifest checksum mismatch")
    try:
        manifest = json.loads(mbytes.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PayloadError(f"{path}: manifest is not valid JSON: {exc}") from exc

    payload = blob[16 + mlen:]
    if len(payload) != manifest["payload_nbytes"]:
        raise PayloadError(f"{path}: payload is {len(payload)} bytes, manifest "
                           f"says {manifest['payload_nbytes']}")
    config = ModelConfig(**manifest["config"])
    shapes = {e["name"]: tuple(e["shape"]) for e in manifest["entries"]}
    if expected_config is not None:
        _check_against_config(shapes, expected_config)

    arrays = {}
    for entry in manifest["entries"]:
        lo, n = entry["offset"], entry["nbytes"]
        chunk = payload[lo:lo + n]
        if len(chunk) != n:
            raise PayloadError(f"{path}: parameter {entry['name']!r} extends past "
                               "end of payload")
        if zlib.crc32(chunk) != entry["crc32"]:
            raise PayloadError(f"{path}: checksum mismatch in parameter "
                               f"{entry['name']!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        if n != 4 * count:
            raise ParameterShapeError(entry["name"], entry["shape"],
                                      (n // 4,))
        arr = np.frombuffer(chunk, dtype="<f4", count=count)
        arrays[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    state = _rebuild_state(config, arrays)
    return CheckpointBundle(state=state, step=manifest["step"],
                            rng_state=manifest["rng_state"], manifest=manifest)


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

@dataclass
class TableData:
    values: np.ndarray          # (rows, cols) float64, NaN marks missing
    columns: list
    kinds: dict                 # column -> "numeric" | "categorical"
    categories: dict            # column -> sorted category strings


def read_table_csv(path: str, schema: dict | None = None) -> TableData:
    schema = dict(schema or {})
    for col, kind in schema.items():
        if kind not in ("numeric", "categorical"):
            raise ContractError(f"schema kind for {col!r} must be numeric or "
                                f"categorical, got {kind!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header row", line=1)
        if len(set(header)) != len(header):
            raise ParseError("duplicate column names in header", line=1)
        unknown = set(schema) - set(header)
        if unknown:
            raise ContractError(f"schema names columns not in the file: {sorted(unknown)}")
        kinds = {col: schema.get(col, "numeric") for col in header}

        raw_rows = []
        for row in reader:
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} cells, found {len(row)}",
                                 line=reader.line_num)
            raw_rows.append((reader.line_num, row))

    values = np.full((len(raw_rows), len(header)), np.nan)
    categories = {}
    for j, col in enumerate(header):
        if kinds[col] == "numeric":
            for i, (lineno, row) in enumerate(raw_rows):
                cell = row[j].strip()
                if cell == "":
                    continue
                try:
                    values[i, j] = float(cell)
                except ValueError:
                    raise ParseError(f"column {col!r}: {cell!r} is not numeric",
                                     line=lineno)
        else:
            seen = sorted({row[j].strip() for _, row in raw_rows if row[j].strip()})
            code = {s: k for k, s in enumerate(seen)}
            categories[col] = seen
            for i, (_, row) in enumerate(raw_rows):
                cell = row[j].strip()
                if cell:
                    values[i, j] = code[cell]
    return TableData(values=values, columns=header, kinds=kinds, categories=categories)


def write_table_csv(path: str, table: TableData) -> None:
    lines = [",".join(table.columns)]
    for row in table.values:
        cells = []
        for col, v in zip(table.columns, row):
            if np.isnan(v):
                cells.append("")
            elif table.kinds[col] == "categorical":
                cells.append(table.categories[col][int(v)])
            else:
                cells.append(repr(float(v)))
        lines.append(",".join(cells))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# windowing / grouping / neighbor sampling
# ---------------------------------------------------------------------------

def frame_timeseries(series, window: int = 256, stride: int | None = None) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError(f"series must be 1-D, got shape {x.shape}")
    stride = window if stride is None else int(stride)
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    if x.size < window:
        raise ContractError(f"series length {x.size} is shorter than the "
                            f"window ({window})")
    count = (x.size - window) // stride + 1
    return np.stack([x[i * stride:i * stride + window] for i in range(count)])


def group_pointcloud(points, g: int, k: int, seed: int = 0):
    """Farthest-point centers from a seeded start, then k nearest per center.

    Returns (groups (g, k, 3), center_indices in selection order)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ContractError(f"points must be (S, 3), got {pts.shape}")
    s = pts.shape[0]
    if g < 1 or k < 1:
        raise ContractError("g and k must be positive")
    if s < g:
        raise ContractError(f"cannot pick {g} centers from {s} points")
    if s < k:
        raise ContractError(f"cannot take {k} neighbors from {s} points")

    rng = np.random.default_rng(seed)
    centers = [int(rng.integers(s))]
    dist = np.linalg.norm(pts - pts[centers[0]], axis=1)
    for _ in range(g - 1):
        nxt = int(np.argmax(dist))  # first index wins ties
        centers.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))

    groups = np.empty((g, k, 3))
    for gi, ci in enumerate(centers):
        d = np.linalg.norm(pts - pts[ci], axis=1)
        idx = np.argsort(d, kind="stable")[:k]
        groups[gi] = pts[idx]
    return groups, np.array(centers)


def sample_graph_neighbors(adjacency, anchor, count: int = GRAPH_NEIGHBORS,
                           seed: int = 0) -> np.ndarray:
    """Neighbor ids for one anchor: without replacement when the degree
    allows it, with replacement otherwise; isolated nodes echo the anchor."""
    if isinstance(adjacency, dict):
        if anchor not in adjacency:
            raise ContractError(f"anchor {anchor!r} is not a node")
        neigh = sorted(adjacency[anchor])
    else:
        mat = np.asarray(adjacency)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ContractError(f"adjacency matrix must be square, got {mat.shape}")
        if not 0 <= anchor < mat.shape[0]:
            raise ContractError(f"anchor {anchor!r} is not a node")
        neigh = list(np.flatnonzero(mat[anchor]))
    if not neigh:
        return np.full(count, anchor, dtype=np.int64)
    rng = np.random.default_rng(seed)
    replace = len(neigh) < count
    return np.asarray(rng.choice(neigh, size=count, replace=replace), dtype=np.int64)


# ---------------------------------------------------------------------------
# step logs: one JSON object per line
# ---------------------------------------------------------------------------

def append_log_record(path: str, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def make_step_logger(path: str):
    def log(record: dict) -> None:
        append_log_record(path, record)
    return log


def read_log(path: str) -> list:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad log record: {exc}", line=lineno)
    return records


# ---------------------------------------------------------------------------
# two-column plot data
# ---------------------------------------------------------------------------

def emit_plotdata(path: str, points, header=("x", "y")) -> None:
    """Write (x, y) rows under a header, sorted by x then y. Writing the
    same points again produces byte-identical output."""
    pts = [(float(x), float(y)) for x, y in points]
    if not pts:
        raise ContractError("no points to emit")
    pts.sort()
    lines = [",".join(header)]
    lines.extend(f"{repr(x)},{repr(y)}" for x, y in pts)
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_plotdata(path: str) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty plot data file", line=1)
        if len(header) != 2:
            raise ParseError(f"expected two columns, header has {len(header)}", line=1)
        points = []
        for row in reader:
            if len(row) != 2:
                raise ParseError(f"expected two cells, found {len(row)}",
                                 line=reader.line_num)
            try:
                points.append((float(row[0]), float(row[1])))
            except ValueError:
                raise ParseError(f"non-numeric cell in {row}", line=reader.line_num)
    if not points:
        raise ParseError("plot data file has a header but no rows", line=1)
    return points


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------

_ALL_MODALITIES = tuple(m.value for m in ModalityKind)


@dataclass
class RunManifest:
    """Everything needed to reproduce a run, minus the code itself."""

    seed: int = 0
    modalities: list = field(default_factory=lambda: ["table", "timeseries", "text",
                                                      "graph", "image"])
    steps: int = 100
    epochs: int = 10
    batch_size: int = 32
    strategy: str = "parallel"
    out_dir: str = "runs"
    model: dict = field(default_factory=dict)        # ModelConfig overrides
    optimizer: dict = field(default_factory=dict)
    corruption: dict = field(default_factory=dict)   # modality -> overrides
    data: dict = field(default_factory=dict)         # synthetic generator options

    def __post_init__(self):
        if self.strategy not in ("parallel", "ct"):
            raise ConfigError(f"strategy must be parallel or ct, got {self.strategy!r}")
        bad = [m for m in self.modalities if m not in _ALL_MODALITIES]
        if bad:
            raise ConfigError(f"unknown modalities: {bad}")
        if self.steps < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive, epochs >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str) -> None:
        _atomic_write(path, (json.dumps(self.to_dict(), sort_keys=True, indent=2)
                             + "\n").encode())

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"manifest is not valid JSON: {exc}",
                                 line=exc.lineno)
        return cls.from_dict(data)
