"""Converting raw samples of seven modalities into triplet sets.

Every sample becomes an ordered list of (num1, num2, local_indices,
global_index) triplets. The two num parts carry raw values copied verbatim
from the sample; local indices name the positions those values came from;
the global index is the triplet's 0-based rank within the sample. No
normalization or learning happens here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import CapacityError, ContractError, DimensionError

TIMESERIES_LEN = 256
TEXT_LEN = 512
IMAGE_SHAPE = (224, 224, 3)
AUDIO_SHAPE = (512, 128, 3)
PATCH_SHAPE = (16, 8, 3)
GRAPH_NEIGHBORS = 32
MAX_PART_LEN = 384


class ModalityKind(Enum):
    TABLE = "table"
    TIMESERIES = "timeseries"
    IMAGE = "image"
    AUDIO = "audio"
    GRAPH = "graph"
    TEXT = "text"
    POINTCLOUD = "pointcloud"


@dataclass
class RawTriplet:
    """One unit of the unified representation.

    num1/num2 are float64 vectors of equal length; local_indices are the
    0-based source positions tying the parts back to the sample.
    """

    num1: np.ndarray
    num2: np.ndarray
    local_indices: np.ndarray
    global_index: int

    def __post_init__(self):
        self.num1 = np.asarray(self.num1, dtype=np.float64).reshape(-1)
        self.num2 = np.asarray(self.num2, dtype=np.float64).reshape(-1)
        self.local_indices = np.asarray(self.local_indices, dtype=np.int64).reshape(-1)
        if self.num1.shape != self.num2.shape:
            raise ContractError(
                f"num parts differ in length: {self.num1.shape} vs {self.num2.shape}")
        if self.local_indices.size == 0:
            raise ContractError("local_indices must be non-empty")
        if (self.local_indices < 0).any():
            raise ContractError("local_indices must be non-negative")
        if self.global_index < 0:
            raise ContractError("global_index must be non-negative")


@dataclass
class TripletSet:
    modality: ModalityKind
    triplets: list
    sample_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.triplets:
            raise ContractError("a TripletSet cannot be empty")
        got = sorted(t.global_index for t in self.triplets)
        if got != list(range(len(self.triplets))):
            raise ContractError("global_index values must be 0..count-1 exactly once")

    def __len__(self):
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)


def expected_count(modality: ModalityKind, *, d: int | None = None, g: int | None = None) -> int:
    """Triplet count each encoder must produce for a valid sample."""
    if modality is ModalityKind.TABLE:
        if d is None:
            raise ContractError("table count needs d")
        return d
    if modality is ModalityKind.TIMESERIES:
        return 8
    if modality is ModalityKind.TEXT:
        return 256
    if modality is ModalityKind.IMAGE:
        return 196
    if modality is ModalityKind.GRAPH:
        return 32
    if modality is ModalityKind.AUDIO:
        return 256
    if modality is ModalityKind.POINTCLOUD:
        if g is None:
            raise ContractError("point cloud count needs g")
        return g // 2
    raise ContractError(f"unknown modality {modality}")


def encode_table(x, rng_seed: int) -> TripletSet:
    """d triplets of seeded random sub-vectors, one per feature.

    Each num part draws floor(d/2) feature values uniformly without
    replacement, independently for the two parts. local_indices hold the
    full feature index range for every triplet.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    if d == 0:
        raise DimensionError("table sample is empty")
    if d >= MAX_PART_LEN:
        raise CapacityError(f"table width {d} exceeds the {MAX_PART_LEN}-slot numeric budget")
    rng = np.random.default_rng(rng_seed)
    part_len = d // 2
    idx_all = np.arange(d)
    triplets = []
    for j in range(d):
        i1 = rng.choice(d, size=part_len, replace=False)
        i2 = rng.choice(d, size=part_len, replace=False)
        triplets.append(RawTriplet(x[i1], x[i2], idx_all, j))
    return TripletSet(ModalityKind.TABLE, triplets, {"shape": (d,), "seed": int(rng_seed)})


def encode_timeseries(x) -> TripletSet:
    """8 triplets over a 256-step window: segment pairs at offsets 32j."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != TIMESERIES_LEN:
        raise DimensionError(f"time series window must have {TIMESERIES_LEN} steps, got {x.size}")
    triplets = []
    for j in range(8):
        off = 32 * j
        triplets.append(RawTriplet(
            x[off:off + 16], x[off + 16:off + 32], np.arange(off, off + 32), j))
    return TripletSet(ModalityKind.TIMESERIES, triplets, {"shape": (TIMESERIES_LEN,)})


def _patch_grid(arr: np.ndarray):
    """Cut an HxWx3 array into 16x8x3 patches, row-major, flattened."""
    h, w, _ = arr.shape
    ph, pw, _ = PATCH_SHAPE
    rows, cols = h // ph, w // pw
    patches = (arr.reshape(rows, ph, cols, pw, 3)
                  .transpose(0, 2, 1, 3, 4)
                  .reshape(rows * cols, ph * pw * 3))
    return patches, rows, cols


def _encode_patch_pairs(arr: np.ndarray, want_shape, modality: ModalityKind) -> TripletSet:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != want_shape:
        raise DimensionError(f"{modality.value} sample must have shape {want_shape}, got {arr.shape}")
    patches, rows, cols = _patch_grid(arr)
    triplets = []
    j = 0
    for r in range(rows):
        for c in range(0, cols, 2):
            left = r * cols + c
            triplets.append(RawTriplet(
                patches[left], patches[left + 1], np.array([left, left + 1]), j))
            j += 1
    return TripletSet(modality, triplets, {"shape": want_shape, "patch_grid": (rows, cols)})


def encode_image(img) -> TripletSet:
    """196 triplets pairing horizontally adjacent 16x8x3 patches."""
    return _encode_patch_pairs(img, IMAGE_SHAPE, ModalityKind.IMAGE)


def encode_audio(spec) -> TripletSet:
    """256 triplets over a 512x128x3 spectrogram, same pairing as images."""
    return _encode_patch_pairs(spec, AUDIO_SHAPE, ModalityKind.AUDIO)


def encode_graph(anchor_features, neighbor_features) -> TripletSet:
    """32 triplets: anchor features against each sampled neighbor's."""
    anchor = np.asarray(anchor_features, dtype=np.float64).reshape(-1)
    neigh = np.asarray(neighbor_features, dtype=np.float64)
    d = anchor.size
    if d == 0:
        raise DimensionError("anchor feature vector is empty")
    if d >= MAX_PART_LEN:
        raise ContractError(f"graph feature width {d} exceeds the {MAX_PART_LEN}-slot budget")
    if neigh.ndim != 2 or neigh.shape != (GRAPH_NEIGHBORS, d):
        raise ContractError(
            f"need exactly {GRAPH_NEIGHBORS} neighbor vectors of length {d}, got {neigh.shape}")
    idx_all = np.arange(d)
    triplets = [RawTriplet(anchor, neigh[j], idx_all, j) for j in range(GRAPH_NEIGHBORS)]
    return TripletSet(ModalityKind.GRAPH, triplets, {"shape": (d,)})


def encode_text(token_ids, vocab_size: int = 4096) -> TripletSet:
    """256 triplets pairing consecutive token ids from a 512-id sequence."""
    ids = np.asarray(token_ids)
    if ids.shape != (TEXT_LEN,):
        raise ContractError(f"text sample must be {TEXT_LEN} token ids, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("token ids must be integers")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ContractError(f"token id outside vocabulary of size {vocab_size}")
    triplets = []
    for j in range(256):
        a, b = 2 * j, 2 * j + 1
        triplets.append(RawTriplet(
            np.array([float(ids[a])]), np.array([float(ids[b])]), np.array([a, b]), j))
    return TripletSet(ModalityKind.TEXT, triplets,
                      {"shape": (TEXT_LEN,), "vocab_size": int(vocab_size)})


def encode_pointcloud(groups) -> TripletSet:
    """g/2 triplets pairing consecutive point groups (each k points of xyz)."""
    arr = np.asarray(groups, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ContractError(f"point groups must have shape (g, k, 3), got {arr.shape}")
    g, k, _ = arr.shape
    if g < 2 or g % 2 != 0:
        raise ContractError(f"group count must be even and >= 2, got {g}")
    triplets = []
    for j in range(g // 2):
        a, b = 2 * j, 2 * j + 1
        triplets.append(RawTriplet(
            arr[a].reshape(-1), arr[b].reshape(-1), np.array([a, b]), j))
    return TripletSet(ModalityKind.POINTCLOUD, triplets,
                      {"shape": (g, k, 3), "k": k, "g": g})
