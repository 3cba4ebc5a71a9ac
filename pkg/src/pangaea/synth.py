"""Seeded synthetic datasets for every modality.

Each generator is a pure function of (options, seed): the same call
produces bit-identical arrays. Audio is produced directly as a
spectrogram-shaped array; there is no waveform-to-spectrogram transform
here, real audio is expected to arrive already in that form.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .triplets import AUDIO_SHAPE, IMAGE_SHAPE, TIMESERIES_LEN, ModalityKind


def _table(opt: dict, rng) -> dict:
    n = opt.get("n", 64)
    d = opt.get("d", 8)
    kind = opt.get("kind", "linear")
    noise = opt.get("noise", 0.1)
    x = rng.normal(size=(n, d))
    w = rng.normal(size=d)
    score = x @ w + noise * rng.normal(size=n)
    if kind == "linear":
        y = score
    elif kind == "logistic":
        y = (1.0 / (1.0 + np.exp(-score)) > 0.5).astype(np.int64)
    else:
        raise ConfigError(f"table kind must be linear or logistic, got {kind!r}")
    return {"samples": x, "labels": y}


def _timeseries(opt: dict, rng) -> dict:
    n = opt.get("n", 64)
    length = opt.get("length", TIMESERIES_LEN)
    freqs = list(opt.get("freqs", (3, 11)))
    noise = opt.get("noise", 0.05)
    if any(f < 1 or f >= length // 2 for f in freqs):
        raise ConfigError(f"frequencies must lie in [1, {length // 2}), got {freqs}")
    t = np.arange(length)
    labels = np.array([i % len(freqs) for i in range(n)], dtype=np.int64)
    samples = np.zeros((n, length))
    for i in range(n):
        for j, f in enumerate(freqs):
            amp = 2.0 if j == labels[i] else 0.5  # dominant bin marks the class
            phase = rng.uniform(0, 2 * np.pi)
            samples[i] += amp * np.sin(2 * np.pi * f * t / length + phase)
        samples[i] += noise * rng.normal(size=length)
    return {"samples": samples, "labels": labels, "freqs": freqs}


def _gradient_stack(n: int, shape: tuple, rng, noise: float) -> dict:
    h, w, c = shape
    yy = np.linspace(0.0, 1.0, h)[:, None]
    xx = np.linspace(0.0, 1.0, w)[None, :]
    ramps = [np.broadcast_to(xx, (h, w)),
             np.broadcast_to(yy, (h, w)),
             (xx + yy) / 2.0]
    labels = np.array([i % len(ramps) for i in range(n)], dtype=np.int64)
    samples = np.empty((n, h, w, c))
    for i in range(n):
        base = ramps[labels[i]]
        for ch in range(c):
            gain = 0.7 + 0.3 * ch / max(c - 1, 1)
            samples[i, :, :, ch] = gain * base
        samples[i] += noise * rng.normal(size=(h, w, c))
    return {"samples": np.clip(samples, 0.0, 1.0), "labels": labels}


def _graph(opt: dict, rng) -> dict:
    nodes = opt.get("nodes", 96)
    blocks = opt.get("blocks", 3)
    d = opt.get("d", 8)
    p_in = opt.get("p_in", 0.5)
    p_out = opt.get("p_out", 0.02)
    if blocks < 1 or nodes < blocks:
        raise ConfigError("need at least one node per block")
    labels = np.array([i % blocks for i in range(nodes)], dtype=np.int64)
    adjacency = {i: set() for i in range(nodes)}
    for i in range(nodes):
        for j in range(i + 1, nodes):
            p = p_in if labels[i] == labels[j] else p_out
            if rng.random() < p:
                adjacency[i].add(j)
                adjacency[j].add(i)
    centers = rng.normal(size=(blocks, d))
    features = centers[labels] + 0.3 * rng.normal(size=(nodes, d))
    return {"features": features, "adjacency": {k: sorted(v) for k, v in adjacency.items()},
            "labels": labels}


def _text(opt: dict, rng) -> dict:
    n = opt.get("n", 32)
    length = opt.get("length", 512)
    vocab = opt.get("vocab", 4096)
    classes = opt.get("classes", 2)
    alphabet = opt.get("alphabet", 64)
    if alphabet > vocab - 1:
        raise ConfigError("alphabet cannot exceed vocab - 1 (top id is reserved)")
    # ids live in [0, vocab-2]; the top id stays reserved for masking
    symbols = rng.choice(vocab - 1, size=alphabet, replace=False)
    transitions = rng.dirichlet(np.full(alphabet, 0.3), size=(classes, alphabet))
    labels = np.array([i % classes for i in range(n)], dtype=np.int64)
    samples = np.empty((n, length), dtype=np.int64)
    for i in range(n):
        chain = transitions[labels[i]]
        state = int(rng.integers(alphabet))
        for t in range(length):
            samples[i, t] = symbols[state]
            state = int(rng.choice(alphabet, p=chain[state]))
    return {"samples": samples, "labels": labels, "vocab": vocab}


def _pointcloud(opt: dict, rng) -> dict:
    n = opt.get("n", 8)
    size = opt.get("points", 512)
    noise = opt.get("noise", 0.02)
    labels = np.array([i % 2 for i in range(n)], dtype=np.int64)
    samples = np.empty((n, size, 3))
    for i in range(n):
        if labels[i] == 0:  # sphere surface
            v = rng.normal(size=(size, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            samples[i] = v
        else:  # cube surface
            pts = rng.uniform(-1, 1, size=(size, 3))
            axes = rng.integers(3, size=size)
            signs = rng.choice([-1.0, 1.0], size=size)
            pts[np.arange(size), axes] = signs
            samples[i] = pts
        samples[i] += noise * rng.normal(size=(size, 3))
    return {"samples": samples, "labels": labels}


def gen_synthetic(modality, options: dict | None = None, seed: int = 0) -> dict:
    """Deterministic synthetic dataset for one modality."""
    modality = ModalityKind(modality)
    opt = dict(options or {})
    rng = np.random.default_rng(seed)
    if modality is ModalityKind.TABLE:
        return _table(opt, rng)
    if modality is ModalityKind.TIMESERIES:
        return _timeseries(opt, rng)
    if modality is ModalityKind.IMAGE:
        return _gradient_stack(opt.get("n", 4), IMAGE_SHAPE, rng, opt.get("noise", 0.02))
    if modality is ModalityKind.AUDIO:
        return _gradient_stack(opt.get("n", 4), AUDIO_SHAPE, rng, opt.get("noise", 0.02))
    if modality is ModalityKind.GRAPH:
        return _graph(opt, rng)
    if modality is ModalityKind.TEXT:
        return _text(opt, rng)
    if modality is ModalityKind.POINTCLOUD:
        return _pointcloud(opt, rng)
    raise ConfigError(f"no generator for {modality}")
