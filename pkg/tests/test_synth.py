import numpy as np
import pytest

from pangaea.errors import ConfigError
from pangaea.synth import gen_synthetic
from pangaea.triplets import ModalityKind


def test_table_linear_and_logistic():
    lin = gen_synthetic("table", {"n": 40, "d": 6}, seed=1)
    assert lin["samples"].shape == (40, 6)
    assert lin["labels"].shape == (40,)
    assert lin["labels"].dtype == np.float64

    logi = gen_synthetic("table", {"n": 40, "d": 6, "kind": "logistic"}, seed=1)
    assert set(np.unique(logi["labels"])) <= {0, 1}
    with pytest.raises(ConfigError):
        gen_synthetic("table", {"kind": "quadratic"})


def test_timeseries_spectrum_peaks_at_configured_frequency():
    data = gen_synthetic("timeseries", {"n": 8, "freqs": [5, 19], "noise": 0.0}, seed=2)
    assert data["samples"].shape == (8, 256)
    for x, label in zip(data["samples"], data["labels"]):
        spectrum = np.abs(np.fft.rfft(x))
        assert int(np.argmax(spectrum[1:])) + 1 == data["freqs"][label]
    with pytest.raises(ConfigError):
        gen_synthetic("timeseries", {"freqs": [0]})
    with pytest.raises(ConfigError):
        gen_synthetic("timeseries", {"freqs": [128]})


def test_image_and_audio_gradients():
    img = gen_synthetic("image", {"n": 3}, seed=3)
    assert img["samples"].shape == (3, 224, 224, 3)
    assert img["samples"].min() >= 0.0 and img["samples"].max() <= 1.0
    assert list(img["labels"]) == [0, 1, 2]
    # class 0 ramps along width, class 1 along height
    horiz = img["samples"][0].mean(axis=(0, 2))
    vert = img["samples"][1].mean(axis=(1, 2))
    assert horiz[-10] > horiz[10]
    assert vert[-10] > vert[10]

    aud = gen_synthetic("audio", {"n": 2}, seed=3)
    assert aud["samples"].shape == (2, 512, 128, 3)


def test_graph_block_structure():
    data = gen_synthetic("graph", {"nodes": 60, "blocks": 2, "d": 4}, seed=4)
    adjacency, labels = data["adjacency"], data["labels"]
    assert data["features"].shape == (60, 4)
    assert sorted(adjacency) == list(range(60))
    intra = inter = intra_n = inter_n = 0
    for i in range(60):
        for j in range(i + 1, 60):
            linked = j in adjacency[i]
            if labels[i] == labels[j]:
                intra += linked
                intra_n += 1
            else:
                inter += linked
                inter_n += 1
    assert intra / intra_n > 5 * (inter / max(inter_n, 1))
    for i, neigh in adjacency.items():
        for j in neigh:
            assert i in adjacency[j]

    same = data["features"][labels == 0].mean(axis=0)
    other = data["features"][labels == 1].mean(axis=0)
    assert np.linalg.norm(same - other) > 0.5


def test_text_ids_stay_below_reserved_top_id():
    data = gen_synthetic("text", {"n": 6, "length": 128, "vocab": 256}, seed=5)
    assert data["samples"].shape == (6, 128)
    assert data["samples"].dtype == np.int64
    assert data["samples"].max() <= 254  # top id reserved
    assert data["samples"].min() >= 0
    assert list(data["labels"]) == [0, 1, 0, 1, 0, 1]
    with pytest.raises(ConfigError):
        gen_synthetic("text", {"vocab": 32, "alphabet": 32})


def test_pointcloud_primitives():
    data = gen_synthetic("pointcloud", {"n": 4, "points": 200, "noise": 0.0}, seed=6)
    assert data["samples"].shape == (4, 200, 3)
    sphere = data["samples"][data["labels"] == 0][0]
    assert np.allclose(np.linalg.norm(sphere, axis=1), 1.0, atol=1e-9)
    cube = data["samples"][data["labels"] == 1][0]
    assert np.allclose(np.abs(cube).max(axis=1), 1.0, atol=1e-9)


def test_generators_are_seed_deterministic():
    for modality in ModalityKind:
        opt = {"n": 3} if modality is not ModalityKind.GRAPH else {"nodes": 20}
        a = gen_synthetic(modality, opt, seed=9)
        b = gen_synthetic(modality, opt, seed=9)
        c = gen_synthetic(modality, opt, seed=10)
        key = "samples" if modality is not ModalityKind.GRAPH else "features"
        assert np.array_equal(a[key], b[key])
        assert not np.array_equal(a[key], c[key])
