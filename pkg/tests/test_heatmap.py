import numpy as np

from localfsl import heatmap
from localfsl.backbone import extract_features, init_params
from localfsl.data import read_pgm


def test_heatmap_files(tmp_path):
    params = init_params(seed=1, dtype=np.float64)
    image = np.random.default_rng(0).uniform(size=(1, 32, 32))
    pgm, table = heatmap.export_heatmap(params, image, tmp_path / "sub" / "h")
    grid = read_pgm(pgm)
    assert grid.shape == (2, 2) and grid.min() == 0 and grid.max() == 255
    fmap = extract_features(params, image[None])[0]
    values = np.array([[float(v) for v in line.split(",")] for line in table.read_text().splitlines()])
    want = np.array([[np.sqrt(sum(fmap[k, i, j] ** 2 for k in range(fmap.shape[0]))) for j in range(2)] for i in range(2)])
    np.testing.assert_allclose(values, want, rtol=0, atol=1e-6)


def test_constant_map_gives_zero_heatmap(tmp_path):
    pgm, _ = heatmap.write_heatmap(heatmap.location_norms(np.ones((3, 2, 2))), tmp_path / "c")
    assert np.all(read_pgm(pgm) == 0)


def test_heatmap_files_are_reproducible(tmp_path):
    params = init_params(seed=4, dtype=np.float64)
    image = np.random.default_rng(1).uniform(size=(1, 32, 32))
    a = heatmap.export_heatmap(params, image, tmp_path / "a")
    b = heatmap.export_heatmap(params, image, tmp_path / "b")
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
