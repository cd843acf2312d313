import numpy as np
import pytest

from heartbeit.errors import FormatError, TokenizerError
from heartbeit.raster import RasterImage, to_patches
from heartbeit.tokenizer import (
    Codebook,
    encode,
    encode_vectors,
    kmeans,
    load_codebook,
    nearest,
    sample_patches,
    save_codebook,
    train_codebook,
)


def brute_force_tokens(x, c):
    out = []
    for row in x.astype(np.float64):
        d = [float(((row - cent.astype(np.float64)) ** 2).sum()) for cent in c]
        out.append(min(range(len(d)), key=lambda j: (d[j], j)))
    return np.array(out)


class TestKMeans:
    def test_k_equals_n(self, rng):
        pts = rng.normal(size=(8, 5))
        res = kmeans(pts, 8, seed=0)
        assert sorted(map(tuple, res.centroids.round(12))) == sorted(map(tuple, pts.round(12)))
        assert res.inertia_history[-1] == pytest.approx(0.0, abs=1e-20)

    def test_two_blobs(self, rng):
        sigma, n = 0.5, 400
        a = rng.normal(-10.0, sigma, size=(n, 3))
        b = rng.normal(10.0, sigma, size=(n, 3))
        c = kmeans(np.vstack([a, b]), 2, seed=1).centroids
        c = c[np.argsort(c[:, 0])]
        tol = 3 * sigma / np.sqrt(n)
        assert np.abs(c[0] - a.mean(axis=0)).max() < tol
        assert np.abs(c[1] - b.mean(axis=0)).max() < tol

    def test_deterministic(self, rng):
        pts = rng.normal(size=(300, 4))
        a, b = kmeans(pts, 6, seed=3), kmeans(pts, 6, seed=3)
        assert np.array_equal(a.centroids, b.centroids)

    def test_inertia_non_increasing(self, rng):
        pts = np.vstack([rng.normal(m, 1.0, size=(100, 4)) for m in (-3, 0, 3, 6)])
        hist = kmeans(pts, 7, seed=5, max_iters=50).inertia_history
        assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))

    def test_too_few_points(self, rng):
        with pytest.raises(TokenizerError):
            train_codebook(rng.normal(size=(3, 4)), 4, seed=0)

    def test_not_enough_distinct(self):
        with pytest.raises(TokenizerError):
            kmeans(np.zeros((10, 2)), 3, seed=0)


class TestEncode:
    def test_exact_centroid(self, rng):
        cb = Codebook(rng.normal(size=(10, 4)))
        assert encode_vectors(cb.centroids[7][None], cb).tolist() == [7]

    def test_tie_lowest_index(self):
        c = np.zeros((6, 2), dtype=np.float32)
        c[:] = 50.0
        c[2] = [1.0, 0.0]
        c[5] = [-1.0, 0.0]
        assert encode_vectors(np.zeros((1, 2)), Codebook(c)).tolist() == [2]

    def test_matches_brute_force(self, rng):
        cb = Codebook(rng.normal(size=(32, 16)))
        x = rng.normal(size=(500, 16)).astype(np.float32)
        assert np.array_equal(encode_vectors(x, cb), brute_force_tokens(x, cb.centroids))

    def test_brute_force_with_many_ties(self, rng):
        # integer lattice makes exact distance ties common
        cb = Codebook(rng.integers(0, 3, size=(12, 3)).astype(np.float32))
        x = rng.integers(0, 3, size=(300, 3)).astype(np.float32) + 0.5
        assert np.array_equal(encode_vectors(x, cb), brute_force_tokens(x, cb.centroids))

    def test_permutation_equivariant(self, rng):
        cb = Codebook(rng.normal(size=(16, 8)))
        x = rng.normal(size=(64, 8))
        perm = rng.permutation(64)
        assert np.array_equal(encode_vectors(x[perm], cb), encode_vectors(x, cb)[perm])

    def test_duplicate_centroid_appended(self, rng):
        c = rng.normal(size=(16, 8))
        x = rng.normal(size=(200, 8))
        base = encode_vectors(x, Codebook(c))
        dup = encode_vectors(x, Codebook(np.vstack([c, c[3:4]])))
        assert np.array_equal(base, dup)

    def test_grid_encoding(self, rng):
        img = RasterImage(rng.random((32, 32)).astype(np.float32))
        grid = to_patches(img, 8)
        cb = train_codebook(grid.vectors(), 4, seed=0)
        tokens = encode(grid, cb)
        assert tokens.grid().shape == (4, 4)
        assert tokens.tokens.min() >= 0 and tokens.tokens.max() < 4

    def test_dimension_mismatch(self, rng):
        with pytest.raises(TokenizerError):
            encode_vectors(rng.normal(size=(3, 5)), Codebook(rng.normal(size=(4, 6))))

    def test_nearest_distances(self, rng):
        x, c = rng.normal(size=(50, 3)), rng.normal(size=(5, 3))
        labels, d = nearest(x, c)
        np.testing.assert_allclose(d, ((x - c[labels]) ** 2).sum(axis=1), rtol=1e-9)


class TestCodebookFile:
    def test_round_trip(self, tmp_path, rng):
        cb = Codebook(rng.normal(size=(8, 16)), seed=42, trained_on="train-pool:10")
        save_codebook(cb, tmp_path / "a.hbcb", "cafe")
        back, h = load_codebook(tmp_path / "a.hbcb")
        assert h == "cafe" and back.seed == 42 and back.trained_on == "train-pool:10"
        assert np.array_equal(back.centroids, cb.centroids)
        save_codebook(back, tmp_path / "b.hbcb", h)
        assert (tmp_path / "a.hbcb").read_bytes() == (tmp_path / "b.hbcb").read_bytes()

    def test_magic(self, tmp_path, rng):
        save_codebook(Codebook(rng.normal(size=(2, 2))), tmp_path / "a.hbcb")
        assert (tmp_path / "a.hbcb").read_bytes()[:5] == b"HBCB\x01"
        (tmp_path / "b.hbcb").write_bytes(b"HBCK\x01\x00")
        with pytest.raises(FormatError):
            load_codebook(tmp_path / "b.hbcb")

    def test_invalid_centroids(self):
        with pytest.raises(TokenizerError):
            Codebook(np.array([[np.nan, 0.0], [1.0, 1.0]]))
        with pytest.raises(TokenizerError):
            Codebook(np.zeros((1, 3)))


class TestSamplePatches:
    def test_seeded_subset(self, rng):
        imgs = rng.random((4, 16, 16)).astype(np.float32)
        a = sample_patches(imgs, 4, 20, seed=1)
        assert a.shape == (20, 16)
        assert np.array_equal(a, sample_patches(imgs, 4, 20, seed=1))
        assert sample_patches(imgs, 4, 1000, seed=1).shape == (64, 16)
