import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from mvedit.matching import (MatchFileError, MatchFilterConfig, MatchSet, UnsupportedSceneError,
                             all_pair_matches, filter_matches, load_matches, match_count_index,
                             oracle_matches, save_matches)
from mvedit.scene import Scene, View, generate_scene, make_texture, warp_point


@pytest.fixture(scope="module")
def scene128():
    return generate_scene(make_texture(128, seed=1), 6, 0.1, seed=1)


def test_oracle_identity_homographies():
    scene = generate_scene(make_texture(32), 2, 0.0, seed=0)
    ms = oracle_matches(scene, 0, 1, grid_step=1)
    assert len(ms) == 32 * 32
    assert np.array_equal(ms.xa, ms.xb)
    assert np.all(ms.certainty == 1.0)


def test_oracle_reprojection(scene128):
    for a, b in [(0, 3), (2, 5)]:
        ms = oracle_matches(scene128, a, b, grid_step=2)
        H = scene128.view(b).homography @ np.linalg.inv(scene128.view(a).homography)
        expected = np.array([oracles.warp(H, *p) for p in ms.xa])
        assert np.max(np.abs(expected - ms.xb)) < 1e-6
        assert np.all((ms.xb >= 0) & (ms.xb <= 127))


def test_oracle_coarse_grid(scene128):
    ms = oracle_matches(scene128, 0, 1, grid_step=128)
    assert len(ms) <= 4
    H = scene128.view(1).homography @ np.linalg.inv(scene128.view(0).homography)
    assert np.allclose(warp_point(H, ms.xa), ms.xb)


def test_oracle_requires_synthetic_scene():
    img = np.zeros((8, 8, 3))
    scene = Scene([View(0, img, np.eye(3)), View(1, img, np.eye(3))])
    with pytest.raises(UnsupportedSceneError, match="load_matches"):
        oracle_matches(scene, 0, 1)


def test_filter_strict_threshold():
    ms = MatchSet(0, 1, np.zeros((5, 2)), np.zeros((5, 2)), np.full(5, 0.04))
    assert len(filter_matches(ms, MatchFilterConfig())) == 0
    ms = MatchSet(0, 1, np.zeros((3, 2)), np.zeros((3, 2)), [0.05, 0.0500001, 0.9])
    assert filter_matches(ms, MatchFilterConfig()).certainty.tolist() == [0.0500001, 0.9]


def test_filter_paper_cap():
    rng = np.random.default_rng(0)
    n = 60_000
    cert = rng.uniform(0.06, 1.0, n)
    ms = MatchSet(0, 1, rng.uniform(0, 10, (n, 2)), rng.uniform(0, 10, (n, 2)), cert)
    out = filter_matches(ms, MatchFilterConfig())
    assert len(out) == 50_000
    dropped = np.setdiff1d(cert, out.certainty)
    assert out.certainty.min() >= dropped.max()


@given(st.integers(0, 2**31), st.integers(0, 60), st.floats(0.0, 0.99), st.integers(1, 70))
def test_filter_matches_brute_force(seed, n, threshold, cap):
    rng = np.random.default_rng(seed)
    cert = np.round(rng.uniform(0, 1, n), 1)  # coarse values force ties
    ms = MatchSet(0, 1, rng.uniform(0, 10, (n, 2)), rng.uniform(0, 10, (n, 2)), cert)
    cfg = MatchFilterConfig(threshold, cap)
    out = filter_matches(ms, cfg)
    idx = oracles.filter_indices(cert.tolist(), threshold, cap)
    assert np.array_equal(out.xa, ms.xa[idx])
    assert np.array_equal(out.certainty, cert[idx])
    again = filter_matches(out, cfg)
    assert np.array_equal(again.xa, out.xa) and np.array_equal(again.certainty, out.certainty)
    assert len(out) <= cap


def test_filter_config_validation():
    with pytest.raises(ValueError):
        MatchFilterConfig(1.0, 10)
    with pytest.raises(ValueError):
        MatchFilterConfig(0.1, 0)


def test_match_count_index(scene128):
    idx = match_count_index([])
    assert len(idx) == 0 and idx.count(0, 1) == 0
    one = MatchSet(2, 5, np.zeros((17, 2)), np.zeros((17, 2)), np.ones(17))
    idx = match_count_index([one])
    assert idx.count(2, 5) == idx.count(5, 2) == 17
    pairs = all_pair_matches(scene128, grid_step=4)
    idx = match_count_index(pairs)
    assert len(idx.pairs()) == 15
    for (a, b), ms in pairs.items():
        assert idx.count(a, b) == idx.count(b, a) == len(ms)


def test_matchset_orientation():
    ms = MatchSet(0, 1, [[1, 2]], [[3, 4]], [0.5])
    r = ms.oriented(1)
    assert (r.view_a, r.view_b) == (1, 0)
    assert r.xa.tolist() == [[3, 4]] and r.xb.tolist() == [[1, 2]]
    assert ms.oriented(0) is ms
    with pytest.raises(ValueError):
        ms.oriented(7)
    with pytest.raises(ValueError):
        MatchSet(1, 1, [], [], [])


def test_load_matches_parsing(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("")
    assert len(load_matches(p)) == 0
    p.write_text("1.5 2.0 3.0 4.5 0.9\n")
    (m,) = list(load_matches(p))
    assert m.x == (1.5, 2.0) and m.y == (3.0, 4.5) and m.certainty == 0.9
    p.write_text("# matches view_a=0 view_b=1 width=10 height=10\n1 1 1 1 1\n1 2 3\n")
    with pytest.raises(MatchFileError, match=":3:"):
        load_matches(p)
    p.write_text("1 1 1 x 1\n")
    with pytest.raises(MatchFileError, match=":1:"):
        load_matches(p)
    with pytest.raises(MatchFileError, match="not found"):
        load_matches(tmp_path / "none.txt")


def test_load_matches_clamps_out_of_bounds(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("# matches view_a=3 view_b=4 width=10 height=8\n-1 2 3 4 0.9\n1 2 3 4 0.8\n1 2 3 12 0.7\n")
    ms = load_matches(p)
    assert (ms.view_a, ms.view_b, ms.size) == (3, 4, (8, 10))
    assert ms.certainty.tolist() == [0.0, 0.8, 0.0]
    assert ms.xa[0].tolist() == [0.0, 2.0]
    assert ms.xb[2].tolist() == [3.0, 7.0]


def test_save_load_round_trip(tmp_path, scene128):
    ms = oracle_matches(scene128, 1, 4, grid_step=8)
    save_matches(ms, tmp_path / "m.txt")
    back = load_matches(tmp_path / "m.txt")
    assert (back.view_a, back.view_b, back.size) == (1, 4, (128, 128))
    assert np.allclose(back.xa, ms.xa, rtol=1e-7) and np.allclose(back.xb, ms.xb, rtol=1e-7, atol=1e-6)
    assert np.array_equal(back.certainty, ms.certainty)
