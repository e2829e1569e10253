import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from mvedit.consistency import ConsistencyConfig
from mvedit.diffusion import GuidanceConfig, MixtureEditModel, NumericalError, initial_noise, make_schedule, sample
from mvedit.matching import MatchIndex, all_pair_matches
from mvedit.scene import generate_scene, make_texture
from mvedit.scheduler import EditError, EditSession, edit_scene, order_views, select_neighbors, write_session

SCHED = make_schedule()


@pytest.fixture(scope="module")
def small_scene():
    scene = generate_scene(make_texture(32, seed=2), 4, 0.1, seed=2)
    return scene, all_pair_matches(scene, grid_step=1)


def session_for(scene, matchsets, **kw):
    model = MixtureEditModel(SCHED)
    kw.setdefault("consistency", ConsistencyConfig(patch_size=8))
    return EditSession(scene, matchsets, model, SCHED, **kw)


def test_order_views_examples(small_scene):
    scene, _ = small_scene
    idx = MatchIndex({(0, 1): 10, (0, 2): 1, (1, 2): 1})
    three = generate_scene(make_texture(16), 3, 0.1, seed=0)
    assert order_views(three, idx, "greedy") == [0, 1, 2]
    two = generate_scene(make_texture(16), 2, 0.1, seed=0)
    assert order_views(two, MatchIndex({(0, 1): 5}), "greedy") == order_views(two, MatchIndex(), "dataset")
    with pytest.raises(ValueError):
        order_views(scene, idx, "random")


@given(st.integers(0, 2**31))
def test_greedy_order_matches_priority_queue(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    counts = {(a, b): int(rng.integers(0, 4)) for a in range(n) for b in range(a + 1, n)}
    idx = MatchIndex(counts)
    scene = generate_scene(make_texture(8), n, 0.0, seed=0)
    got = order_views(scene, idx, "greedy")
    assert got == oracles.greedy_order(list(range(n)), idx.count)
    assert sorted(got) == list(range(n))


def test_select_neighbors_examples():
    idx = MatchIndex({(9, 1): 100, (9, 2): 50, (9, 3): 80})
    assert select_neighbors(9, set(), idx, 2) == []
    assert select_neighbors(9, {2}, idx, 2) == [2]
    assert select_neighbors(9, {1, 2, 3}, idx, 2) == [1, 3]
    assert select_neighbors(9, {1, 2, 3}, idx, 0) == []


@given(st.integers(0, 2**31), st.integers(0, 5))
def test_select_neighbors_properties(seed, k):
    rng = np.random.default_rng(seed)
    counts = {(0, v): int(rng.integers(0, 5)) for v in range(1, 8)}
    idx = MatchIndex(counts)
    edited = set(rng.choice(np.arange(1, 8), size=int(rng.integers(0, 7)), replace=False).tolist())
    got = select_neighbors(0, edited, idx, k)
    assert len(got) == min(k, len(edited)) and set(got) <= edited
    c = [idx.count(0, v) for v in got]
    assert c == sorted(c, reverse=True)


def test_guidance_off_equals_independent_edits(small_scene):
    scene, ms = small_scene
    g = GuidanceConfig(lambda_guidance=0.0, n_b=0, num_steps=20)
    session = session_for(scene, ms, guidance=g, seed=40)
    edited = edit_scene(session)
    model = MixtureEditModel(SCHED)
    for v in scene.views:
        ref = sample(model, v.image, SCHED, g, seed=40 + v.view_id)
        assert np.array_equal(edited[v.view_id], ref)
    assert session.order == scene.view_ids
    assert session.records[0]["neighbors"] == [] and session.records[1]["neighbors"] == [0]
    assert len(session.records[3]["neighbors"]) == 2


def test_edit_scene_rerun_bit_identical_and_first_view_unguided(small_scene):
    scene, ms = small_scene
    g = GuidanceConfig(num_steps=10)
    a = edit_scene(session_for(scene, ms, guidance=g, seed=3))
    b = edit_scene(session_for(scene, ms, guidance=g, seed=3))
    assert all(np.array_equal(a[v], b[v]) for v in a)
    ref = sample(MixtureEditModel(SCHED), scene.view(0).image, SCHED, g, seed=3)
    assert np.array_equal(a[0], ref)


def test_onestep_engine(small_scene):
    scene, ms = small_scene
    g = GuidanceConfig(onestep_steps=0)
    edited = edit_scene(session_for(scene, ms, guidance=g, engine="onestep", seed=5))
    model = MixtureEditModel(SCHED)
    for v in scene.views:
        f = model.generator(v.image)
        ref = np.clip(f(initial_noise(v.image.shape, 5 + v.view_id)).numpy(), 0, 1)
        assert np.array_equal(edited[v.view_id], ref)


def test_errors_are_annotated_with_view(small_scene, monkeypatch):
    scene, ms = small_scene
    import mvedit.scheduler as S

    def boom(*args, **kwargs):
        raise NumericalError("grad blew up")

    monkeypatch.setattr(S, "sample", boom)
    with pytest.raises(NumericalError, match="view 0: grad blew up"):
        edit_scene(session_for(scene, ms))

    def bad(*args, **kwargs):
        raise RuntimeError("oops")

    monkeypatch.setattr(S, "sample", bad)
    with pytest.raises(EditError, match="view 0: oops") as info:
        edit_scene(session_for(scene, ms))
    assert info.value.view_id == 0


def test_session_validation(small_scene):
    scene, ms = small_scene
    with pytest.raises(ValueError):
        session_for(scene, ms, engine="turbo")
    with pytest.raises(ValueError):
        session_for(scene, ms, ordering="random")
    s = session_for(scene, ms)
    assert s.matchset(1, 0).view_a == 1 and s.matchset(0, 1).view_a == 0


def test_write_session(tmp_path, small_scene):
    scene, ms = small_scene
    session = session_for(scene, ms, guidance=GuidanceConfig(num_steps=5))
    edit_scene(session)
    write_session(session, tmp_path)
    assert sorted(p.name for p in (tmp_path / "edited").iterdir()) == [f"{v}.png" for v in scene.view_ids]
    doc = json.loads((tmp_path / "session.json").read_text())
    assert doc["order"] == scene.view_ids
    assert [r["view_id"] for r in doc["views"]] == scene.view_ids
    assert {"guidance", "consistency", "engine", "seed"} <= set(doc["config"])
    assert all("final_loss" in r and "neighbors" in r for r in doc["views"])
