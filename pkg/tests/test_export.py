import json

import numpy as np
import pytest

from univmatch.export import export_geometry, export_matchings, load_matchings, read_ply, write_ply
from univmatch.matching import verify_cycle_consistency


def test_ply_declares_and_lists_points(tmp_path, rng):
    pts = rng.normal(size=(10, 3))
    write_ply(tmp_path / "u.ply", pts)
    text = (tmp_path / "u.ply").read_text().splitlines()
    assert "element vertex 10" in text
    body = text[text.index("end_header") + 1 :]
    assert len(body) == 10
    back = read_ply(tmp_path / "u.ply")
    assert np.allclose(back, pts, rtol=1e-9, atol=0)


def test_ply_rejects_bad_shape(tmp_path):
    with pytest.raises(ValueError):
        write_ply(tmp_path / "x.ply", np.zeros((3, 2)))


def test_geometry_export(tmp_path, rng):
    U = rng.uniform(-0.5, 0.5, size=(3, 8))
    S = 0.01 * rng.normal(size=(3, 8))
    summary = export_geometry({"car": U}, {"a/1": ("car", S), "b": ("car", np.zeros((3, 8)))}, tmp_path)
    static = read_ply(tmp_path / "universe_car.ply")
    assert static.shape == (8, 3)
    assert np.allclose(static, U.T, rtol=1e-9, atol=0)
    deformed = read_ply(tmp_path / summary["instances"]["a/1"]["file"])
    assert np.allclose(deformed, (U + S).T, rtol=1e-9, atol=0)
    zero = read_ply(tmp_path / summary["instances"]["b"]["file"])
    assert np.array_equal(zero, static)
    disk = json.loads((tmp_path / "geometry.json").read_text())
    assert np.isclose(disk["instances"]["a/1"]["offset_norm"], np.linalg.norm(S))
    assert disk["instances"]["b"]["offset_norm"] == 0.0


def random_records(rng, n, d=7):
    out = []
    for j in range(n):
        m = int(rng.integers(3, d + 1))
        X = np.zeros((m, d))
        X[np.arange(m), rng.choice(d, size=m, replace=False)] = 1
        out.append((f"i{j}", "cat0", X))
    return out


def test_matchings_round_trip(tmp_path, rng):
    records = random_records(rng, 5)
    export_matchings(records, tmp_path / "m.json")
    back, pairwise = load_matchings(tmp_path / "m.json")
    assert pairwise is None
    assert [r[0] for r in back] == [r[0] for r in records]
    for (_, _, a), (_, _, b) in zip(records, back):
        assert np.array_equal(a, b)


def test_pairwise_export_is_cycle_consistent(tmp_path, rng):
    export_matchings(random_records(rng, 4), tmp_path / "m.json", pairwise=True)
    _, pairwise = load_matchings(tmp_path / "m.json")
    assert len(pairwise) == 16
    assert verify_cycle_consistency(pairwise) == (True, None)


def test_empty_export(tmp_path):
    export_matchings([], tmp_path / "m.json")
    records, _ = load_matchings(tmp_path / "m.json")
    assert records == []


def test_wrong_format_rejected(tmp_path):
    (tmp_path / "m.json").write_text('{"format": "other", "version": 1, "records": []}')
    with pytest.raises(ValueError):
        load_matchings(tmp_path / "m.json")
