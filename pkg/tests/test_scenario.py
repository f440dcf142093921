import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ranmtl.scenario import (PRESETS, Building, Cell, CityScenario, ScenarioConfig, apportion,
                             build_datasets, compute_rsrp, fspl_1m_db, generate_city, is_indoor,
                             is_los, label_sample, label_samples, load_datasets, los_matrix,
                             save_datasets, sector_gain_db, split_sizes, with_overrides)
from oracles import los_by_sampling

EMPTY = ScenarioConfig(n_buildings=0)


def open_city(bs_xy=((0.0, 0.0),), buildings=(), cells=None, extent=2000.0, config=EMPTY):
    bs = np.array(bs_xy, dtype=float)
    cells = cells or [Cell(i, 0.0, 900e6) for i in range(len(bs))]
    sec = [Cell(c.bs, c.boresight_deg, 4.5e9) for c in cells]
    return CityScenario(extent, list(buildings), bs, config.bs_height_m, cells, sec, config)


def random_los_case(rng):
    cfg = ScenarioConfig(extent_m=200.0)
    blds = []
    for _ in range(int(rng.integers(1, 4))):
        w, d = rng.uniform(5, 60, 2)
        x0, y0 = rng.uniform(0, 200 - w), rng.uniform(0, 200 - d)
        blds.append(Building(x0, y0, x0 + w, y0 + d, float(rng.uniform(2, 40))))
    boxes = np.array([[b.x0, b.y0, b.x1, b.y1, b.height] for b in blds])
    while True:
        bs = rng.uniform(0, 200, 2)
        if not ((boxes[:, 0] < bs[0]) & (bs[0] < boxes[:, 2]) & (boxes[:, 1] < bs[1]) & (bs[1] < boxes[:, 3])).any():
            break
    ue = rng.uniform(0, 200, 2)
    city = CityScenario(200.0, blds, bs[None], 25.0, [Cell(0, None, 900e6)], [Cell(0, None, 4.5e9)], cfg)
    return city, bs, ue, boxes


# -- city generation ---------------------------------------------------------------


def test_default_city_layout():
    city = generate_city(1)
    assert city.n_bs == 3
    assert len(city.primary_cells) == 9 and len(city.secondary_cells) == 9
    assert {c.freq_hz for c in city.primary_cells} == {900e6}
    assert {c.freq_hz for c in city.secondary_cells} == {4.5e9}
    assert sorted({c.boresight_deg for c in city.primary_cells}) == [0.0, 120.0, 240.0]
    assert len(city.buildings) == 40
    # base stations sit on a triangle around the centre, outside every building
    r = np.hypot(*(city.bs_positions - 1000.0).T)
    np.testing.assert_allclose(r, 500.0)
    for x, y in city.bs_positions:
        assert is_indoor((x, y), city) == 0


def test_city_is_deterministic():
    a, b = generate_city(5), generate_city(5)
    assert a.buildings == b.buildings
    np.testing.assert_array_equal(a.bs_positions, b.bs_positions)
    assert generate_city(6).buildings != a.buildings


def test_infeasible_coverage_rejected():
    with pytest.raises(ValueError):
        generate_city(0, ScenarioConfig(n_buildings=2000, building_size_m=(40.0, 80.0)))


def test_zero_buildings_all_outdoor_and_los():
    city = generate_city(0, EMPTY)
    ue = np.random.default_rng(0).uniform(0, 2000, size=(200, 2))
    block = label_samples(ue, city, None)
    assert block.indoor.sum() == 0
    assert block.los.all()


# -- predicates ---------------------------------------------------------------------


def test_indoor_rules():
    b = Building(10.0, 10.0, 30.0, 50.0, 20.0)
    city = open_city(buildings=[b], bs_xy=((100.0, 100.0),))
    assert is_indoor(b.centroid, city) == 1
    assert is_indoor((10.0, 20.0), city) == 0  # on the edge
    assert is_indoor((5.0, 5.0), open_city()) == 0


def test_los_blocked_by_tall_building_on_segment():
    tower = Building(45.0, -5.0, 55.0, 5.0, 100.0)
    city = open_city(buildings=[tower])
    assert is_los((100.0, 0.0), city.primary_cells[0], city) == 0
    assert is_los((100.0, 0.0), city.primary_cells[0], open_city()) == 1


def test_los_low_building_clears_near_antenna():
    # the segment is still above 20 m right next to the 25 m antenna
    low = Building(1.0, -1.0, 2.0, 1.0, 20.0)
    city = open_city(buildings=[low])
    assert is_los((100.0, 0.0), city.primary_cells[0], city) == 1


def test_los_matches_sampling_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        city, bs, ue, boxes = random_los_case(rng)
        assert bool(los_matrix(ue[None], city)[0, 0]) == los_by_sampling(bs, 25.0, ue, 1.5, boxes)


# -- propagation --------------------------------------------------------------------


def test_free_space_example():
    city = open_city()
    assert fspl_1m_db(900e6) == pytest.approx(31.53, abs=0.005)
    rsrp = compute_rsrp((100.0, 0.0), city.primary_cells[0], city)
    assert rsrp == pytest.approx(43.0 - fspl_1m_db(900e6) - 40.0, abs=1e-12)
    assert rsrp == pytest.approx(-28.53, abs=0.01)


def test_higher_carrier_is_weaker():
    city = open_city()
    ue = (137.0, 40.0)
    assert compute_rsrp(ue, city.secondary_cells[0], city) < compute_rsrp(ue, city.primary_cells[0], city)


def test_doubling_distance_costs_6dB_in_los():
    city = open_city()
    cell = city.primary_cells[0]
    drop = compute_rsrp((50.0, 0.0), cell, city) - compute_rsrp((100.0, 0.0), cell, city)
    assert drop == pytest.approx(20 * np.log10(2), abs=1e-12)
    assert round(drop, 2) == 6.02


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 1400.0), st.floats(1.0, 600.0), st.floats(0.0, 2 * np.pi))
def test_omni_rsrp_strictly_decreasing(d1, extra, angle):
    city = open_city(cells=[Cell(0, None, 900e6)])
    cell = city.primary_cells[0]
    p1 = (d1 * np.cos(angle), d1 * np.sin(angle))
    d2 = d1 + extra
    p2 = (d2 * np.cos(angle), d2 * np.sin(angle))
    assert compute_rsrp(p2, cell, city) < compute_rsrp(p1, cell, city)


def test_sub_metre_distance_clamped():
    city = open_city()
    cell = city.primary_cells[0]
    assert compute_rsrp((0.2, 0.0), cell, city) == compute_rsrp((1.0, 0.0), cell, city)


def test_sector_pattern():
    assert sector_gain_db(0.0) == 0.0
    assert sector_gain_db(180.0) == pytest.approx(-20.0)
    assert sector_gain_db(90.0) == pytest.approx(-14.0)
    assert sector_gain_db(60.0) == pytest.approx(14 * 0.25 - 14)


def test_shadowing_and_losses_enter_additively():
    b = Building(-20.0, 80.0, 20.0, 120.0, 30.0)
    city = open_city(buildings=[b], config=ScenarioConfig())
    cell = city.primary_cells[0]
    inside = (0.0, 100.0)
    ref = ScenarioConfig().eirp_dbm + sector_gain_db(90.0) - fspl_1m_db(900e6) - 30.0 * 2.0
    rsrp = compute_rsrp(inside, cell, city, shadowing_db=2.5)
    assert rsrp == pytest.approx(ref - 15.0 - 10.0 - 2.5, abs=1e-9)


# -- samples and datasets -------------------------------------------------------------


def test_label_sample_dimensions_and_nearest_bs():
    city = generate_city(3)
    bs1 = city.bs_positions[1]
    s = label_sample((bs1[0] + 1.0, bs1[1]), city, seed=1)
    assert (len(s.x), len(s.y_sc), len(s.y_ps), len(s.y_los)) == (9, 9, 3, 9)
    assert np.argmin(s.y_ps) == 1
    assert s.y_ps[1] == pytest.approx(1.0)
    assert s.y_in in (0, 1) and set(np.unique(s.y_los)) <= {0.0, 1.0}


def test_outdoor_sample_without_buildings():
    s = label_sample((700.0, 900.0), generate_city(0, EMPTY))
    assert s.y_in == 0 and s.y_los.tolist() == [1.0] * 9


def test_split_sizes_and_apportionment():
    assert split_sizes(1000) == (600, 200, 200)
    assert sum(split_sizes(173)) == 173
    assert apportion(350, 4) == [87, 88, 87, 88]


def test_dataset_schema(desk_nodes):
    assert len(desk_nodes) == 12
    assert sorted(n.node_id for n in desk_nodes) == [f"c{c}b{b}" for c in range(4) for b in range(3)]
    diag = 2 * np.hypot(2000, 2000)
    for n in desk_nodes:
        sizes = [len(n.splits[s]) for s in ("train", "val", "test")]
        assert tuple(sizes) == split_sizes(sum(sizes))
        for blk in n.splits.values():
            assert blk.x.shape[1:] == (9,) and blk.sc.shape[1:] == (9,)
            assert blk.ps.shape[1:] == (3,) and blk.indoor.ndim == 1 and blk.los.shape[1:] == (9,)
            assert ((blk.ps > 0) & (blk.ps < diag)).all()
            assert set(np.unique(blk.indoor)) <= {0.0, 1.0} and set(np.unique(blk.los)) <= {0.0, 1.0}


def test_total_samples_match_snapshots(desk_nodes):
    total = sum(len(b) for n in desk_nodes for b in n.splits.values())
    assert total == 350 * PRESETS["desk"].ues_per_snapshot


def test_samples_assigned_to_strongest_bs(desk_nodes):
    for n in desk_nodes:
        x = n.splits["train"].x.reshape(len(n.splits["train"]), 3, 3).max(axis=2)
        assert (x.argmax(axis=1) == n.bs).all()


def test_standardization_uses_train_split(desk_nodes):
    for n in desk_nodes:
        f = n.features("train")
        assert np.abs(f.mean(axis=0)).max() < 1e-9
        np.testing.assert_allclose(f.std(axis=0), 1.0, atol=1e-9)


def test_small_node_rejected():
    cfg = with_overrides(PRESETS["desk"], ues_per_snapshot=1, min_node_samples=50)
    with pytest.raises(ValueError):
        build_datasets(cfg, 0)


def _digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def test_serialization_is_byte_identical(tmp_path):
    cfg = with_overrides(PRESETS["desk"], ues_per_snapshot=2)
    save_datasets(build_datasets(cfg, 9), tmp_path / "a")
    save_datasets(build_datasets(cfg, 9), tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    loaded = load_datasets(tmp_path / "a")
    again = build_datasets(cfg, 9)
    for x, y in zip(loaded, again):
        assert x.node_id == y.node_id
        np.testing.assert_array_equal(x.splits["test"].sc, y.splits["test"].sc)
        np.testing.assert_array_equal(x.mean, y.mean)


def test_schema_version_checked(tmp_path):
    import zipfile, json
    cfg = with_overrides(PRESETS["desk"], ues_per_snapshot=2)
    path = save_datasets(build_datasets(cfg, 1)[:1], tmp_path)[0]
    with zipfile.ZipFile(path) as zf:
        entries = {n: zf.read(n) for n in zf.namelist()}
    meta = json.loads(entries["meta.json"])
    meta["schema_version"] = 99
    entries["meta.json"] = json.dumps(meta).encode()
    with zipfile.ZipFile(path, "w") as zf:
        for n, v in entries.items():
            zf.writestr(n, v)
    with pytest.raises(ValueError, match="schema"):
        load_datasets(tmp_path)


def test_config_round_trip():
    cfg = PRESETS["full"]
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ScenarioConfig.from_dict({"bogus": 1})
