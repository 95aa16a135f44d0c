import datetime as dt

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from oracles import stations_in_box, template
from stfda.data import (DEFAULT_COVARIATES, CovariateSet, DataError, FunctionalDataset, FunctionalGrid, StationMeta,
                        build_design, export_hire_data, export_station_meta, export_weather, ingest_hire_data,
                        ingest_station_meta, ingest_weather)
from stfda.model import ModelSpec

DAY = dt.date(2017, 6, 6)  # a Tuesday


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def test_default_grid():
    g = FunctionalGrid()
    assert g.q == 288
    np.testing.assert_allclose(np.diff(g.h), 5 / 60)
    with pytest.raises(ValueError):
        FunctionalGrid((0.0, 24.0))
    with pytest.raises(ValueError):
        FunctionalGrid((1.0, 0.5))


def test_complete_day(tmp_path):
    lines = ["station_id,timestamp,bike_count"]
    for j in range(288):
        ts = dt.datetime.combine(DAY, dt.time()) + dt.timedelta(minutes=5 * j)
        lines.append(f"A,{ts.isoformat()},{j % 7}")
    ds = ingest_hire_data(_write(tmp_path / "h.csv", lines))
    assert ds.shape == (1, 1, 288)
    assert ds.observed_mask.all()
    assert ds.values[0, 0, 13] == 13 % 7


def test_empty_day_inside_range(tmp_path):
    lines = ["station_id,timestamp,bike_count", "A,2017-06-06T00:00:00,3", "A,2017-06-08T00:00:00,4"]
    ds = ingest_hire_data(_write(tmp_path / "h.csv", lines))
    assert ds.T == 3
    assert not ds.observed_mask[0, 1].any()
    assert np.isnan(ds.values[0, 1]).all()


def test_tolerance_and_rejections(tmp_path):
    lines = ["station_id,timestamp,bike_count",
             "A,2017-06-06T00:02:00,1",    # 2 min off: accepted
             "A,2017-06-06T00:07:40,1",    # 7m40s off the nearest hourly slot: rejected
             "A,2017-06-06T00:00:30,5"]    # same slot again: rejected
    ds = ingest_hire_data(_write(tmp_path / "h.csv", lines), FunctionalGrid.regular(24))
    assert ds.observed_mask.sum() == 1
    assert ds.n_rejected == 2
    assert ds.values[0, 0, 0] == 1


@pytest.mark.parametrize("row,msg", [("A,notatime,1", ":2:"), ("A,2017-06-06T00:00:00", ":2:"),
                                     ("A,2017-06-06T00:00:00,-1", ":2:")])
def test_malformed_rows(tmp_path, row, msg):
    with pytest.raises(DataError, match=msg):
        ingest_hire_data(_write(tmp_path / "h.csv", ["station_id,timestamp,bike_count", row]))


def test_empty_file(tmp_path):
    with pytest.raises(DataError, match="no records in range"):
        ingest_hire_data(_write(tmp_path / "h.csv", ["station_id,timestamp,bike_count"]))


def test_bad_header(tmp_path):
    with pytest.raises(DataError, match="header"):
        ingest_hire_data(_write(tmp_path / "h.csv", ["id,ts,count"]))


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 10_000), st.floats(0, 0.9))
def test_roundtrip_and_unobserved_count(tmp_path, seed, missing):
    rng = np.random.default_rng(seed)
    stations = stations_in_box(3, seed)
    base = template(stations, 4, 24)
    mask = rng.uniform(size=base.shape) >= missing
    if not mask.any():
        mask[0, 0, 0] = True
    vals = np.round(rng.uniform(0, 30, base.shape), 3)
    ds = base.with_values(np.where(mask, vals, np.nan), mask)
    path = tmp_path / f"h{seed}.csv"
    export_hire_data(ds, path)
    back = ingest_hire_data(path, ds.grid, stations, ds.days[0], ds.days[-1])
    np.testing.assert_array_equal(back.observed_mask, ds.observed_mask)
    np.testing.assert_array_equal(back.values[mask], ds.values[mask])
    accepted = sum(1 for _ in open(path)) - 1 - back.n_rejected
    assert (~back.observed_mask).sum() == back.values.size - accepted


def test_station_meta(tmp_path):
    head = "id,name,lat,lon,elevation_m,dist_metro_km,dist_train_km"
    one = ingest_station_meta(_write(tmp_path / "a.csv", [head, "001,Kaivopuisto,60.155,24.950,10,1.2,2.0"]))
    assert one == [StationMeta("001", "Kaivopuisto", 60.155, 24.95, 10.0, 1.2, 2.0)]
    with pytest.raises(DataError, match="'001'"):
        ingest_station_meta(_write(tmp_path / "b.csv", [head, "001,a,60,24,0,0,0", "001,b,60,24,0,0,0"]))
    with pytest.raises(DataError, match="out of range"):
        ingest_station_meta(_write(tmp_path / "c.csv", [head, "002,x,91,24,0,0,0"]))
    p = tmp_path / "d.csv"
    export_station_meta(one, p)
    assert ingest_station_meta(p) == one


def test_weather_aggregation(tmp_path):
    head = "timestamp,temperature_C,cloud_okta,wind_ms,precip_mm"
    rows = [head]
    for hr in range(24):
        rows.append(f"2017-06-06T{hr:02d}:00:00,10,{hr % 9},{hr / 10},0")
        rows.append(f"2017-06-07T{hr:02d}:00:00,{hr},4,3,0.5")
    days = [DAY, DAY + dt.timedelta(days=1)]
    w = ingest_weather(_write(tmp_path / "w.csv", rows), days)
    assert w.table("temperature", 1, 2)[0].tolist() == [10.0, 11.5]
    assert w.table("precipitation", 1, 2)[0].tolist() == [0.0, 12.0]
    with pytest.raises(DataError, match="2017-06-08"):
        ingest_weather(tmp_path / "w.csv", days + [DAY + dt.timedelta(days=2)])
    p = tmp_path / "w2.csv"
    export_weather(w, days, p)
    again = ingest_weather(p, days)
    for name in w.names:
        np.testing.assert_array_equal(again.table(name, 1, 2), w.table(name, 1, 2))


def _design_inputs(n=4, T=7):
    stations = [StationMeta(s.id, s.name, s.latitude, s.longitude, 5.0 * k, 0.5, 1.5)
                for k, s in enumerate(stations_in_box(n, 1))]
    ds = template(stations, T, 6, start=DAY)
    rng = np.random.default_rng(0)
    weather = CovariateSet(("temperature", "cloud", "wind", "precipitation"),
                           {k: rng.uniform(0, 5, (1, T)) for k in ("temperature", "cloud", "wind", "precipitation")})
    covs = CovariateSet.from_stations(stations).merge(weather)
    labels = {s.id: (1 if k % 2 == 0 else 2) for k, s in enumerate(stations)}
    return ds, covs, labels


def test_interaction_design():
    ds, covs, labels = _design_inputs()
    d = build_design(ds, covs, labels, ModelSpec())
    assert d.d == 20 == 2 + 2 * len(DEFAULT_COVARIATES)
    col = {n: k for k, n in enumerate(d.names)}
    # station 0 is cluster 1, day 0 is a Tuesday
    assert d.X[0, 0, col["Cluster1"]] == 1 and d.X[0, 0, col["Cluster2"]] == 0
    assert d.X[0, 0, col["Cluster1*saturday"]] == 0 and d.X[0, 0, col["Cluster2*saturday"]] == 0
    # station 1 is cluster 2, day 4 is a Saturday
    assert d.X[1, 4, col["Cluster2*saturday"]] == 1 and d.X[1, 4, col["Cluster1*saturday"]] == 0
    assert d.X[2, 0, col["Cluster1*elevation"]] == 10.0
    np.testing.assert_array_equal(d.X[..., col["Cluster1"]] + d.X[..., col["Cluster2"]], 1.0)


def test_design_errors_and_variants():
    ds, covs, labels = _design_inputs()
    with pytest.raises(DataError):
        build_design(ds, covs, None, ModelSpec())
    partial = dict(list(labels.items())[:-1])
    with pytest.raises(DataError, match="no cluster label"):
        build_design(ds, covs, partial, ModelSpec())
    add = build_design(ds, covs, None, ModelSpec(design="additive"))
    assert add.d == 1 + len(DEFAULT_COVARIATES)
    assert build_design(ds, None, None, ModelSpec(design="intercept")).names == ("intercept",)


def test_duplicate_subset_identities():
    ds = template(stations_in_box(3, 0), 2, 4)
    sub = ds.subset([0, 0, 2, 0])
    assert sub.station_ids == ["S000", "S000#2", "S002", "S000#3"]


def test_dataset_validation():
    g = FunctionalGrid.regular(2)
    st_ = [StationMeta("a", "", 60, 24)]
    with pytest.raises(DataError):
        FunctionalDataset(st_, [DAY], g, np.zeros((1, 1, 3)), np.ones((1, 1, 3), bool))
    with pytest.raises(DataError):
        FunctionalDataset(st_, [DAY], g, np.full((1, 1, 2), np.nan), np.ones((1, 1, 2), bool))
    with pytest.raises(DataError):
        StationMeta("b", "", 60, 24, elevation=-1)
