import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geocap.errors import DataFormatError
from geocap.geodata import (
    EntityStore,
    GeoEntity,
    GeoPoint,
    TypeEmbedder,
    azimuth,
    build_geo_context,
    context_entity_features,
    geo_embedding,
    haversine_distance,
    load_entities,
    normalize_azimuth,
)


def oracle_haversine(lat1, lon1, lat2, lon2):
    # independent implementation used as the reference in these tests
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = math.radians(lat2 - lat1)
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 6371.0 * 2 * math.atan2(math.sqrt(a), math.sqrt(1 - a))


class FakeFactStore:
    def __init__(self, counts):
        self.counts = counts

    def count_for(self, entity_id):
        return self.counts.get(entity_id, 0)


def make_entity(ident, lat, lon, name=None, size=0.0, type_tag="spot"):
    return GeoEntity(ident, name or ident, GeoPoint(lat, lon), size, type_tag)


class TestGeoPoint:
    def test_bounds(self):
        with pytest.raises(ValueError):
            GeoPoint(95.0, 0.0)
        with pytest.raises(ValueError):
            GeoPoint(float("nan"), 0.0)

    def test_longitude_normalization(self):
        assert GeoPoint(0.0, -180.0).lon == 180.0
        assert GeoPoint(0.0, 540.0).lon == 180.0
        assert GeoPoint(0.0, -190.0).lon == 170.0
        assert GeoPoint(0.0, 180.0).lon == 180.0


class TestHaversine:
    def test_identity(self):
        p = GeoPoint(51.5, -0.12)
        assert haversine_distance(p, p) == 0.0

    def test_westminster_fixture(self):
        # ~1.2 km along the Thames; reference value from the independent oracle
        a = GeoPoint(51.5007, -0.1246)
        b = GeoPoint(51.5014, -0.1419)
        expected = oracle_haversine(51.5007, -0.1246, 51.5014, -0.1419)
        assert haversine_distance(a, b) == pytest.approx(expected, rel=1e-9)
        assert haversine_distance(a, b) == pytest.approx(1.2, abs=0.05)

    def test_half_circumference(self):
        d = haversine_distance(GeoPoint(0, 0), GeoPoint(0, 180))
        assert d == pytest.approx(math.pi * 6371.0, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180))
            b = GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180))
            dab = haversine_distance(a, b)
            dba = haversine_distance(b, a)
            assert dab == pytest.approx(dba, rel=1e-9, abs=1e-12)


class TestAzimuth:
    def test_cardinal_directions(self):
        origin = GeoPoint(0, 0)
        assert azimuth(origin, GeoPoint(1, 0)) == 0.0
        assert azimuth(origin, GeoPoint(0, 1)) == 90.0
        assert azimuth(origin, GeoPoint(-1, 0)) == 180.0
        assert azimuth(origin, GeoPoint(0, -1)) == -90.0

    def test_range(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            a = GeoPoint(rng.uniform(-89, 89), rng.uniform(-180, 180))
            b = GeoPoint(rng.uniform(-89, 89), rng.uniform(-180, 180))
            if (a.lat, a.lon) == (b.lat, b.lon):
                continue
            deg = azimuth(a, b)
            assert -180.0 < deg <= 180.0

    def test_coincident_points_error(self):
        p = GeoPoint(10.0, 20.0)
        with pytest.raises(ValueError, match="undefined bearing"):
            azimuth(p, GeoPoint(10.0, 20.0))


class TestNormalizeAzimuth:
    # tabulated by direct evaluation of the two-branch formula
    @pytest.mark.parametrize(
        "a,expected",
        [
            (0.0, (0.0, 0.5)),
            (90.0, (0.5, 0.0)),
            (-90.0, (0.5, 1.0)),
            (180.0, (1.0, 0.5)),
            (-180.0, (1.0, 0.5)),
        ],
    )
    def test_tabulated(self, a, expected):
        an, ae = normalize_azimuth(a)
        assert (an, ae) == pytest.approx(expected, abs=1e-12)

    def test_south_continuity(self):
        assert normalize_azimuth(180.0) == normalize_azimuth(-180.0)

    @given(st.floats(min_value=-180.0, max_value=180.0))
    @settings(max_examples=300, deadline=None)
    def test_outputs_in_unit_interval(self, a):
        an, ae = normalize_azimuth(a)
        assert 0.0 <= an <= 1.0
        assert 0.0 <= ae <= 1.0

    def test_domain_error(self):
        with pytest.raises(ValueError):
            normalize_azimuth(181.0)


class TestLoadEntities:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.tsv"
        path.write_text("# comment only\n\n")
        assert len(load_entities(path)) == 0

    def test_three_records(self, tmp_path):
        path = tmp_path / "e.tsv"
        path.write_text(
            "a\talpha hall\t51.0\t-0.1\t10\thall\n"
            "b\tBeta Mill\t51.1\t-0.2\t0\tmill\n"
            "c\tgamma\t51.2\t-0.3\t5.5\ttower\n"
        )
        store = load_entities(path)
        assert len(store) == 3
        assert store.get("b").name == "beta mill"  # lowercased

    def test_latitude_out_of_bounds(self, tmp_path):
        path = tmp_path / "e.tsv"
        path.write_text("a\ta\t51.0\t0\t1\tx\nb\tb\t95\t0\t1\tx\n")
        with pytest.raises(DataFormatError, match=":2"):
            load_entities(path)

    def test_duplicate_id(self, tmp_path):
        path = tmp_path / "e.tsv"
        path.write_text("a\tone\t51.0\t0\t1\tx\na\ttwo\t51.1\t0\t1\tx\n")
        with pytest.raises(DataFormatError, match="'a'"):
            load_entities(path)

    def test_field_count(self, tmp_path):
        path = tmp_path / "e.tsv"
        path.write_text("a\tone\t51.0\t0\t1\n")
        with pytest.raises(DataFormatError, match=":1"):
            load_entities(path)


def brute_force_radius(entities, point, r_km):
    hits = []
    for e in entities:
        d = oracle_haversine(point.lat, point.lon, e.location.lat, e.location.lon)
        if 0.0 < d <= r_km:
            hits.append((d, e.id))
    hits.sort()
    return [ident for _, ident in hits]


class TestGeoContext:
    def test_empty_radius(self):
        store = EntityStore([make_entity("far", 52.0, 0.0)])
        ctx = build_geo_context(store, GeoPoint(51.0, 0.0), r_km=1.0)
        assert len(ctx) == 0

    def test_truncation_keeps_nearest(self):
        entities = [make_entity(f"e{i}", 51.0 + i * 1e-3, 0.0) for i in range(1, 6)]
        store = EntityStore(entities)
        ctx = build_geo_context(store, GeoPoint(51.0, 0.0), r_km=5.0, n=3)
        assert [ce.entity.id for ce in ctx.entities] == ["e1", "e2", "e3"]
        assert [ce.rank for ce in ctx.entities] == [0, 1, 2]
        dists = [ce.distance_km for ce in ctx.entities]
        assert dists == sorted(dists)

    def test_tie_break_by_id(self):
        store = EntityStore(
            [make_entity("b", 51.0, 0.01), make_entity("a", 51.0, -0.01)]
        )
        ctx = build_geo_context(store, GeoPoint(51.0, 0.0), r_km=5.0)
        assert [ce.entity.id for ce in ctx.entities] == ["a", "b"]

    def test_matches_brute_force_scan(self):
        rng = np.random.default_rng(42)
        for trial in range(15):
            n_entities = int(rng.integers(1, 400))
            center_lat = rng.uniform(-85, 85)
            center_lon = rng.uniform(-180, 180)
            entities = [
                make_entity(
                    f"t{trial}e{i}",
                    float(np.clip(center_lat + rng.normal(0, 0.05), -90, 90)),
                    center_lon + rng.normal(0, 0.08),
                )
                for i in range(n_entities)
            ]
            store = EntityStore(entities)
            point = GeoPoint(center_lat, center_lon)
            r = float(rng.uniform(0.2, 8.0))
            got = [ce.entity.id for ce in build_geo_context(store, point, r, n=10**6).entities]
            assert got == brute_force_radius(entities, point, r)

    def test_dateline_and_pole(self):
        entities = [
            make_entity("w", 0.0, 179.995),
            make_entity("e", 0.0, -179.995),
            make_entity("n", 89.999, 10.0),
            make_entity("n2", 89.999, -170.0),
        ]
        store = EntityStore(entities)
        near_dateline = build_geo_context(store, GeoPoint(0.0, 180.0), r_km=2.0)
        assert {ce.entity.id for ce in near_dateline.entities} == {"w", "e"}
        near_pole = build_geo_context(store, GeoPoint(89.9995, 60.0), r_km=10.0)
        assert {ce.entity.id for ce in near_pole.entities} == {"n", "n2"}

    def test_salience_from_fact_store(self):
        store = EntityStore([make_entity("a", 51.0, 0.001), make_entity("b", 51.0, 0.002)])
        facts = FakeFactStore({"a": 3})
        ctx = build_geo_context(store, GeoPoint(51.0, 0.0), r_km=2.0, fact_store=facts)
        by_id = {ce.entity.id: ce for ce in ctx.entities}
        assert by_id["a"].fact_count == 3 and by_id["a"].has_facts == 1
        assert by_id["b"].fact_count == 0 and by_id["b"].has_facts == 0


class TestGeoEmbedding:
    def test_scalar_feature_layout(self):
        ce_entity = make_entity("x", 51.0, 0.0, size=0.0, type_tag="temple")
        from geocap.geodata import ContextEntity

        ce = ContextEntity(ce_entity, 0.5, 90.0, 0, 0, 0)
        emb = TypeEmbedder(["temple"], dim=4, seed=0)
        vec = geo_embedding(ce, emb)
        assert vec[:6] == pytest.approx([0.5, 0.5, 0.0, 0.0, 0.0, 0.0])
        assert np.array_equal(vec[6:], emb.row("temple"))

    def test_default_dimension_is_300(self):
        ce_entity = make_entity("x", 51.0, 0.0, size=12.0, type_tag="river")
        from geocap.geodata import ContextEntity

        ce = ContextEntity(ce_entity, 0.25, -45.0, 1, 2, 0)
        emb = TypeEmbedder(["river"], dim=294, seed=0)
        assert geo_embedding(ce, emb).shape == (300,)

    def test_deterministic(self):
        from geocap.geodata import ContextEntity

        a = ContextEntity(make_entity("a", 51.0, 0.0, type_tag="mill"), 0.3, 10.0, 1, 2, 0)
        b = ContextEntity(make_entity("b", 52.0, 1.0, name="other", type_tag="mill"), 0.3, 10.0, 1, 2, 5)
        emb = TypeEmbedder(["mill"], dim=8, seed=3)
        assert np.array_equal(geo_embedding(a, emb), geo_embedding(b, emb))

    def test_unknown_type_uses_unk_row(self):
        emb = TypeEmbedder(["mill"], dim=8, seed=3)
        assert emb.index("volcano") == TypeEmbedder.UNK_INDEX
        assert np.array_equal(emb.row("volcano"), emb.table[0])

    def test_raw_count_passthrough(self):
        from geocap.geodata import ContextEntity

        ce = ContextEntity(make_entity("a", 51.0, 0.0, size=123.5), 0.9, 0.0, 1, 7, 0)
        feats = context_entity_features(ce)
        assert feats[3] == 123.5 and feats[5] == 7.0
