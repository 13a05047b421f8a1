"""Geographic entity stores, radius queries and geographic feature vectors.

Entities are points with a name, a size and a type tag. A store answers
"everything within ``r`` km of here" queries through a uniform lat/lon grid
index; query results are turned into a ranked context whose entries carry
distance, azimuth and knowledge-salience features, and finally into fixed
width feature vectors (scalar features followed by a trainable type
embedding row).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import DataFormatError

EARTH_RADIUS_KM = 6371.0

# distance, two normalized azimuth components, size, has-facts flag, fact count
NUM_SCALAR_FEATURES = 6


def normalize_longitude(lon: float) -> float:
    """Map a longitude in degrees into (-180, 180]."""
    lon = math.fmod(lon, 360.0)
    if lon <= -180.0:
        lon += 360.0
    elif lon > 180.0:
        lon -= 360.0
    return lon


@dataclass(frozen=True)
class GeoPoint:
    """A latitude/longitude pair in degrees; longitude kept in (-180, 180]."""

    lat: float
    lon: float

    def __post_init__(self):
        lat = float(self.lat)
        lon = float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinates ({self.lat}, {self.lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_longitude(lon))


@dataclass(frozen=True)
class GeoEntity:
    id: str
    name: str
    location: GeoPoint
    size: float
    type_tag: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("entity id must be non-empty")
        if not self.name:
            raise ValueError(f"entity {self.id}: name must be non-empty")
        if not (math.isfinite(self.size) and self.size >= 0.0):
            raise ValueError(f"entity {self.id}: size must be >= 0, got {self.size}")
        if not self.type_tag:
            raise ValueError(f"entity {self.id}: type tag must be non-empty")


@dataclass(frozen=True)
class ContextEntity:
    """One entity inside a geographic context with its query-time features."""

    entity: GeoEntity
    distance_km: float
    azimuth_deg: float
    has_facts: int
    fact_count: int
    rank: int


@dataclass(frozen=True)
class GeoContext:
    """Up to ``n`` entities around an image location, nearest first."""

    image_location: GeoPoint
    entities: tuple[ContextEntity, ...]

    def __len__(self):
        return len(self.entities)


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km on a sphere of radius 6371 km."""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def azimuth(origin: GeoPoint, target: GeoPoint) -> float:
    """Initial great-circle bearing from ``origin`` to ``target``.

    Measured clockwise from north, in degrees in (-180, 180]. Raises
    ``ValueError`` for coincident points, where the bearing is undefined.
    """
    if origin.lat == target.lat and origin.lon == target.lon:
        raise ValueError("undefined bearing between coincident points")
    phi1 = math.radians(origin.lat)
    phi2 = math.radians(target.lat)
    dlam = math.radians(target.lon - origin.lon)
    y = math.sin(dlam) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    deg = math.degrees(math.atan2(y, x))
    if deg <= -180.0:
        deg += 360.0
    return deg


def normalize_azimuth(a_deg: float) -> tuple[float, float]:
    """Map an azimuth in [-180, 180] to two components in [0, 1].

    The first component measures angular distance from north, the second
    from east, so bearings that are close on the compass stay close after
    normalization (in particular the two representations of due south,
    +180 and -180, map to the same pair).
    """
    if not (math.isfinite(a_deg) and -180.0 <= a_deg <= 180.0):
        raise ValueError(f"azimuth {a_deg} outside [-180, 180]")
    a_north = abs(a_deg) / 180.0
    if a_deg >= -90.0:
        a_east = abs(90.0 - a_deg) / 180.0
    else:
        a_east = (90.0 + abs(a_deg + 180.0)) / 180.0
    return a_north, a_east


class EntityStore:
    """Immutable collection of entities with a lat/lon grid index.

    The grid buckets entities by ``cell_deg`` degrees in both axes;
    longitude cells wrap around the antimeridian and queries whose radius
    cap reaches a pole fall back to scanning every longitude cell, so
    results are identical to a full linear scan.
    """

    def __init__(self, entities, cell_deg: float = 0.25):
        self.entities: tuple[GeoEntity, ...] = tuple(entities)
        self._by_id: dict[str, int] = {}
        for i, ent in enumerate(self.entities):
            if ent.id in self._by_id:
                raise DataFormatError(f"duplicate entity id {ent.id!r}")
            self._by_id[ent.id] = i
        self._lat_rad = np.array([math.radians(e.location.lat) for e in self.entities])
        self._lon_rad = np.array([math.radians(e.location.lon) for e in self.entities])
        self._cell_deg = float(cell_deg)
        self._n_lon = max(1, int(math.ceil(360.0 / self._cell_deg)))
        grid: dict[tuple[int, int], list[int]] = {}
        for i, ent in enumerate(self.entities):
            key = self._cell_of(ent.location.lat, ent.location.lon)
            grid.setdefault(key, []).append(i)
        self._grid = {k: np.array(v, dtype=np.int64) for k, v in grid.items()}

    def __len__(self):
        return len(self.entities)

    def __contains__(self, entity_id: str):
        return entity_id in self._by_id

    def get(self, entity_id: str) -> GeoEntity:
        return self.entities[self._by_id[entity_id]]

    def _cell_of(self, lat: float, lon: float) -> tuple[int, int]:
        i = int(math.floor((lat + 90.0) / self._cell_deg))
        j = int(math.floor((lon + 180.0) / self._cell_deg)) % self._n_lon
        return i, j

    def _candidate_indices(self, point: GeoPoint, r_km: float) -> np.ndarray:
        # angular radius of the cap, padded slightly against rounding
        c = (r_km / EARTH_RADIUS_KM) * (1.0 + 1e-12) + 1e-15
        dlat = math.degrees(c)
        lat_lo = point.lat - dlat
        lat_hi = point.lat + dlat
        i_lo = int(math.floor((max(lat_lo, -90.0) + 90.0) / self._cell_deg))
        i_hi = int(math.floor((min(lat_hi, 90.0) + 90.0) / self._cell_deg))
        if lat_lo <= -90.0 or lat_hi >= 90.0:
            lon_all = True
        else:
            # max longitude deviation over a cap not containing a pole
            cos_edge = min(
                math.cos(math.radians(lat_lo)), math.cos(math.radians(lat_hi))
            )
            s = math.sin(c) / max(cos_edge, 1e-12)
            lon_all = s >= 1.0
            if not lon_all:
                dlon = math.degrees(math.asin(s)) + 1e-9
        chunks = []
        for i in range(i_lo, i_hi + 1):
            if lon_all:
                j_range = range(self._n_lon)
            else:
                j_lo = int(math.floor((point.lon - dlon + 180.0) / self._cell_deg))
                j_hi = int(math.floor((point.lon + dlon + 180.0) / self._cell_deg))
                if j_hi - j_lo + 1 >= self._n_lon:
                    j_range = range(self._n_lon)
                else:
                    j_range = range(j_lo, j_hi + 1)
            for j in j_range:
                bucket = self._grid.get((i, j % self._n_lon))
                if bucket is not None:
                    chunks.append(bucket)
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(chunks)

    def query_radius(self, point: GeoPoint, r_km: float):
        """Indices and distances of all entities within ``r_km`` (inclusive)."""
        cand = self._candidate_indices(point, r_km)
        if cand.size == 0:
            return []
        dist = _accel.haversine_many(
            math.radians(point.lat),
            math.radians(point.lon),
            self._lat_rad[cand],
            self._lon_rad[cand],
        )
        keep = dist <= r_km
        return list(zip(cand[keep].tolist(), dist[keep].tolist()))


def load_entities(path, cell_deg: float = 0.25) -> EntityStore:
    """Read a tab-separated entity snapshot into an :class:`EntityStore`.

    Each non-comment line holds id, name, lat, lon, size and type tag.
    Names and type tags are lowercased. Malformed records and duplicate
    ids raise :class:`DataFormatError` naming the offending line or id.
    """
    entities = []
    seen = set()
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read entity file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}"
                )
            ident, name, lat_s, lon_s, size_s, type_tag = parts
            ident = ident.strip()
            if ident in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate entity id {ident!r}")
            try:
                location = GeoPoint(float(lat_s), float(lon_s))
                entity = GeoEntity(
                    id=ident,
                    name=" ".join(name.lower().split()),
                    location=location,
                    size=float(size_s),
                    type_tag=type_tag.strip().lower(),
                )
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            seen.add(ident)
            entities.append(entity)
    return EntityStore(entities, cell_deg=cell_deg)


def build_geo_context(store, image_location, r_km=1.0, n=300, fact_store=None) -> GeoContext:
    """Rank entities within ``r_km`` of the image location.

    Entities are ordered by ascending distance with ties broken by id, then
    truncated to the ``n`` nearest. Entities coincident with the image
    location are skipped (their azimuth is undefined). Knowledge salience
    features come from ``fact_store`` (anything with a ``count_for`` method);
    with no fact store both are zero.
    """
    hits = store.query_radius(image_location, r_km)
    ranked = sorted(
        ((dist, store.entities[idx].id, idx) for idx, dist in hits if dist > 0.0),
        key=lambda t: (t[0], t[1]),
    )[:n]
    members = []
    for rank, (dist, _ident, idx) in enumerate(ranked):
        entity = store.entities[idx]
        fact_count = fact_store.count_for(entity.id) if fact_store is not None else 0
        members.append(
            ContextEntity(
                entity=entity,
                distance_km=dist,
                azimuth_deg=azimuth(image_location, entity.location),
                has_facts=1 if fact_count > 0 else 0,
                fact_count=fact_count,
                rank=rank,
            )
        )
    return GeoContext(image_location=image_location, entities=tuple(members))


class TypeEmbedder:
    """Trainable embedding table over entity type tags with an UNK row.

    Row 0 is the UNK row used for tags outside the table. The table is a
    plain array so a model can adopt it as a parameter; lookups always
    reflect its current values.
    """

    UNK_INDEX = 0

    def __init__(self, type_tags, dim: int, seed: int = 0, dtype=np.float32):
        tags = sorted(set(type_tags))
        self.tags: tuple[str, ...] = tuple(tags)
        self._index = {tag: i + 1 for i, tag in enumerate(tags)}
        rng = np.random.default_rng(seed)
        self.table = rng.uniform(-0.05, 0.05, size=(len(tags) + 1, dim)).astype(dtype)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def index(self, type_tag: str) -> int:
        return self._index.get(type_tag, self.UNK_INDEX)

    def row(self, type_tag: str) -> np.ndarray:
        return self.table[self.index(type_tag)]


def context_entity_features(ce: ContextEntity) -> np.ndarray:
    """The six scalar features of a context entity, in embedding order."""
    a_north, a_east = normalize_azimuth(ce.azimuth_deg)
    return np.array(
        [
            ce.distance_km,
            a_north,
            a_east,
            ce.entity.size,
            float(ce.has_facts),
            float(ce.fact_count),
        ]
    )


def geo_embedding(ce: ContextEntity, type_embedder: TypeEmbedder) -> np.ndarray:
    """Feature vector of a context entity: scalar features ++ type row.

    Distance, size and fact count enter unscaled; only the azimuth is
    normalized. Output width is ``NUM_SCALAR_FEATURES + type_embedder.dim``.
    """
    feats = context_entity_features(ce).astype(type_embedder.table.dtype)
    return np.concatenate([feats, type_embedder.row(ce.entity.type_tag)])
