"""Deterministic synthetic corpus generator.

Builds a small world of named entity sites on a latitude/longitude grid,
plants facts with predicate regularities (every focal entity has exactly
one year-valued predicate, optionally an architect, plus distractor facts
that never appear in captions) and renders template captions that realize
the planted facts with predicate-specific phrasing.

The latitude bands match the corpus split thresholds, and entity name
prefixes are drawn from disjoint pools per band, so names in held-out
splits never occur in training captions. Years come from a small shared
pool so year tokens themselves do recur across splits.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .corpus import VALIDATION_LAT, TEST_LAT

_PREFIX_A = (
    "ash", "brig", "cal", "dun", "el", "fen", "gars", "hol", "ing", "kel",
    "lam", "mor", "nor", "ox", "pen", "quar", "ros", "sut", "thorn", "ul",
    "ven", "wes", "yar", "zet", "bal", "cra", "dor", "ern", "fal", "gor",
)
_PREFIX_B = (
    "field", "mere", "ton", "wick", "by", "ham", "ford", "leigh", "don",
    "combe", "worth", "dale", "shaw", "hurst", "stead", "moor",
)
_TYPE_WORDS = ("bridge", "tower", "church", "mill", "castle", "lighthouse", "station", "hall")
_FIRST_NAMES = ("john", "james", "robert", "thomas", "william", "charles", "george", "edward")
_LAST_NAMES = ("nash", "rennie", "telford", "smeaton", "barry", "scott", "wren", "paxton")
_MATERIALS = ("granite", "sandstone", "limestone", "brick", "timber", "slate")
_YEARS = ("1712", "1735", "1748", "1766", "1781", "1803", "1820", "1838", "1855", "1872")

# raw predicate spellings that the synonym map folds together
_RAW_SPELLINGS = {
    "built": ("built", "constructed", "buildingyear"),
    "opened": ("opened", "openingyear"),
    "architect": ("architect", "designedby"),
}

SYNONYM_ROWS = (
    ("constructed", "built"),
    ("buildingyear", "built"),
    ("openingyear", "opened"),
    ("designedby", "architect"),
)

LEXICON_ROWS = (
    ("built", "built in"),
    ("built", "built"),
    ("opened", "opened in"),
    ("opened", "opened"),
    ("architect", "designed by"),
    ("owner", "owned by"),
    ("material", "made of"),
    ("height", "height of"),
)

_YEAR_TEMPLATES = {
    "built": (
        "the {t} was built in {y} .",
        "built in {y} .",
        "the {t} here was built in {y} .",
    ),
    "opened": (
        "the {t} opened in {y} .",
        "it opened in {y} .",
        "the {t} was opened in {y} .",
    ),
}
_ARCHITECT_TEMPLATES = ("designed by {p} .", "it was designed by {p} .")
_NEIGHBOR_TEMPLATES = ("near {o} .", "close to {o} .")

# band latitude ranges stay clear of the split thresholds so every site's
# entities land in the same band as its image
_BANDS = (
    ("train", 50.30, VALIDATION_LAT - 0.03),
    ("val", VALIDATION_LAT + 0.03, TEST_LAT - 0.03),
    ("test", TEST_LAT + 0.03, 57.40),
)
_LON_RANGE = (-5.8, 1.4)
_LAT_STEP = 0.05  # ~5.6 km between site rows
_LON_STEP = 0.15  # >= ~9 km between site columns at these latitudes


@dataclass(frozen=True)
class CorpusPaths:
    dataset: str
    entities: str
    facts: str
    synonyms: str
    lexicon: str


def _band_counts(n_samples: int) -> dict[str, int]:
    train = round(0.75 * n_samples)
    val = round(0.125 * n_samples)
    return {"train": train, "val": val, "test": n_samples - train - val}


def _site_grid(lat_lo: float, lat_hi: float, count: int):
    rows = max(1, int((lat_hi - lat_lo) / _LAT_STEP))
    cols = int((_LON_RANGE[1] - _LON_RANGE[0]) / _LON_STEP)
    sites = []
    for idx in range(count):
        r = idx // cols
        c = idx % cols
        if r >= rows:
            raise ValueError(f"band [{lat_lo}, {lat_hi}] cannot hold {count} sites")
        sites.append((lat_lo + r * _LAT_STEP, _LON_RANGE[0] + c * _LON_STEP))
    return sites


def _offset_point(rng, lat, lon, dist_lo_km, dist_hi_km):
    dist = rng.uniform(dist_lo_km, dist_hi_km)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    dlat = (dist / 111.1949) * np.cos(angle)
    dlon = (dist / (111.1949 * np.cos(np.radians(lat)))) * np.sin(angle)
    return float(lat + dlat), float(lon + dlon)


def generate_corpus(out_dir: str, n_samples: int = 300, seed: int = 7) -> CorpusPaths:
    """Write dataset, entity, fact, synonym and lexicon files into a directory."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)

    prefixes = [f"{a}{b}" for a in _PREFIX_A for b in _PREFIX_B]
    order = rng.permutation(len(prefixes))
    shuffled = [prefixes[i] for i in order]
    third = len(shuffled) // 3
    prefix_pool = {
        "train": shuffled[third:],  # the large band needs the large pool
        "val": shuffled[:third][: third // 2],
        "test": shuffled[:third][third // 2 :],
    }

    counts = _band_counts(n_samples)
    entity_rows = []
    fact_rows = []
    dataset_rows = []
    for band, lat_lo, lat_hi in _BANDS:
        pool = list(prefix_pool[band])
        sites = _site_grid(lat_lo, lat_hi, counts[band])
        for site_idx, (site_lat, site_lon) in enumerate(sites):
            image_id = f"img_{band}_{site_idx:04d}"
            n_extra = int(rng.integers(2, 5))
            site_entities = []
            site_names: set[str] = set()
            for k in range(n_extra + 1):
                # names repeat across sites but stay unique within one
                while True:
                    prefix = pool[int(rng.integers(len(pool)))]
                    type_word = _TYPE_WORDS[int(rng.integers(len(_TYPE_WORDS)))]
                    name = f"{prefix} {type_word}"
                    if name not in site_names:
                        site_names.add(name)
                        break
                ident = f"e_{band}_{site_idx:04d}_{k}"
                if k == 0:
                    lat, lon = site_lat, site_lon
                else:
                    lat, lon = _offset_point(rng, site_lat, site_lon, 0.30, 0.70)
                size = round(float(rng.uniform(10.0, 500.0)), 1)
                entity_rows.append((ident, name, lat, lon, size, type_word))
                site_entities.append((ident, name, type_word))

                year_pred = "built" if rng.random() < 0.5 else "opened"
                year = _YEARS[int(rng.integers(len(_YEARS)))]
                facts = {year_pred: year}
                if rng.random() < 0.6:
                    first = _FIRST_NAMES[int(rng.integers(len(_FIRST_NAMES)))]
                    last = _LAST_NAMES[int(rng.integers(len(_LAST_NAMES)))]
                    facts["architect"] = f"{first} {last}"
                if rng.random() < 0.5:
                    first = _FIRST_NAMES[int(rng.integers(len(_FIRST_NAMES)))]
                    last = _LAST_NAMES[int(rng.integers(len(_LAST_NAMES)))]
                    facts["owner"] = f"{first} {last}"
                if rng.random() < 0.5:
                    facts["material"] = _MATERIALS[int(rng.integers(len(_MATERIALS)))]
                if rng.random() < 0.4:
                    facts["height"] = str(int(rng.integers(11, 95)))
                for predicate, obj in facts.items():
                    spellings = _RAW_SPELLINGS.get(predicate, (predicate,))
                    raw = spellings[int(rng.integers(len(spellings)))]
                    fact_rows.append((ident, raw, obj))
                if k == 0:
                    focal_facts = facts

            focal_id, focal_name, focal_type = site_entities[0]
            year_pred = "built" if "built" in focal_facts else "opened"
            templates = _YEAR_TEMPLATES[year_pred]
            sentence = templates[int(rng.integers(len(templates)))].format(
                t=focal_type, y=focal_facts[year_pred]
            )
            caption = f"{focal_name} . {sentence}"
            if "architect" in focal_facts and rng.random() < 0.7:
                extra = _ARCHITECT_TEMPLATES[int(rng.integers(len(_ARCHITECT_TEMPLATES)))]
                caption += " " + extra.format(p=focal_facts["architect"])
            if len(site_entities) > 1 and rng.random() < 0.3:
                other = site_entities[1 + int(rng.integers(len(site_entities) - 1))][1]
                extra = _NEIGHBOR_TEMPLATES[int(rng.integers(len(_NEIGHBOR_TEMPLATES)))]
                caption += " " + extra.format(o=other)

            image_lat, image_lon = _offset_point(rng, site_lat, site_lon, 0.05, 0.10)
            dataset_rows.append((image_id, image_lat, image_lon, caption, "synthetic"))

    paths = CorpusPaths(
        dataset=os.path.join(out_dir, "dataset.tsv"),
        entities=os.path.join(out_dir, "entities.tsv"),
        facts=os.path.join(out_dir, "facts.tsv"),
        synonyms=os.path.join(out_dir, "synonyms.tsv"),
        lexicon=os.path.join(out_dir, "lexicon.tsv"),
    )
    with open(paths.entities, "w", encoding="utf-8") as fh:
        fh.write("# id\tname\tlat\tlon\tsize\ttype_tag (size unit: opaque scalar)\n")
        for ident, name, lat, lon, size, type_word in entity_rows:
            fh.write(f"{ident}\t{name}\t{lat!r}\t{lon!r}\t{size!r}\t{type_word}\n")
    with open(paths.facts, "w", encoding="utf-8") as fh:
        fh.write("# subject_id\traw_predicate\tobject_label\n")
        for subject, raw, obj in fact_rows:
            fh.write(f"{subject}\t{raw}\t{obj}\n")
    with open(paths.synonyms, "w", encoding="utf-8") as fh:
        fh.write("# raw\tcanonical\n")
        for raw, canonical in SYNONYM_ROWS:
            fh.write(f"{raw}\t{canonical}\n")
    with open(paths.lexicon, "w", encoding="utf-8") as fh:
        fh.write("# predicate\ttrigger phrase\n")
        for predicate, phrase in LEXICON_ROWS:
            fh.write(f"{predicate}\t{phrase}\n")
    with open(paths.dataset, "w", encoding="utf-8") as fh:
        fh.write("# image_id\tlat\tlon\tcaption\tfeature_ref\n")
        for image_id, lat, lon, caption, ref in dataset_rows:
            fh.write(f"{image_id}\t{lat!r}\t{lon!r}\t{caption}\t{ref}\n")
    return paths
