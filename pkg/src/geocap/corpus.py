"""Dataset loading, caption preprocessing, context linking and vocabularies.

Captions are lowercased and split into word/punctuation tokens, then linked
against the two contexts: maximal runs matching an entity name collapse to
a single ENTITY token, runs matching a fact's object label collapse to a
FACT token, everything else stays a regular VOCAB token. The split into
train/validation/test is by image latitude so test entities are unseen.
"""

from __future__ import annotations

import hashlib
import logging
import re
import struct
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .errors import DataFormatError
from .geodata import GeoContext, GeoPoint

log = logging.getLogger(__name__)

VALIDATION_LAT = 53.5706
TEST_LAT = 54.8975

MAX_CAPTION_TOKENS = 100

FEATURE_MAGIC = b"GFCF"


class TokenKind(IntEnum):
    VOCAB = 0
    ENTITY = 1
    FACT = 2


@dataclass(frozen=True)
class Sample:
    image_id: str
    location: GeoPoint
    caption_raw: str
    feature_ref: str


@dataclass(frozen=True)
class TokenizedCaption:
    """Parallel token/kind/ref lists; VOCAB refs of -1 are unresolved."""

    tokens: tuple[str, ...]
    kinds: tuple[int, ...]
    refs: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.tokens) == len(self.kinds) == len(self.refs)):
            raise ValueError("tokens, kinds and refs must have equal length")

    def __len__(self):
        return len(self.tokens)

    def detokenize(self) -> str:
        return " ".join(self.tokens)

    def surface_tokens(self) -> list[str]:
        """Flat word sequence with multi-word entity/fact tokens split up."""
        out: list[str] = []
        for tok in self.tokens:
            out.extend(tok.split(" "))
        return out


_MARKUP_RE = re.compile(r"<[^>]*>")
_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)*|[^\sa-z0-9]")
_TOKEN_REPLACEMENTS = {"&": "and", "saint": "st"}


def preprocess_caption(text: str) -> list[str]:
    """Lowercase, strip markup tags, tokenize, apply unification replacements."""
    text = _MARKUP_RE.sub(" ", text.lower())
    tokens = _TOKEN_RE.findall(text)
    return [_TOKEN_REPLACEMENTS.get(t, t) for t in tokens]


def _phrase_tokens(label: str) -> tuple[str, ...]:
    return tuple(preprocess_caption(label))


def link_caption(tokens, geo_context=None, knowledge_context=None) -> TokenizedCaption:
    """Greedy longest-match-first linking of caption tokens to the contexts.

    At each position the longest matching entity name or fact object label
    wins; at equal length an entity beats a fact, and earlier context slots
    beat later ones. Unmatched positions become VOCAB tokens with ref -1.
    The joined surface string is preserved exactly.
    """
    candidates: dict[str, list[tuple[int, int, int, tuple[str, ...]]]] = {}
    if geo_context is not None:
        for ref, ce in enumerate(geo_context.entities):
            phrase = _phrase_tokens(ce.entity.name)
            if phrase:
                candidates.setdefault(phrase[0], []).append(
                    (-len(phrase), TokenKind.ENTITY, ref, phrase)
                )
    if knowledge_context is not None:
        for ref, cf in enumerate(knowledge_context.facts):
            phrase = _phrase_tokens(cf.fact.object_label)
            if phrase:
                candidates.setdefault(phrase[0], []).append(
                    (-len(phrase), TokenKind.FACT, ref, phrase)
                )
    for options in candidates.values():
        options.sort()

    tokens = list(tokens)
    out_tokens: list[str] = []
    out_kinds: list[int] = []
    out_refs: list[int] = []
    i = 0
    while i < len(tokens):
        match = None
        for _neglen, kind, ref, phrase in candidates.get(tokens[i], ()):
            if tuple(tokens[i : i + len(phrase)]) == phrase:
                match = (kind, ref, phrase)
                break
        if match is None:
            out_tokens.append(tokens[i])
            out_kinds.append(TokenKind.VOCAB)
            out_refs.append(-1)
            i += 1
        else:
            kind, ref, phrase = match
            out_tokens.append(" ".join(phrase))
            out_kinds.append(kind)
            out_refs.append(ref)
            i += len(phrase)
    return TokenizedCaption(tuple(out_tokens), tuple(out_kinds), tuple(out_refs))


def split_dataset(samples):
    """Latitude-based train/validation/test partition."""
    train, validation, test = [], [], []
    for sample in samples:
        lat = sample.location.lat
        if lat > TEST_LAT:
            test.append(sample)
        elif lat > VALIDATION_LAT:
            validation.append(sample)
        else:
            train.append(sample)
    return train, validation, test


class Vocabulary:
    """Dense token-index mapping with reserved control tokens.

    Index 0..3 are PAD, BOS, EOS and UNK. ``vectors`` holds the initial
    embedding rows: pretrained vectors where supplied, otherwise uniform
    random in [-0.05, 0.05] from the given seed; the PAD row is zero.
    """

    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, tokens, vectors: np.ndarray):
        self.tokens: tuple[str, ...] = tuple(tokens)
        if self.tokens[:4] != self.RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if vectors.shape[0] != len(self.tokens):
            raise ValueError("one vector row per token required")
        self.vectors = vectors
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str):
        return token in self._index

    def index_of(self, token: str) -> int:
        return self._index.get(token, self.UNK)


def build_vocabulary(
    linked_captions,
    dim: int,
    min_count: int = 1,
    seed: int = 0,
    pretrained=None,
) -> Vocabulary:
    """Vocabulary over the VOCAB-kind tokens of the training captions.

    Tokens below ``min_count`` are dropped. ``pretrained`` maps token ->
    vector (e.g. loaded with :func:`load_pretrained_vectors`); uncovered
    tokens get seeded random rows to keep builds reproducible.
    """
    counts: dict[str, int] = {}
    for tc in linked_captions:
        for tok, kind in zip(tc.tokens, tc.kinds):
            if kind == TokenKind.VOCAB:
                counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(tok for tok, c in counts.items() if c >= min_count)
    tokens = list(Vocabulary.RESERVED) + kept
    rng = np.random.default_rng(seed)
    vectors = rng.uniform(-0.05, 0.05, size=(len(tokens), dim)).astype(np.float32)
    vectors[Vocabulary.PAD] = 0.0
    if pretrained:
        for i, tok in enumerate(tokens):
            vec = pretrained.get(tok)
            if vec is not None:
                if len(vec) != dim:
                    raise DataFormatError(
                        f"pretrained vector for {tok!r} has dimension {len(vec)}, expected {dim}"
                    )
                vectors[i] = np.asarray(vec, dtype=np.float32)
    return Vocabulary(tokens, vectors)


def load_pretrained_vectors(path, dim: int) -> dict[str, np.ndarray]:
    """Read GloVe-style text vectors (token followed by ``dim`` floats)."""
    table: dict[str, np.ndarray] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read vector file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise DataFormatError(
                    f"{path}:{lineno}: expected token plus {dim} floats, got {len(parts)} fields"
                )
            table[parts[0]] = np.array([float(x) for x in parts[1:]], dtype=np.float32)
    return table


def resolve_vocab_refs(tc: TokenizedCaption, vocab: Vocabulary) -> TokenizedCaption:
    """Fill VOCAB refs with vocabulary indices (UNK for unknown tokens)."""
    refs = [
        vocab.index_of(tok) if kind == TokenKind.VOCAB else ref
        for tok, kind, ref in zip(tc.tokens, tc.kinds, tc.refs)
    ]
    return replace(tc, refs=tuple(refs))


# ---------------------------------------------------------------------------
# dataset records


def _escape_field(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape_field(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            if nxt == "t":
                out.append("\t")
            elif nxt == "n":
                out.append("\n")
            elif nxt == "\\":
                out.append("\\")
            else:
                out.append(nxt)
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def load_dataset(path, max_tokens: int = MAX_CAPTION_TOKENS) -> list[Sample]:
    """Read tab-separated samples: image id, lat, lon, caption, feature ref.

    Samples whose preprocessed caption exceeds ``max_tokens`` are dropped
    (with a log message); duplicate image ids are an error.
    """
    samples: list[Sample] = []
    seen: set[str] = set()
    dropped = 0
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read dataset file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}"
                )
            image_id, lat_s, lon_s, caption_esc, feature_ref = parts
            image_id = image_id.strip()
            if not image_id:
                raise DataFormatError(f"{path}:{lineno}: empty image id")
            if image_id in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate image id {image_id!r}")
            try:
                location = GeoPoint(float(lat_s), float(lon_s))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            caption = _unescape_field(caption_esc)
            if len(preprocess_caption(caption)) > max_tokens:
                dropped += 1
                continue
            seen.add(image_id)
            samples.append(Sample(image_id, location, caption, feature_ref.strip()))
    if dropped:
        log.warning("dropped %d samples with captions over %d tokens", dropped, max_tokens)
    return samples


def save_dataset(path, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# image_id\tlat\tlon\tcaption\tfeature_ref\n")
        for s in samples:
            fh.write(
                f"{s.image_id}\t{s.location.lat!r}\t{s.location.lon!r}\t"
                f"{_escape_field(s.caption_raw)}\t{s.feature_ref}\n"
            )


# ---------------------------------------------------------------------------
# image feature records


def save_image_features(path, features: np.ndarray) -> None:
    """Write a feature sequence as magic, u32 dims, little-endian float32."""
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError(f"features must be 2-d (positions x channels), got {features.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", features.shape[0], features.shape[1]))
        fh.write(features.tobytes(order="C"))


def load_image_features(path, expected_shape=None) -> np.ndarray:
    """Read a feature record, optionally enforcing (positions, channels)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read feature file {path}: {exc}") from exc
    if blob[:4] != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic bytes {blob[:4]!r}")
    if len(blob) < 12:
        raise DataFormatError(f"{path}: truncated header")
    positions, channels = struct.unpack("<II", blob[4:12])
    expected_bytes = 12 + positions * channels * 4
    if len(blob) != expected_bytes:
        raise DataFormatError(
            f"{path}: expected {expected_bytes} bytes for {positions}x{channels}, got {len(blob)}"
        )
    arr = np.frombuffer(blob, dtype="<f4", offset=12).reshape(positions, channels)
    if expected_shape is not None and tuple(arr.shape) != tuple(expected_shape):
        raise DataFormatError(
            f"{path}: feature shape {arr.shape} does not match configured {tuple(expected_shape)}"
        )
    return arr.copy()


def synthetic_image_features(image_id: str, positions: int, channels: int) -> np.ndarray:
    """Deterministic stand-in features seeded from the image id."""
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((positions, channels)).astype(np.float32)


def resolve_image_features(sample: Sample, features_dir, positions: int, channels: int):
    """Feature sequence for a sample: synthetic or loaded from its record."""
    if sample.feature_ref == "synthetic" or features_dir in (None, "synthetic"):
        return synthetic_image_features(sample.image_id, positions, channels)
    path = f"{features_dir}/{sample.feature_ref}"
    return load_image_features(path, expected_shape=(positions, channels))
