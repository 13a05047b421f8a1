"""Knowledge-aware image captioning from geographic metadata."""

__version__ = "0.1.0"

from .geodata import GeoPoint, GeoEntity, GeoContext, haversine_distance, azimuth
from .knowledge import Fact, FactStore, KnowledgeContext, PredicateVocabulary
from .corpus import Sample, TokenizedCaption, TokenKind, Vocabulary

__all__ = [
    "__version__",
    "GeoPoint",
    "GeoEntity",
    "GeoContext",
    "haversine_distance",
    "azimuth",
    "Fact",
    "FactStore",
    "KnowledgeContext",
    "PredicateVocabulary",
    "Sample",
    "TokenizedCaption",
    "TokenKind",
    "Vocabulary",
]
