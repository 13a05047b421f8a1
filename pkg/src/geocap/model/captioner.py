"""The caption generator: context encoders, hybrid scoring head, decoding.

The decoder produces, at every step, one probability distribution over the
concatenation of three index spaces: the regular vocabulary, the slots of
the geographic context and the slots of the knowledge context. Vocabulary
scores can be modulated by the predicate indicator (which predicates have a
fact whose subject is already mentioned) and fact scores can be masked by
the geo-entity indicator (whether the fact's own subject is mentioned);
ablation variants drop either gate, the whole knowledge context, or both
contexts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import _accel
from ..corpus import TokenizedCaption, TokenKind, Vocabulary
from ..errors import ConfigError
from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .config import ModelConfig


@dataclass
class SampleInput:
    """One sample's model-ready arrays.

    ``input_indices``/``targets`` are teacher-forcing sequences over the
    combined index space [vocabulary | geo slots | fact slots]; they are
    empty for generation-only inputs. ``p_ind``/``g_ind`` hold one
    indicator row per input position, computed from the gold prefix.
    """

    image_id: str
    image_features: np.ndarray
    geo_features: np.ndarray  # (|G|, NUM_SCALAR_FEATURES)
    type_indices: np.ndarray  # (|G|,)
    geo_names: tuple[str, ...]
    fact_subject_refs: np.ndarray  # (|K|,)
    fact_pred_indices: np.ndarray  # (|K|,); -1 for out-of-vocabulary predicates
    fact_objects: tuple[str, ...]
    input_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    p_ind: np.ndarray | None = None
    g_ind: np.ndarray | None = None
    caption: TokenizedCaption | None = None

    @property
    def n_geo(self) -> int:
        return self.geo_features.shape[0]

    @property
    def n_fact(self) -> int:
        return self.fact_subject_refs.shape[0]


@dataclass(frozen=True)
class IndicatorState:
    """Mention-driven gates at one decoding step."""

    p_ind: np.ndarray  # (|P|,) 0/1 per canonical predicate
    g_ind: np.ndarray  # (|K|,) 0/1 per knowledge-context slot
    mentioned: frozenset[int]


def mentioned_entities(kinds, refs, fact_subject_refs) -> set[int]:
    """Geo-context slots mentioned by a prefix.

    An entity counts as mentioned when its name was emitted (ENTITY token)
    or when one of its facts was emitted (the fact names its subject).
    """
    mentioned: set[int] = set()
    for kind, ref in zip(kinds, refs):
        if kind == TokenKind.ENTITY:
            mentioned.add(int(ref))
        elif kind == TokenKind.FACT:
            mentioned.add(int(fact_subject_refs[ref]))
    return mentioned


def _indicator_rows(mentioned, fact_subject_refs, fact_pred_indices, n_predicates, dtype):
    g = np.zeros(len(fact_subject_refs), dtype=dtype)
    p = np.zeros(n_predicates, dtype=dtype)
    for j, subj in enumerate(fact_subject_refs):
        if int(subj) in mentioned:
            g[j] = 1
            pred = int(fact_pred_indices[j])
            if pred >= 0:
                p[pred] = 1
    return p, g


def compute_indicators(
    prefix: TokenizedCaption,
    fact_subject_refs,
    fact_pred_indices,
    n_predicates: int,
) -> IndicatorState:
    """Indicator state after a (possibly empty) generated prefix."""
    subj = np.asarray(fact_subject_refs, dtype=np.int64)
    pred = np.asarray(fact_pred_indices, dtype=np.int64)
    mentioned = mentioned_entities(prefix.kinds, prefix.refs, subj)
    p, g = _indicator_rows(mentioned, subj, pred, n_predicates, np.float64)
    return IndicatorState(p_ind=p, g_ind=g, mentioned=frozenset(mentioned))


def indicator_matrices(caption: TokenizedCaption, fact_subject_refs, fact_pred_indices,
                       n_predicates: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Per-position indicators for teacher forcing.

    Row t gates the prediction of token t, so it reflects the gold prefix
    strictly before t; row 0 (after BOS) is all zeros.
    """
    length = len(caption) + 1  # BOS plus all gold tokens
    p_mat = np.zeros((length, n_predicates), dtype=dtype)
    g_mat = np.zeros((length, len(fact_subject_refs)), dtype=dtype)
    mentioned: set[int] = set()
    for t in range(length):
        if t > 0:
            kind = caption.kinds[t - 1]
            ref = caption.refs[t - 1]
            if kind == TokenKind.ENTITY:
                mentioned.add(int(ref))
            elif kind == TokenKind.FACT:
                mentioned.add(int(fact_subject_refs[ref]))
        p_mat[t], g_mat[t] = _indicator_rows(
            mentioned, fact_subject_refs, fact_pred_indices, n_predicates, dtype
        )
    return p_mat, g_mat


@dataclass(frozen=True)
class EncoderOutput:
    """Encoder sequence with its (image, geo, fact) section lengths."""

    sequence: np.ndarray
    sections: tuple[int, int, int]


@dataclass(frozen=True)
class HybridDistribution:
    """One normalized distribution over [vocabulary | geo | facts]."""

    probs: np.ndarray
    sections: tuple[int, int, int]

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))


def hybrid_distribution(y_v, y_e=None, y_f=None) -> HybridDistribution:
    """Softmax over the concatenated score sections."""
    parts = []
    sizes = []
    for y in (y_v, y_e, y_f):
        arr = np.zeros(0) if y is None else np.asarray(y, dtype=np.float64).ravel()
        parts.append(arr)
        sizes.append(arr.size)
    scores = np.concatenate(parts)
    if scores.size == 0:
        raise ValueError("cannot build a distribution over zero scores")
    probs = _accel.softmax_rows(scores[None, :])[0]
    return HybridDistribution(probs=probs, sections=tuple(sizes))


def pos_embed(token_vectors: np.ndarray, max_len: int | None = None) -> np.ndarray:
    """Add fixed sinusoidal position encodings to a token vector sequence."""
    vecs = np.asarray(token_vectors)
    if max_len is not None and vecs.shape[0] > max_len:
        raise ConfigError(f"sequence length {vecs.shape[0]} exceeds maximum {max_len}")
    if vecs.shape[0] == 0:
        return vecs.copy()
    return vecs + layers.sinusoidal_positions(vecs.shape[0], vecs.shape[1], vecs.dtype)


class CaptionModel:
    """End-to-end trainable captioner over image, geo and knowledge contexts."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, type_table: np.ndarray,
                 n_predicates: int, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.vocab_size = len(vocab)
        self.n_predicates = n_predicates
        if type_table.shape[1] != config.d_type:
            raise ConfigError(
                f"type embedding width {type_table.shape[1]} does not match "
                f"d - {config.d - config.d_type} = {config.d_type}"
            )
        rng = np.random.default_rng([config.seed, 0])
        d = config.d

        self.vocab_table = ad.parameter(vocab.vectors.astype(self.dtype))
        if type_table.dtype != self.dtype or not type_table.flags["C_CONTIGUOUS"]:
            type_table = np.ascontiguousarray(type_table, dtype=self.dtype)
        self.type_table = ad.parameter(type_table)

        self.img_proj = layers.Linear(config.image_channels, d, rng, self.dtype)
        self.enc_geo = layers.TransformerEncoder(
            config.enc_layers, d, config.heads, config.ff_dim, config.dropout, rng, self.dtype
        )
        if config.has_knowledge:
            self.pred_table = ad.parameter(
                rng.uniform(-0.05, 0.05, size=(n_predicates, d)).astype(self.dtype)
            )
            self.enc_know = layers.TransformerEncoder(
                config.enc_layers, d, config.heads, config.ff_dim, config.dropout, rng, self.dtype
            )
        else:
            self.pred_table = None
            self.enc_know = None
        self.decoder = layers.TransformerDecoder(
            config.dec_layers, d, config.heads, config.ff_dim, config.dropout, rng, self.dtype
        )

        bound = 1.0 / np.sqrt(d)
        self.w_vocab = ad.parameter(
            rng.uniform(-bound, bound, size=(d, self.vocab_size)).astype(self.dtype)
        )
        if config.gates_vocab:
            pred_bound = 1.0 / np.sqrt(max(n_predicates, 1))
            self.w_pred = ad.parameter(
                rng.uniform(-pred_bound, pred_bound, size=(n_predicates, d)).astype(self.dtype)
            )
        else:
            self.w_pred = None
        self.w_geo = ad.parameter(rng.uniform(-bound, bound, size=(d,)).astype(self.dtype))
        if config.has_knowledge:
            self.w_fact = ad.parameter(rng.uniform(-bound, bound, size=(d,)).astype(self.dtype))
        else:
            self.w_fact = None

        self._positions = layers.sinusoidal_positions(
            config.max_caption_len + 1, d, self.dtype
        )
        self._dropout_rng = np.random.default_rng([config.seed, 1])
        self._mask_cache: dict[int, np.ndarray] = {}

    # ------------------------------------------------------------------ setup
    def parameters(self):
        out = [("vocab_table", self.vocab_table), ("type_table", self.type_table)]
        if self.pred_table is not None:
            out.append(("pred_table", self.pred_table))
        out.extend((f"img_proj.{n}", t) for n, t in self.img_proj.parameters())
        out.extend((f"enc_geo.{n}", t) for n, t in self.enc_geo.parameters())
        if self.enc_know is not None:
            out.extend((f"enc_know.{n}", t) for n, t in self.enc_know.parameters())
        out.extend((f"decoder.{n}", t) for n, t in self.decoder.parameters())
        out.append(("w_vocab", self.w_vocab))
        if self.w_pred is not None:
            out.append(("w_pred", self.w_pred))
        out.append(("w_geo", self.w_geo))
        if self.w_fact is not None:
            out.append(("w_fact", self.w_fact))
        return out

    def _mask(self, length: int) -> np.ndarray:
        mask = self._mask_cache.get(length)
        if mask is None:
            mask = layers.causal_mask(length, self.dtype)
            self._mask_cache[length] = mask
        return mask

    # ------------------------------------------------------------- embeddings
    def _context_embeddings(self, s: SampleInput):
        d = self.config.d
        if s.n_geo > 0:
            feats = Tensor(np.ascontiguousarray(s.geo_features, dtype=self.dtype))
            rows = ad.index_rows(self.type_table, s.type_indices)
            emb_g = ad.concat([feats, rows], axis=1)
        else:
            emb_g = Tensor(np.zeros((0, d), dtype=self.dtype))
        emb_k = None
        if self.config.has_knowledge:
            if s.n_fact > 0:
                subject_rows = ad.index_rows(emb_g, s.fact_subject_refs)
                safe = np.maximum(s.fact_pred_indices, 0)
                pred_rows = ad.index_rows(self.pred_table, safe)
                known = (s.fact_pred_indices >= 0).astype(self.dtype)[:, None]
                emb_k = ad.add(subject_rows, ad.mul(pred_rows, Tensor(known)))
            else:
                emb_k = Tensor(np.zeros((0, d), dtype=self.dtype))
        return emb_g, emb_k

    def _encode(self, s: SampleInput, emb_g, emb_k, training: bool, rng):
        img = self.img_proj(Tensor(np.ascontiguousarray(s.image_features, dtype=self.dtype)))
        parts = [img]
        if emb_g.data.shape[0] > 0:
            parts.append(self.enc_geo(emb_g, training, rng))
        if emb_k is not None and emb_k.data.shape[0] > 0:
            parts.append(self.enc_know(emb_k, training, rng))
        return ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]

    def _token_table(self, emb_g, emb_k):
        parts = [self.vocab_table, emb_g]
        if emb_k is not None:
            parts.append(emb_k)
        return ad.concat(parts, axis=0)

    def _decode(self, input_indices, table, enc_out, training: bool, rng):
        length = len(input_indices)
        x = ad.add(ad.index_rows(table, input_indices), Tensor(self._positions[:length]))
        return self.decoder(x, enc_out, self._mask(length), training, rng)

    def _score_sections(self, h, emb_g, emb_k, p_ind, g_ind):
        """Eq-style hybrid scores; returns (vocab, geo, fact) score tensors."""
        if self.config.gates_vocab:
            pmod = ad.matmul(Tensor(np.ascontiguousarray(p_ind, dtype=self.dtype)), self.w_pred)
            y_v = ad.matmul(ad.mul(h, pmod), self.w_vocab)
        else:
            y_v = ad.matmul(h, self.w_vocab)
        y_e = None
        if emb_g.data.shape[0] > 0:
            y_e = ad.matmul(ad.mul(h, self.w_geo), ad.swapaxes(emb_g, 0, 1))
        y_f = None
        if emb_k is not None and emb_k.data.shape[0] > 0:
            y_f = ad.matmul(ad.mul(h, self.w_fact), ad.swapaxes(emb_k, 0, 1))
            if self.config.gates_facts:
                y_f = ad.mul(y_f, Tensor(np.ascontiguousarray(g_ind, dtype=self.dtype)))
        return y_v, y_e, y_f

    # ---------------------------------------------------------------- training
    def teacher_loss(self, s: SampleInput, training: bool = False) -> Tensor:
        """Mean cross entropy of the gold hybrid indices under teacher forcing."""
        if len(s.input_indices) == 0:
            raise ValueError(f"sample {s.image_id} has no teacher-forcing sequence")
        rng = self._dropout_rng if training else None
        emb_g, emb_k = self._context_embeddings(s)
        enc = self._encode(s, emb_g, emb_k, training, rng)
        table = self._token_table(emb_g, emb_k)
        h = self._decode(s.input_indices, table, enc, training, rng)
        y_v, y_e, y_f = self._score_sections(h, emb_g, emb_k, s.p_ind, s.g_ind)
        cols = [y for y in (y_v, y_e, y_f) if y is not None]
        scores = ad.concat(cols, axis=1) if len(cols) > 1 else cols[0]
        log_probs = ad.log_softmax_last(scores)
        picked = ad.take_per_row(log_probs, s.targets)
        return ad.scale(ad.mean_all(picked), -1.0)

    # -------------------------------------------------------------- generation
    def generate(self, s: SampleInput, vocab: Vocabulary, max_len: int | None = None) -> TokenizedCaption:
        """Greedy decoding from BOS; indicators are refreshed after every token."""
        cfg = self.config
        limit = min(max_len or cfg.max_caption_len, cfg.max_caption_len)
        with ad.no_grad():
            emb_g, emb_k = self._context_embeddings(s)
            enc = self._encode(s, emb_g, emb_k, training=False, rng=None)
            table = self._token_table(emb_g, emb_k)
            n_geo = emb_g.data.shape[0]
            n_fact = emb_k.data.shape[0] if emb_k is not None else 0
            tokens: list[str] = []
            kinds: list[int] = []
            refs: list[int] = []
            mentioned: set[int] = set()
            indices = [Vocabulary.BOS]
            for _ in range(limit):
                p_row, g_row = _indicator_rows(
                    mentioned, s.fact_subject_refs, s.fact_pred_indices,
                    self.n_predicates, self.dtype,
                )
                h = self._decode(np.asarray(indices, dtype=np.int64), table, enc, False, None)
                h_last = ad.index_rows(h, [len(indices) - 1])
                y_v, y_e, y_f = self._score_sections(
                    h_last, emb_g, emb_k, p_row[None, :], g_row[None, :]
                )
                dist = hybrid_distribution(
                    y_v.data[0],
                    None if y_e is None else y_e.data[0],
                    None if y_f is None else y_f.data[0],
                )
                choice = dist.argmax
                if choice < self.vocab_size:
                    if choice == Vocabulary.EOS:
                        break
                    tokens.append(vocab.tokens[choice])
                    kinds.append(TokenKind.VOCAB)
                    refs.append(choice)
                elif choice < self.vocab_size + n_geo:
                    ref = choice - self.vocab_size
                    tokens.append(s.geo_names[ref])
                    kinds.append(TokenKind.ENTITY)
                    refs.append(ref)
                    mentioned.add(ref)
                else:
                    ref = choice - self.vocab_size - n_geo
                    tokens.append(s.fact_objects[ref])
                    kinds.append(TokenKind.FACT)
                    refs.append(ref)
                    mentioned.add(int(s.fact_subject_refs[ref]))
                indices.append(choice)
        return TokenizedCaption(tuple(tokens), tuple(kinds), tuple(refs))

    # ------------------------------------------------------------- inspection
    def encode_contexts(self, s: SampleInput) -> EncoderOutput:
        """Concatenated image/geo/knowledge encoding with section lengths."""
        with ad.no_grad():
            emb_g, emb_k = self._context_embeddings(s)
            enc = self._encode(s, emb_g, emb_k, training=False, rng=None)
        n_fact = emb_k.data.shape[0] if emb_k is not None else 0
        return EncoderOutput(
            sequence=enc.data,
            sections=(s.image_features.shape[0], emb_g.data.shape[0], n_fact),
        )

    def context_embedding_arrays(self, s: SampleInput):
        """Current geo and fact embedding matrices as plain arrays."""
        with ad.no_grad():
            emb_g, emb_k = self._context_embeddings(s)
        return emb_g.data, None if emb_k is None else emb_k.data

    def token_embedding(self, s: SampleInput, kind: int, ref: int) -> np.ndarray:
        """Embedding routed by token kind: vocab row, geo row or fact row."""
        emb_g, emb_k = self.context_embedding_arrays(s)
        if kind == TokenKind.VOCAB:
            source = self.vocab_table.data
        elif kind == TokenKind.ENTITY:
            source = emb_g
        elif kind == TokenKind.FACT:
            if emb_k is None:
                raise ValueError(f"variant {self.config.variant} has no fact embeddings")
            source = emb_k
        else:
            raise ValueError(f"unknown token kind {kind}")
        if not 0 <= ref < source.shape[0]:
            raise ValueError(f"dangling token reference {ref} for kind {kind}")
        return source[ref]

    def decode_step(self, prefix_embeddings: np.ndarray, encoder_sequence: np.ndarray) -> np.ndarray:
        """Final-layer decoder state at the last prefix position."""
        with ad.no_grad():
            x = Tensor(np.ascontiguousarray(prefix_embeddings, dtype=self.dtype))
            memory = Tensor(np.ascontiguousarray(encoder_sequence, dtype=self.dtype))
            h = self.decoder(x, memory, self._mask(x.data.shape[0]), False, None)
        return h.data[-1]

    def hybrid_scores(self, h_t: np.ndarray, emb_g: np.ndarray, emb_k: np.ndarray | None,
                      p_ind: np.ndarray | None = None, g_ind: np.ndarray | None = None):
        """Score sections for one decoder state (arrays in, arrays out)."""
        if p_ind is None:
            p_ind = np.zeros(self.n_predicates)
        if g_ind is None:
            g_ind = np.zeros(0 if emb_k is None else emb_k.shape[0])
        with ad.no_grad():
            y_v, y_e, y_f = self._score_sections(
                Tensor(np.ascontiguousarray(h_t, dtype=self.dtype)[None, :]),
                Tensor(np.ascontiguousarray(emb_g, dtype=self.dtype)),
                None if emb_k is None else Tensor(np.ascontiguousarray(emb_k, dtype=self.dtype)),
                np.asarray(p_ind)[None, :],
                np.asarray(g_ind)[None, :],
            )
        return (
            y_v.data[0],
            None if y_e is None else y_e.data[0],
            None if y_f is None else y_f.data[0],
        )
