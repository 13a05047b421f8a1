"""Caption quality metrics and the rule-based fact checker.

BLEU, ROUGE-L and CIDEr follow their standard corpus definitions (scores
scaled to 0-100). METEOR is a simplified exact+stem unigram alignment with
the usual fragmentation penalty; the simplification is stated in every
report. Fact accuracy checks each generated fact against the image's
contexts with three rules: the subject must be in the geographic context,
the subject's name must be mentioned, and a predicate-specific trigger
phrase must appear shortly before the fact token. A surface-matching
variant of the same rules scores caption text without fact-token metadata,
which makes context-free baselines comparable. The random-fact transform
replaces generated facts with type-preserving random picks from the same
knowledge context.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import TokenizedCaption, TokenKind
from .errors import DataFormatError

METEOR_NOTE = (
    "METEOR here is a simplified exact+stem unigram alignment with a "
    "fragmentation penalty, not the reference tool"
)


# ---------------------------------------------------------------------------
# n-gram metrics


def _require_corpus(candidates, references):
    if len(candidates) == 0:
        raise DataFormatError("empty corpus: no candidate/reference pairs to score")
    if len(candidates) != len(references):
        raise DataFormatError(
            f"corpus size mismatch: {len(candidates)} candidates, {len(references)} references"
        )


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, n: int = 4) -> float:
    """Corpus BLEU-n with uniform weights and brevity penalty, 0-100."""
    _require_corpus(candidates, references)
    if n < 1:
        raise ValueError("bleu order must be >= 1")
    matched = [0] * n
    total = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for k in range(1, n + 1):
            cg = _ngrams(cand, k)
            rg = _ngrams(ref, k)
            matched[k - 1] += sum(min(c, rg[g]) for g, c in cg.items())
            total[k - 1] += max(0, len(cand) - k + 1)
    if any(t == 0 for t in total) or any(m == 0 for m in matched):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    if cand_len > ref_len:
        brevity = 1.0
    elif cand_len == 0:
        return 0.0
    else:
        brevity = math.exp(1.0 - ref_len / cand_len)
    return 100.0 * brevity * math.exp(log_precision)


def _lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        ai = a[i - 1]
        for j in range(1, len(b) + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l_scores(candidates, references, beta: float = 1.2) -> list[float]:
    """Per-sample ROUGE-L F scores in [0, 1]."""
    _require_corpus(candidates, references)
    scores = []
    for cand, ref in zip(candidates, references):
        lcs = _lcs_length(list(cand), list(ref))
        if lcs == 0 or not cand or not ref:
            scores.append(0.0)
            continue
        precision = lcs / len(cand)
        recall = lcs / len(ref)
        scores.append(
            (1 + beta**2) * precision * recall / (recall + beta**2 * precision)
        )
    return scores


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    return 100.0 * float(np.mean(rouge_l_scores(candidates, references, beta)))


def cider_scores(candidates, references, n: int = 4, sigma: float = 6.0) -> list[float]:
    """Per-sample CIDEr scores in [0, 1].

    TF-IDF n-gram vectors (n = 1..4) with document frequencies from the
    reference corpus, clipped cosine similarity and a Gaussian length
    penalty with width ``sigma``.
    """
    _require_corpus(candidates, references)
    num_docs = len(references)
    doc_freq = [Counter() for _ in range(n)]
    for ref in references:
        for k in range(1, n + 1):
            for gram in _ngrams(ref, k):
                doc_freq[k - 1][gram] += 1
    log_n = math.log(num_docs)

    def tfidf(tokens):
        vecs = []
        norms = []
        for k in range(1, n + 1):
            counts = _ngrams(tokens, k)
            vec = {
                g: c * (log_n - math.log(max(1.0, doc_freq[k - 1][g])))
                for g, c in counts.items()
            }
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    scores = []
    for cand, ref in zip(candidates, references):
        cv, cn = tfidf(cand)
        rv, rn = tfidf(ref)
        delta = float(len(cand) - len(ref))
        penalty = math.exp(-(delta**2) / (2.0 * sigma**2))
        sims = []
        for k in range(n):
            if cn[k] == 0.0 or rn[k] == 0.0:
                sims.append(0.0)
                continue
            overlap = sum(min(v, rv[k].get(g, 0.0)) * rv[k].get(g, 0.0) for g, v in cv[k].items())
            sims.append(penalty * overlap / (cn[k] * rn[k]))
        scores.append(float(np.mean(sims)))
    return scores


def cider(candidates, references, n: int = 4, sigma: float = 6.0) -> float:
    return 100.0 * float(np.mean(cider_scores(candidates, references, n, sigma)))


_STEM_SUFFIXES = ("ing", "ed", "es", "ly", "s")


def _stem(token: str) -> str:
    for suffix in _STEM_SUFFIXES:
        if token.endswith(suffix) and len(token) > len(suffix) + 2:
            return token[: -len(suffix)]
    return token


def _align_meteor(cand, ref):
    pairs = []
    used = [False] * len(ref)
    taken = [False] * len(cand)
    for exact in (True, False):
        for i, tok in enumerate(cand):
            if taken[i]:
                continue
            key = tok if exact else _stem(tok)
            for j, rtok in enumerate(ref):
                if used[j]:
                    continue
                if key == (rtok if exact else _stem(rtok)):
                    pairs.append((i, j))
                    used[j] = True
                    taken[i] = True
                    break
    pairs.sort()
    return pairs


def meteor_scores(candidates, references, alpha=0.9, beta=3.0, gamma=0.5) -> list[float]:
    """Per-sample simplified METEOR scores in [0, 1]."""
    _require_corpus(candidates, references)
    scores = []
    for cand, ref in zip(candidates, references):
        pairs = _align_meteor(list(cand), list(ref))
        m = len(pairs)
        if m == 0 or not cand or not ref:
            scores.append(0.0)
            continue
        precision = m / len(cand)
        recall = m / len(ref)
        f_mean = precision * recall / (alpha * precision + (1 - alpha) * recall)
        chunks = 1
        for (ci, ri), (cj, rj) in zip(pairs, pairs[1:]):
            if cj != ci + 1 or rj != ri + 1:
                chunks += 1
        penalty = gamma * (chunks / m) ** beta
        scores.append(f_mean * (1.0 - penalty))
    return scores


def meteor_simplified(candidates, references) -> float:
    return 100.0 * float(np.mean(meteor_scores(candidates, references)))


# ---------------------------------------------------------------------------
# fact checking


@dataclass(frozen=True)
class EvalFact:
    subject_ref: int
    subject_id: str
    subject_name: str
    predicate: str
    object_label: str


@dataclass(frozen=True)
class EvalContext:
    """Per-image context snapshot used by the fact metrics."""

    image_id: str
    entity_ids: tuple[str, ...]
    entity_names: tuple[str, ...]
    facts: tuple[EvalFact, ...]


def load_lexicon(path) -> dict[str, tuple[str, ...]]:
    """Read ``predicate<TAB>phrase`` lines mapping predicates to triggers."""
    table: dict[str, list[str]] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read lexicon file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 2 tab-separated fields, got {len(parts)}"
                )
            predicate, phrase = parts[0].strip().lower(), parts[1].strip().lower()
            if not predicate or not phrase:
                raise DataFormatError(f"{path}:{lineno}: empty predicate or phrase")
            table.setdefault(predicate, [])
            if phrase not in table[predicate]:
                table[predicate].append(phrase)
    return {k: tuple(v) for k, v in table.items()}


@dataclass(frozen=True)
class FactVerdict:
    image_id: str
    position: int
    subject_name: str
    predicate: str
    object_label: str
    correct: bool
    lexicon_waived: bool = False
    surface: bool = False


@dataclass
class FactAccuracyReport:
    generated: int = 0
    correct: int = 0
    waived: int = 0
    verdicts: list[FactVerdict] = field(default_factory=list)

    @property
    def percentage(self):
        """Percent correct, or None when no facts were generated."""
        if self.generated == 0:
            return None
        return 100.0 * self.correct / self.generated


FACT_WINDOW = 5


def _phrase_in_window(phrase: str, window_tokens, window_kinds, vocab_only: bool) -> bool:
    words = phrase.split()
    for start in range(len(window_tokens) - len(words) + 1):
        if list(window_tokens[start : start + len(words)]) != words:
            continue
        if vocab_only and any(
            k != TokenKind.VOCAB for k in window_kinds[start : start + len(words)]
        ):
            continue
        return True
    return False


def _trigger_near(lexicon, predicate, tokens, kinds, position, vocab_only):
    """(satisfied, waived) for rule (c) at a fact emitted at ``position``."""
    phrases = lexicon.get(predicate)
    if not phrases:
        return True, True
    lo = max(0, position - FACT_WINDOW)
    window_tokens = tokens[lo:position]
    window_kinds = kinds[lo:position]
    for phrase in phrases:
        if _phrase_in_window(phrase, window_tokens, window_kinds, vocab_only):
            return True, False
    return False, False


def fact_accuracy(generated, contexts, lexicon) -> FactAccuracyReport:
    """Check every FACT token of every caption against its image context.

    ``generated`` is an iterable of (image_id, TokenizedCaption); contexts
    maps image ids to :class:`EvalContext`. A fact is correct when its
    subject is in the geographic context, its subject's name occurs among
    the caption's ENTITY tokens, and one of its predicate's trigger phrases
    occurs in the VOCAB tokens of the 5 positions before the fact. Missing
    lexicon entries waive the trigger rule and are flagged.
    """
    report = FactAccuracyReport()
    for image_id, tc in generated:
        ctx = contexts[image_id]
        entity_mentions = {
            tok for tok, kind in zip(tc.tokens, tc.kinds) if kind == TokenKind.ENTITY
        }
        for t, (kind, ref) in enumerate(zip(tc.kinds, tc.refs)):
            if kind != TokenKind.FACT:
                continue
            fact = ctx.facts[ref]
            subject_known = fact.subject_id in ctx.entity_ids
            subject_mentioned = fact.subject_name in entity_mentions
            triggered, waived = _trigger_near(
                lexicon, fact.predicate, tc.tokens, tc.kinds, t, vocab_only=True
            )
            correct = subject_known and subject_mentioned and triggered
            report.generated += 1
            report.correct += int(correct)
            report.waived += int(waived)
            report.verdicts.append(
                FactVerdict(
                    image_id=image_id,
                    position=t,
                    subject_name=fact.subject_name,
                    predicate=fact.predicate,
                    object_label=fact.object_label,
                    correct=correct,
                    lexicon_waived=waived,
                )
            )
    return report


def _find_spans(words, labels):
    """Non-overlapping longest matches of any label in a word sequence."""
    by_first: dict[str, list[tuple[int, tuple[str, ...]]]] = {}
    for label in labels:
        parts = tuple(label.split())
        if parts:
            by_first.setdefault(parts[0], []).append((-len(parts), parts))
    for options in by_first.values():
        options.sort()
    spans = []
    i = 0
    while i < len(words):
        matched = None
        for _neg, parts in by_first.get(words[i], ()):
            if tuple(words[i : i + len(parts)]) == parts:
                matched = parts
                break
        if matched is None:
            i += 1
        else:
            spans.append((i, " ".join(matched)))
            i += len(matched)
    return spans


def surface_fact_accuracy(generated, contexts, lexicon) -> FactAccuracyReport:
    """Text-level fact checking over the flattened word sequence.

    Any maximal word span equal to a context fact's object label counts as
    a generated fact; it is correct when some fact with that label has its
    subject named somewhere in the caption and a trigger phrase of its
    predicate within the 5 words before the span. Works for captions
    without fact-token metadata (context-free baselines).
    """
    report = FactAccuracyReport()
    for image_id, tc in generated:
        ctx = contexts[image_id]
        words = tc.surface_tokens()
        labels = {f.object_label for f in ctx.facts}
        for start, label in _find_spans(words, labels):
            candidates = [f for f in ctx.facts if f.object_label == label]
            correct = False
            waived_any = False
            for fact in candidates:
                if fact.subject_id not in ctx.entity_ids:
                    continue
                name_parts = fact.subject_name.split()
                named = any(
                    words[i : i + len(name_parts)] == name_parts
                    for i in range(len(words) - len(name_parts) + 1)
                )
                if not named:
                    continue
                kinds = [TokenKind.VOCAB] * len(words)
                triggered, waived = _trigger_near(
                    lexicon, fact.predicate, words, kinds, start, vocab_only=False
                )
                if triggered:
                    correct = True
                    waived_any = waived_any or waived
                    break
            report.generated += 1
            report.correct += int(correct)
            report.waived += int(waived_any)
            report.verdicts.append(
                FactVerdict(
                    image_id=image_id,
                    position=start,
                    subject_name=candidates[0].subject_name if candidates else "",
                    predicate=candidates[0].predicate if candidates else "",
                    object_label=label,
                    correct=correct,
                    lexicon_waived=waived_any,
                    surface=True,
                )
            )
    return report


# ---------------------------------------------------------------------------
# random-fact perturbation


def _label_class(label: str) -> str:
    return "year" if label.isdigit() and 3 <= len(label) <= 4 else "name"


def random_fact_baseline(generated, contexts, seed: int):
    """Replace each FACT token with a same-class random context fact.

    Sampling is uniform over the knowledge-context facts whose object label
    has the same type class (year-like vs name-like, by an all-digit 3-4
    character test) and is deterministic in ``seed``. Tokens with no
    same-class candidate are left unchanged and counted.
    """
    rng = np.random.default_rng(seed)
    perturbed = []
    unchanged = 0
    for image_id, tc in generated:
        ctx = contexts[image_id]
        tokens = list(tc.tokens)
        refs = list(tc.refs)
        for t, kind in enumerate(tc.kinds):
            if kind != TokenKind.FACT:
                continue
            cls = _label_class(ctx.facts[refs[t]].object_label)
            pool = [j for j, f in enumerate(ctx.facts) if _label_class(f.object_label) == cls]
            if not pool:
                unchanged += 1
                continue
            choice = pool[int(rng.integers(len(pool)))]
            tokens[t] = ctx.facts[choice].object_label
            refs[t] = choice
        perturbed.append((image_id, replace(tc, tokens=tuple(tokens), refs=tuple(refs))))
    return perturbed, unchanged


# ---------------------------------------------------------------------------
# paired significance helper


def paired_ttest(per_sample_a, per_sample_b):
    """Welch two-sample t-test over per-sample metric values."""
    from scipy import stats

    result = stats.ttest_ind(per_sample_a, per_sample_b, equal_var=False)
    return float(result.statistic), float(result.pvalue)
