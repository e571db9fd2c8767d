"""Analogy and retrieval evaluation for sequence embedders.

Analogy questions A : B :: C : ? are answered by vector arithmetic:
the candidate maximizing cosine(c + b - a, d) wins.  The same machinery
evaluates words, phrases, and sentences — an embedder is just a
function text -> unit vector, whether it averages static word vectors
or pools transformer states.  Retrieval ranks a corpus by cosine
against each query and scores Top-k accuracy, with an Okapi BM25
baseline for a non-embedding reference point.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import CLS_ID, PAD_ID, SEP_ID, Vocabulary, encode, tokenize
from .encoder import POOLING_STRATEGIES, Model, forward, load_checkpoint, pad_batch, pool

UNIT_NORM_ATOL = 1e-6
_EPS = 1e-12

#: Categories scored on the syntactic side of the report; everything
#: else (and any ``gram*`` prefix, for externally formatted files)
#: counts as semantic unless listed here.
SYNTACTIC_CATEGORIES = frozenset(
    {"present-participle", "positive-comparative", "positive-negative"}
)

#: Currency analogies are skipped by template expansion: bag-of-words
#: baselines already fail them at word level, so the expanded variants
#: measure nothing.
EXPANSION_EXCLUDED_CATEGORIES = frozenset({"currency", "country-currency"})

Embedder = Callable[[str], np.ndarray]


def is_syntactic(category: str) -> bool:
    return category in SYNTACTIC_CATEGORIES or category.startswith("gram")


@dataclass(frozen=True)
class AnalogyQuestion:
    """A : B :: C : ? with a closed candidate list."""

    category: str
    a: str
    b: str
    c: str
    candidates: tuple[str, ...]
    answer_index: int

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.candidates:
            raise ValueError("candidates must be non-empty")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("candidates must be distinct")
        if not 0 <= self.answer_index < len(self.candidates):
            raise ValueError(
                f"answer_index {self.answer_index} outside candidates "
                f"(n={len(self.candidates)})"
            )

    @property
    def answer(self) -> str:
        return self.candidates[self.answer_index]


@dataclass(frozen=True)
class RetrievalSet:
    """A paraphrase-retrieval task: an id'd corpus plus gold-labelled queries."""

    corpus: tuple[tuple[str, str], ...]
    queries: tuple[tuple[str, frozenset[str]], ...]

    def __post_init__(self):
        object.__setattr__(self, "corpus", tuple((i, t) for i, t in self.corpus))
        object.__setattr__(
            self, "queries", tuple((t, frozenset(g)) for t, g in self.queries)
        )
        ids = [i for i, _ in self.corpus]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate corpus ids")
        known = set(ids)
        for qi, (_, gold) in enumerate(self.queries):
            if not gold:
                raise ValueError(f"missing gold set for query {qi}")
            if not gold <= known:
                raise ValueError(
                    f"query {qi} references unknown gold ids {sorted(gold - known)}"
                )


# ---------------------------------------------------------------------------
# embedders


def _unit(v: np.ndarray, context: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm < _EPS:
        raise ValueError(f"degenerate embedding for {context}")
    return v / norm


class WordVectorEmbedder:
    """Bag-of-words baseline: average static word vectors, unit-normalized.

    Tokens missing from the vector table are skipped; a text with no
    known tokens cannot be embedded.  The token order of the source
    table is preserved and exposed as ``vocabulary`` so the same object
    can serve as the reference for candidate construction.
    """

    def __init__(self, vectors: Mapping[str, np.ndarray]):
        if not vectors:
            raise ValueError("empty word-vector table")
        self._vectors: dict[str, np.ndarray] = {}
        dim = None
        for token, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1:
                raise ValueError(f"vector for {token!r} is not 1-d")
            if dim is None:
                dim = arr.shape[0]
            elif arr.shape[0] != dim:
                raise ValueError(
                    f"vector for {token!r} has dimension {arr.shape[0]}, expected {dim}"
                )
            self._vectors[token] = arr
        self._dim = dim

    @classmethod
    def from_file(cls, path: str | Path) -> "WordVectorEmbedder":
        return cls(read_word_vectors(path))

    @property
    def dimension(self) -> int:
        return self._dim

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return tuple(self._vectors)

    def token_vector(self, token: str) -> np.ndarray | None:
        return self._vectors.get(token)

    def __call__(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise ValueError(f"cannot embed empty text {text!r}")
        known = [self._vectors[t] for t in tokens if t in self._vectors]
        if not known:
            raise ValueError(f"no known tokens in text {text!r}")
        return _unit(np.mean(known, axis=0), f"text {text!r}")


class ModelEmbedder:
    """Embed texts with an encoder checkpoint and a pooling strategy.

    Texts are tokenized with the supplied vocabulary, framed with the
    sequence delimiters, truncated to fit the model's maximum length
    (with a warning), pooled, and unit-normalized.
    """

    def __init__(self, model: Model, vocab: Vocabulary, pooling: str = "mean"):
        if pooling not in POOLING_STRATEGIES:
            raise ValueError(
                f"unknown pooling strategy {pooling!r}; expected one of {POOLING_STRATEGIES}"
            )
        self.model = model
        self.vocab = vocab
        self.pooling = pooling

    @classmethod
    def from_checkpoint(
        cls, path: str | Path, vocab: Vocabulary, pooling: str = "mean"
    ) -> "ModelEmbedder":
        return cls(load_checkpoint(path), vocab, pooling)

    @property
    def dimension(self) -> int:
        return self.model.config.d_model

    def _framed_ids(self, text: str) -> list[int]:
        tokens = tokenize(text)
        if not tokens:
            raise ValueError(f"cannot embed empty text {text!r}")
        ids = list(encode(tokens, self.vocab).ids)
        limit = self.model.config.max_len - 2
        if len(ids) > limit:
            warnings.warn(
                f"truncating sequence of {len(ids)} tokens to max_len-2 = {limit}",
                stacklevel=3,
            )
            ids = ids[:limit]
        return [CLS_ID] + ids + [SEP_ID]

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        framed = [self._framed_ids(t) for t in texts]
        ids, mask = pad_batch(framed, pad_id=PAD_ID)
        hidden, _ = forward(self.model.params, self.model.config, ids, mask, train=False)
        pooled = pool(hidden, mask, self.pooling, self.model.params)
        return np.stack(
            [_unit(row, f"text {texts[i]!r}") for i, row in enumerate(pooled)]
        )

    def __call__(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


# ---------------------------------------------------------------------------
# analogy


def answer_analogy(question: AnalogyQuestion, embedder: Embedder) -> int:
    """Predicted candidate index: argmax cosine(c + b - a, d).

    Ties break to the lowest index.  A degenerate zero target vector
    (possible when a = c + b up to normalization) makes every cosine
    undefined; the tie rule then applies to all candidates, with a
    warning.
    """
    va = _unit(embedder(question.a), f"text {question.a!r}")
    vb = _unit(embedder(question.b), f"text {question.b!r}")
    vc = _unit(embedder(question.c), f"text {question.c!r}")
    target = vc + vb - va
    norm = float(np.linalg.norm(target))
    if norm < _EPS:
        warnings.warn(
            "degenerate zero target vector; falling back to lowest candidate index"
        )
        return 0
    target = target / norm
    scores = [float(target @ _unit(embedder(d), f"text {d!r}")) for d in question.candidates]
    return int(np.argmax(scores))


@dataclass(frozen=True)
class CategoryResult:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total


@dataclass(frozen=True)
class AnalogyReport:
    """Per-category counts plus the semantic/syntactic/average rollup.

    Aggregates are micro-averages (total correct over total questions
    on each side).  A side with no questions is reported as None, and
    the overall average is the mean of the sides that exist.
    """

    per_category: dict[str, CategoryResult]

    def _side(self, syntactic: bool) -> CategoryResult | None:
        correct = total = 0
        for cat, res in self.per_category.items():
            if is_syntactic(cat) == syntactic:
                correct += res.correct
                total += res.total
        if total == 0:
            return None
        return CategoryResult(correct, total)

    @property
    def semantic(self) -> CategoryResult | None:
        return self._side(False)

    @property
    def syntactic(self) -> CategoryResult | None:
        return self._side(True)

    @property
    def average(self) -> float | None:
        sides = [s.accuracy for s in (self.semantic, self.syntactic) if s is not None]
        if not sides:
            return None
        return sum(sides) / len(sides)


def evaluate_analogy(
    questions: Sequence[AnalogyQuestion], embedder: Embedder
) -> AnalogyReport:
    """Accuracy per category; empty categories are absent, never 0."""
    counts: dict[str, list[int]] = {}
    for q in questions:
        correct, total = counts.setdefault(q.category, [0, 0])
        predicted = answer_analogy(q, embedder)
        counts[q.category][0] += int(predicted == q.answer_index)
        counts[q.category][1] += 1
    return AnalogyReport(
        per_category={c: CategoryResult(v[0], v[1]) for c, v in counts.items()}
    )


def build_candidates(
    a: str,
    b: str,
    c: str,
    gold: str,
    reference_embedder,
    k: int = 5,
    vocabulary: Sequence[str] | None = None,
) -> list[str]:
    """Negative-sample a candidate list: the k nearest neighbours of the
    analogy target, with the gold answer forced in.

    The reference embedder supplies the finite candidate vocabulary
    (``vocabulary`` attribute) unless one is passed explicitly.  The
    question's own a, b, c are excluded; if the gold answer misses the
    top k, it replaces the last candidate.
    """
    if vocabulary is None:
        vocabulary = getattr(reference_embedder, "vocabulary", None)
        if vocabulary is None:
            raise TypeError("reference embedder exposes no candidate vocabulary")
    pool_texts = [t for t in vocabulary if t not in (a, b, c)]
    if len(pool_texts) < k:
        raise ValueError(
            f"vocabulary of {len(pool_texts)} candidates is smaller than k={k}"
        )
    if gold not in pool_texts:
        raise ValueError(f"gold answer {gold!r} not in candidate vocabulary")
    va = _unit(reference_embedder(a), f"text {a!r}")
    vb = _unit(reference_embedder(b), f"text {b!r}")
    vc = _unit(reference_embedder(c), f"text {c!r}")
    target = vc + vb - va
    scores = np.array(
        [float(target @ _unit(reference_embedder(t), f"text {t!r}")) for t in pool_texts]
    )
    order = np.argsort(-scores, kind="stable")
    top = [pool_texts[i] for i in order[:k]]
    if gold not in top:
        top[-1] = gold
    return top


TEMPLATE_SLOT = "{X}"


def _synonym_variant(template: str, synonyms: Mapping[str, str]) -> str:
    out = template
    for phrase, replacement in synonyms.items():
        out = out.replace(phrase, replacement)
    return out


def expand_templates(
    pairs: Sequence[tuple[str, str]],
    templates: Sequence[str],
    synonyms: Mapping[str, str],
    category: str,
    num_candidates: int = 5,
) -> list[AnalogyQuestion]:
    """Lift word pairs into phrase/sentence analogy questions.

    For every ordered pair of pairs (A, B) and (C, D) and every
    template, the A and C slots use the plain template while the B and
    D slots (and all candidates) use the synonym-substituted variant —
    so a bag-of-words model cannot win on lexical overlap between the
    question and answer sides.  Distractors are drawn from the other
    pairs' answer words; candidates are sorted lexicographically.

    Currency categories are excluded (empty result, with a warning).
    """
    if category in EXPANSION_EXCLUDED_CATEGORIES:
        warnings.warn(f"category {category!r} is excluded from template expansion")
        return []
    for t in templates:
        if t.count(TEMPLATE_SLOT) != 1:
            raise ValueError(f"template must contain exactly one {TEMPLATE_SLOT} slot: {t!r}")
    if not synonyms:
        warnings.warn(
            "empty synonym map: question and answer variants will be identical"
        )
    questions = []
    for i, (word_a, word_b) in enumerate(pairs):
        for j, (word_c, word_d) in enumerate(pairs):
            if i == j:
                continue
            distractors = []
            for pi, (_, other) in enumerate(pairs):
                if other not in (word_b, word_d) and other not in distractors:
                    distractors.append(other)
            distractors = distractors[: num_candidates - 1]
            for template in templates:
                variant = _synonym_variant(template, synonyms)
                gold_text = variant.replace(TEMPLATE_SLOT, word_d)
                cand_texts = sorted(
                    [variant.replace(TEMPLATE_SLOT, w) for w in distractors]
                    + [gold_text]
                )
                questions.append(
                    AnalogyQuestion(
                        category=category,
                        a=template.replace(TEMPLATE_SLOT, word_a),
                        b=variant.replace(TEMPLATE_SLOT, word_b),
                        c=template.replace(TEMPLATE_SLOT, word_c),
                        candidates=tuple(cand_texts),
                        answer_index=cand_texts.index(gold_text),
                    )
                )
    return questions


def question_length_stats(questions: Sequence[AnalogyQuestion]) -> dict[str, float]:
    """Token-count statistics over every text in a question set."""
    lengths = []
    for q in questions:
        for text in (q.a, q.b, q.c, *q.candidates):
            lengths.append(len(tokenize(text)))
    if not lengths:
        return {"n_questions": 0, "mean_tokens": 0.0, "max_tokens": 0}
    return {
        "n_questions": len(questions),
        "mean_tokens": float(np.mean(lengths)),
        "max_tokens": int(max(lengths)),
    }


# ---------------------------------------------------------------------------
# retrieval


def embed_corpus(texts: Sequence[str], embedder: Embedder) -> np.ndarray:
    """Stack embedder outputs row by row; every row comes out unit-norm."""
    if len(texts) == 0:
        raise ValueError("cannot embed an empty corpus")
    rows = []
    for i, text in enumerate(texts):
        if not tokenize(text):
            raise ValueError(f"cannot embed empty text at index {i}")
        rows.append(_unit(embedder(text), f"text at index {i}"))
    return np.stack(rows)


def retrieve_topk(
    query_vec: np.ndarray,
    corpus_matrix: np.ndarray,
    k: int,
    ids: Sequence | None = None,
):
    """Top-k corpus ids by cosine similarity; ties break by ascending id."""
    n = corpus_matrix.shape[0]
    if k > n:
        raise ValueError(f"k ({k}) exceeds corpus size ({n})")
    if ids is None:
        ids = list(range(n))
    if len(ids) != n:
        raise ValueError("ids length must match corpus size")
    query_vec = np.asarray(query_vec, dtype=np.float64)
    qnorm = float(np.linalg.norm(query_vec))
    if qnorm >= _EPS:
        query_vec = query_vec / qnorm
    row_norms = np.linalg.norm(corpus_matrix, axis=1)
    safe = np.where(row_norms < _EPS, 1.0, row_norms)
    scores = (corpus_matrix @ query_vec) / safe
    id_arr = np.array(ids)
    order = np.lexsort((id_arr, -scores))
    return [ids[i] for i in order[:k]]


def topk_accuracy(
    rankings: Sequence[Sequence],
    gold_sets: Sequence[set],
    ks: Sequence[int] = (1, 5, 10),
) -> dict[int, float]:
    """Fraction of queries with any gold id inside the top k."""
    if len(rankings) != len(gold_sets):
        raise ValueError(
            f"missing gold set: {len(rankings)} rankings vs {len(gold_sets)} gold sets"
        )
    for i, gold in enumerate(gold_sets):
        if not gold:
            raise ValueError(f"missing gold set for query {i}")
    out = {}
    for k in ks:
        hits = sum(
            1 for ranking, gold in zip(rankings, gold_sets)
            if any(r in gold for r in ranking[:k])
        )
        out[k] = hits / len(rankings)
    return out


def topk_accuracy_by_group(
    rankings: Sequence[Sequence],
    gold_sets: Sequence[set],
    groups: Sequence,
    ks: Sequence[int] = (1, 5, 10),
) -> dict[str, dict[int, float]]:
    """Top-k accuracy computed separately per query group label."""
    if len(groups) != len(rankings):
        raise ValueError("groups length must match rankings")
    out = {}
    for label in sorted(set(str(g) for g in groups), key=str):
        idx = [i for i, g in enumerate(groups) if str(g) == label]
        out[label] = topk_accuracy(
            [rankings[i] for i in idx], [gold_sets[i] for i in idx], ks
        )
    return out


def bm25_scores(
    query_tokens: Sequence[str],
    corpus_tokens: Sequence[Sequence[str]],
    k1: float = 1.2,
    b: float = 0.75,
) -> np.ndarray:
    """Okapi BM25 score of every document against a tokenized query.

    Inverse document frequency uses the nonnegative form
    ln(1 + (N - df + 0.5)/(df + 0.5)), so a term occurring in a single
    document of a 2-document corpus still votes for that document.
    Repeated query terms contribute once per occurrence; an empty query
    scores every document 0.
    """
    n = len(corpus_tokens)
    if n == 0:
        raise ValueError("empty corpus")
    df: dict[str, int] = {}
    for doc in corpus_tokens:
        for term in set(doc):
            df[term] = df.get(term, 0) + 1
    lengths = np.array([len(doc) for doc in corpus_tokens], dtype=np.float64)
    avg_len = float(lengths.mean()) if lengths.sum() > 0 else 1.0
    scores = np.zeros(n)
    for term in query_tokens:
        d_f = df.get(term)
        if not d_f:
            continue
        idf = math.log(1.0 + (n - d_f + 0.5) / (d_f + 0.5))
        for di, doc in enumerate(corpus_tokens):
            tf = doc.count(term)
            if tf == 0:
                continue
            denom = tf + k1 * (1.0 - b + b * lengths[di] / avg_len)
            scores[di] += idf * tf * (k1 + 1.0) / denom
    return scores


def bm25_rank(
    query_tokens: Sequence[str],
    corpus_tokens: Sequence[Sequence[str]],
    k1: float = 1.2,
    b: float = 0.75,
    ids: Sequence | None = None,
):
    """Rank every document by BM25 score; ties break by ascending id."""
    scores = bm25_scores(query_tokens, corpus_tokens, k1, b)
    if ids is None:
        ids = list(range(len(corpus_tokens)))
    id_arr = np.array(ids)
    order = np.lexsort((id_arr, -scores))
    return [ids[i] for i in order]


# ---------------------------------------------------------------------------
# file formats


def read_analogy_file(path: str | Path) -> list[AnalogyQuestion]:
    """TSV rows: category, a, b, c, pipe-joined candidates, answer index."""
    questions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ValueError(
                    f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}"
                )
            category, a, b, c, cand_field, idx_field = parts
            questions.append(
                AnalogyQuestion(
                    category=category,
                    a=a,
                    b=b,
                    c=c,
                    candidates=tuple(cand_field.split("|")),
                    answer_index=int(idx_field),
                )
            )
    return questions


def write_analogy_file(questions: Sequence[AnalogyQuestion], path: str | Path) -> None:
    lines = []
    for q in questions:
        for text in (q.a, q.b, q.c, *q.candidates):
            if "\t" in text or "|" in text:
                raise ValueError(f"text contains a reserved delimiter: {text!r}")
        lines.append(
            "\t".join(
                [q.category, q.a, q.b, q.c, "|".join(q.candidates), str(q.answer_index)]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_retrieval_corpus(path: str | Path) -> list[tuple[str, str]]:
    """TSV rows: id, text."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(
                    f"{path}:{lineno}: expected 2 tab-separated fields, got {len(parts)}"
                )
            rows.append((parts[0], parts[1]))
    return rows


def read_retrieval_queries(path: str | Path) -> list[tuple[str, frozenset[str]]]:
    """TSV rows: text, comma-joined gold ids."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(
                    f"{path}:{lineno}: expected 2 tab-separated fields, got {len(parts)}"
                )
            gold = frozenset(g for g in parts[1].split(",") if g)
            rows.append((parts[0], gold))
    return rows


def read_word_vectors(path: str | Path) -> dict[str, np.ndarray]:
    """Space-separated rows: token v1 v2 ... vd; insertion order kept."""
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if not values:
                raise ValueError(f"{path}:{lineno}: no vector components")
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise ValueError(
                    f"{path}:{lineno}: dimension {len(values)} != {dim}"
                )
            if token in vectors:
                raise ValueError(f"{path}:{lineno}: duplicate token {token!r}")
            vectors[token] = np.array([float(v) for v in values])
    if not vectors:
        raise ValueError(f"{path}: empty word-vector file")
    return vectors


def write_word_vectors(vectors: Mapping[str, np.ndarray], path: str | Path) -> None:
    lines = []
    for token, vec in vectors.items():
        comps = " ".join(f"{float(x):.8g}" for x in np.asarray(vec).ravel())
        lines.append(f"{token} {comps}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
