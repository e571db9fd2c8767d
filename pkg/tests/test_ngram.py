"""N-gram counting, extended PMI, pruning, and greedy span marking."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import oracle_mark
from ulrlab.corpus import EncodedSequence, NUM_SPECIALS
from ulrlab.ngram import (
    NgramError,
    NgramTable,
    Span,
    SpanAnnotation,
    build_table,
    compute_pmi,
    count_ngrams,
    inject_entities,
    length_histogram,
    load_table,
    mark_sequence,
    prune_table,
    save_table,
)


def seqs_from_texts(texts, token_ids):
    """Encode whitespace token strings through an explicit id map."""
    return [
        EncodedSequence(ids=tuple(token_ids[t] for t in text.split()))
        for text in texts
    ]


IDS = {t: i + NUM_SPECIALS for i, t in enumerate("abcdefghij")}
IDS.update({t: i + NUM_SPECIALS + 10 for i, t in enumerate(["the", "cat", "sat", "ran"])})


class TestCountNgrams:
    def test_direct_count_fixture(self):
        (seq,) = seqs_from_texts(["a b a b"], IDS)
        counts = count_ngrams([seq], n_max=2)
        a, b = IDS["a"], IDS["b"]
        assert counts.unigrams[a] == 2
        assert counts.unigrams[b] == 2
        assert counts.ngrams[(a, b)] == 2
        assert counts.ngrams[(b, a)] == 1
        assert counts.total_tokens == 4

    def test_unigram_counts_sum_to_total(self):
        rng = np.random.default_rng(7)
        seqs = [
            EncodedSequence(ids=tuple(rng.integers(5, 25, size=rng.integers(1, 30))))
            for _ in range(20)
        ]
        counts = count_ngrams(seqs, n_max=4)
        assert sum(counts.unigrams.values()) == counts.total_tokens

    def test_matches_nested_loop_counter(self):
        """Counts equal a brute-force sliding-window recount."""
        rng = np.random.default_rng(11)
        seqs = [
            EncodedSequence(ids=tuple(rng.integers(5, 15, size=rng.integers(2, 60))))
            for _ in range(30)
        ]
        n_max = 4
        counts = count_ngrams(seqs, n_max=n_max)
        expected = {}
        total = 0
        for seq in seqs:
            ids = seq.ids
            total += len(ids)
            for n in range(1, n_max + 1):
                for i in range(len(ids) - n + 1):
                    gram = ids[i : i + n]
                    expected[gram] = expected.get(gram, 0) + 1
        assert counts.total_tokens == total
        for gram, count in expected.items():
            if len(gram) == 1:
                assert counts.unigrams[gram[0]] == count, gram
            else:
                assert counts.ngrams[gram] == count, gram
        assert sum(counts.ngrams.values()) == sum(
            c for g, c in expected.items() if len(g) > 1
        )

    def test_empty_corpus_raises(self):
        with pytest.raises(NgramError, match="empty corpus"):
            count_ngrams([EncodedSequence(ids=())], n_max=2)

    def test_n_max_must_cover_bigrams(self):
        (seq,) = seqs_from_texts(["a b"], IDS)
        with pytest.raises(NgramError):
            count_ngrams([seq], n_max=1)


class TestComputePmi:
    def test_independence_gives_zero(self):
        """When P(w) factorizes exactly, the score vanishes."""
        (seq,) = seqs_from_texts(["a b a c a b a c"], IDS)
        counts = count_ngrams([seq], n_max=2)
        # Craft counts where P(ef) = P(e)P(f) exactly: 2/8 = (4/8)(4/8).
        counts.unigrams[IDS["e"]] = 4
        counts.unigrams[IDS["f"]] = 4
        counts.ngrams[(IDS["e"], IDS["f"])] = 2
        pmi = compute_pmi((IDS["e"], IDS["f"]), counts)
        assert pmi == pytest.approx(0.0, abs=1e-12)

    def test_half_ln_two_fixture(self):
        (seq,) = seqs_from_texts(["a b a b"], IDS)
        counts = count_ngrams([seq], n_max=2)
        pmi = compute_pmi((IDS["a"], IDS["b"]), counts)
        assert pmi == pytest.approx(0.5 * math.log(2.0), abs=1e-12)

    def test_half_ln_three_fixture(self):
        (seq,) = seqs_from_texts(["the cat sat the cat ran"], IDS)
        counts = count_ngrams([seq], n_max=2)
        pmi = compute_pmi((IDS["the"], IDS["cat"]), counts)
        assert pmi == pytest.approx(0.5 * math.log(3.0), abs=1e-12)

    def test_unseen_ngram_raises(self):
        (seq,) = seqs_from_texts(["a b a b"], IDS)
        counts = count_ngrams([seq], n_max=2)
        with pytest.raises(NgramError, match="unseen n-gram"):
            compute_pmi((IDS["a"], IDS["c"]), counts)

    @given(st.integers(min_value=2, max_value=50))
    def test_invariant_under_count_scaling(self, k):
        """Multiplying every count and T by k leaves PMI unchanged."""
        (seq,) = seqs_from_texts(["a b c a b"], IDS)
        counts = count_ngrams([seq], n_max=3)
        w = (IDS["a"], IDS["b"])
        base = compute_pmi(w, counts)
        for gram in list(counts.unigrams):
            counts.unigrams[gram] *= k
        for gram in list(counts.ngrams):
            counts.ngrams[gram] *= k
        counts.total_tokens *= k
        assert compute_pmi(w, counts) == pytest.approx(base, abs=1e-12)

    def test_strictly_increasing_in_joint_count(self):
        (seq,) = seqs_from_texts(["a b a b a b a a"], IDS)
        counts = count_ngrams([seq], n_max=2)
        w = (IDS["a"], IDS["b"])
        values = []
        for joint in (1, 2, 3):
            counts.ngrams[w] = joint
            values.append(compute_pmi(w, counts))
        assert values[0] < values[1] < values[2]


def toy_table(entries, n_max=3, total=1000, privileged=()):
    return NgramTable(
        entries=dict(entries),
        n_max=n_max,
        total_tokens=total,
        privileged=set(privileged),
    )


class TestPruneTable:
    def test_infinite_threshold_empties_table(self):
        (seq,) = seqs_from_texts(["a b a b c d"], IDS)
        table = build_table(count_ngrams([seq], n_max=2))
        with pytest.warns(UserWarning):
            pruned = prune_table(table, pmi_threshold=math.inf, per_doc_top_k=None)
        assert len(pruned) == 0

    def test_threshold_is_strict(self):
        entries = {(5, 6): (3, 0.5), (6, 7): (2, 0.0)}
        pruned = prune_table(toy_table(entries), pmi_threshold=0.0, per_doc_top_k=None)
        assert (5, 6) in pruned and (6, 7) not in pruned

    def test_per_document_top_k_matches_sort_oracle(self):
        """Per-doc retention keeps exactly the k best by the stated order."""
        rng = np.random.default_rng(3)
        seqs = [
            EncodedSequence(ids=tuple(rng.integers(5, 12, size=40))) for _ in range(4)
        ]
        counts = count_ngrams(seqs, n_max=3)
        table = build_table(counts)
        k = 5
        pruned = prune_table(table, pmi_threshold=-math.inf, per_doc_top_k=k)
        kept = set()
        for seq in seqs:
            present = set()
            for n in range(2, 4):
                for i in range(len(seq.ids) - n + 1):
                    gram = seq.ids[i : i + n]
                    if gram in table.entries:
                        present.add(gram)
            ranked = sorted(
                present,
                key=lambda g: (-table.entries[g][1], -table.entries[g][0], g),
            )
            kept.update(ranked[:k])
        assert set(pruned.entries) == kept

    def test_output_is_subset_with_unchanged_entries(self):
        (seq,) = seqs_from_texts(["a b c a b c d e"], IDS)
        table = build_table(count_ngrams([seq], n_max=3))
        pruned = prune_table(table, pmi_threshold=0.0, per_doc_top_k=3)
        for gram, entry in pruned.entries.items():
            assert table.entries[gram] == entry


class TestInjectEntities:
    def test_inject_into_empty_table(self):
        table = toy_table({})
        inject_entities(table, [(7, 8)])
        assert (7, 8) in table
        assert (7, 8) in table.privileged

    def test_duplicate_injection_is_idempotent(self):
        table = toy_table({})
        inject_entities(table, [(7, 8)])
        snapshot = dict(table.entries)
        inject_entities(table, [(7, 8)])
        assert table.entries == snapshot

    def test_entity_survives_infinite_threshold(self):
        (seq,) = seqs_from_texts(["a b a b"], IDS)
        table = build_table(count_ngrams([seq], n_max=2))
        inject_entities(table, [(IDS["a"], IDS["b"])])
        pruned = prune_table(table, pmi_threshold=math.inf, per_doc_top_k=None)
        assert (IDS["a"], IDS["b"]) in pruned

    def test_bad_length_skipped_with_warning(self):
        table = toy_table({}, n_max=3)
        with pytest.warns(UserWarning):
            inject_entities(table, [(5,), (5, 6, 7, 8)])
        assert len(table) == 0


class TestMarkSequence:
    def test_longest_match_wins(self):
        ids = (IDS["a"], IDS["b"], IDS["c"])
        table = toy_table({(IDS["a"], IDS["b"], IDS["c"]): (2, 1.0),
                           (IDS["a"], IDS["b"]): (3, 2.0)})
        ann = mark_sequence(EncodedSequence(ids=ids), table)
        assert ann.spans == (Span(1, 3),)

    def test_non_overlap(self):
        a, b, c = IDS["a"], IDS["b"], IDS["c"]
        table = toy_table({(a, b): (2, 1.0), (b, c): (2, 1.0)})
        ann = mark_sequence(EncodedSequence(ids=(a, b, b, c)), table)
        assert ann.spans == (Span(1, 2), Span(3, 4))

    def test_no_match_yields_empty_annotation(self):
        table = toy_table({})
        ann = mark_sequence(EncodedSequence(ids=(5, 6, 7)), table)
        assert ann.spans == ()

    def test_matches_interval_scan_oracle(self):
        """Greedy annotation equals an oracle built from the full interval set."""
        rng = np.random.default_rng(19)
        grams = set()
        while len(grams) < 60:
            n = int(rng.integers(2, 5))
            grams.add(tuple(int(x) for x in rng.integers(5, 13, size=n)))
        table = toy_table({g: (1, 1.0) for g in grams}, n_max=4)
        for _ in range(200):
            ids = tuple(int(x) for x in rng.integers(5, 13, size=50))
            seq = EncodedSequence(ids=ids)
            assert mark_sequence(seq, table).spans == oracle_mark(ids, table)


class TestSpanTypes:
    def test_span_length(self):
        assert Span(2, 4).length == 3

    def test_annotation_rejects_overlap(self):
        with pytest.raises(NgramError):
            SpanAnnotation(spans=(Span(1, 3), Span(3, 5)))

    def test_annotation_rejects_unsorted(self):
        with pytest.raises(NgramError):
            SpanAnnotation(spans=(Span(4, 5), Span(1, 2)))

    def test_annotation_rejects_singleton_span(self):
        with pytest.raises(NgramError):
            SpanAnnotation(spans=(Span(2, 2),))


class TestTableIO:
    @pytest.fixture
    def vocab(self):
        from ulrlab.corpus import build_vocabulary, Document, tokenize

        text = "a b c d e the cat sat " * 6
        docs = [Document(0, text, tokenize(text))]
        return build_vocabulary(docs, min_count=1, max_size=100)

    def test_roundtrip_and_stable_bytes(self, tmp_path, vocab):
        ids = [vocab.id_of(t) for t in ("a", "b", "c", "d")]
        entries = {
            (ids[0], ids[1]): (5, 1.25),
            (ids[1], ids[2], ids[3]): (2, 0.333333333),
            (ids[2], ids[3]): (2, float("nan")),
        }
        table = toy_table(entries, n_max=3, privileged={(ids[2], ids[3])})
        path = tmp_path / "table.tsv"
        save_table(table, vocab, path)
        first = path.read_bytes()
        loaded = load_table(path, vocab, n_max=3)
        assert set(loaded.entries) == set(entries)
        assert loaded.privileged == {(ids[2], ids[3])}
        assert loaded.count_of((ids[0], ids[1])) == 5
        save_table(loaded, vocab, path)
        assert path.read_bytes() == first

    def test_header_and_sort_order(self, tmp_path, vocab):
        ids = [vocab.id_of(t) for t in ("a", "b", "c")]
        entries = {(ids[0], ids[1]): (5, 0.5), (ids[1], ids[2]): (9, 2.0)}
        path = tmp_path / "table.tsv"
        save_table(toy_table(entries), vocab, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "tokens\tcount\tpmi"
        assert lines[1].startswith("b c\t9\t")  # higher pmi first

    def test_load_rejects_bad_header(self, tmp_path, vocab):
        path = tmp_path / "table.tsv"
        path.write_text("nope\n")
        with pytest.raises(NgramError):
            load_table(path, vocab, n_max=3)


class TestLengthHistogram:
    def test_counts_lengths_of_top_entries(self):
        entries = {
            (5, 6): (4, 3.0),
            (6, 7): (4, 2.5),
            (5, 6, 7): (2, 2.0),
            (7, 8): (2, 0.5),
        }
        hist = length_histogram(toy_table(entries), top_n=3)
        assert hist == {2: 2, 3: 1}

    def test_no_limit_counts_everything(self):
        entries = {(5, 6): (1, 1.0), (5, 6, 7, 8): (1, 0.5)}
        hist = length_histogram(toy_table(entries, n_max=4))
        assert hist == {2: 1, 4: 1}
