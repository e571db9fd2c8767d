"""Joint compositional + masked-language-model training.

Each marked sequence S contributes two signals per step.  One annotated
span w is selected by scoring every candidate with the MLM head (mask
the span, average the true-token probabilities) and taking the lowest
score — the span the model currently explains worst.  The sequence is
then split into w and its remainder R, and the compositional loss pulls
the pooled embeddings toward E^w + E^R = E^S (all unit-normalized,
mean squared error).  In parallel, standard masked-token prediction
runs on S with positions inside w protected from masking, so the same
masked forward pass of S serves both losses.

Span scoring, selection, and masking happen in :func:`prepare_batch`;
:func:`loss_and_gradients` is then a smooth, deterministic function of
the parameters, which is what makes finite-difference verification of
the analytic gradients meaningful.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID, EncodedSequence
from .encoder import (
    EncoderConfig,
    Model,
    backward,
    forward,
    mlm_head_rows,
    mlm_head_rows_backward,
    pad_batch,
    _pool_with_cache,
    pool_backward,
    zero_grads,
)
from .ngram import NgramTable, Span, SpanAnnotation, mark_sequence

DEGENERATE_NORM_EPS = 1e-12


def step_rng(seed: int, step: int, name: str) -> np.random.Generator:
    """Counter-based generator: a fresh stream per (seed, step, name)."""
    digest = hashlib.blake2b(f"{seed}/{step}/{name}".encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def frame(ids: Iterable[int]) -> tuple[int, ...]:
    """Wrap raw token ids with the sequence delimiters."""
    return (CLS_ID, *ids, SEP_ID)


@dataclass(frozen=True)
class TrainingExample:
    """One sequence with its selected span and the framed model inputs.

    ``span`` is None for MLM-only examples (no annotated spans, or the
    only spans cover the whole sequence so the remainder would be
    empty); then ``w_ids`` and ``r_ids`` are None as well.
    """

    s: EncodedSequence
    annotation: SpanAnnotation
    span: Span | None
    w_ids: tuple[int, ...] | None
    r_ids: tuple[int, ...] | None
    s_ids: tuple[int, ...]


@dataclass(frozen=True)
class LossReport:
    l_misad: float
    l_mlm: float
    l_total: float


def select_span(scores: Sequence[float]) -> int | None:
    """Index of the worst-explained span: argmin, first on ties.

    Scores arrive in span order (ascending start), so the first minimum
    is the leftmost.  Empty input signals an MLM-only example.
    """
    if len(scores) == 0:
        return None
    return int(np.argmin(np.asarray(scores)))


def split_sequence(s: EncodedSequence, span: Span):
    """Split S around a span into framed (w, R, S) inputs.

    R is the remainder concatenated in order with no placeholder at the
    removal point.  Returns None when R would be empty, demoting the
    example to MLM-only.
    """
    tokens = s.ids
    if not (1 <= span.start <= span.end <= len(tokens)):
        raise ValueError(f"span {span} outside sequence of length {len(tokens)}")
    w = tokens[span.start - 1 : span.end]
    r = tokens[: span.start - 1] + tokens[span.end :]
    if not r:
        return None
    return frame(w), frame(r), frame(tokens)


def _masked_variant(seq: EncodedSequence, span: Span) -> list[int]:
    ids = list(frame(seq.ids))
    for pos in range(span.start, span.end + 1):
        ids[pos] = MASK_ID
    return ids


def score_spans(s: EncodedSequence, spans: Sequence[Span], model: Model) -> list[float]:
    """Average true-token probability of each span under the MLM head.

    Each span is masked on its own copy of the framed sequence (one
    span at a time), the model runs without dropout, and the score is
    the mean probability the head assigns to the true tokens.  Low
    scores mark spans the model does not yet treat as units.
    """
    for span in spans:
        if not (1 <= span.start <= span.end <= s.m):
            raise ValueError(f"span {span} outside sequence of length {s.m}")
    if not spans:
        return []
    variants = [_masked_variant(s, span) for span in spans]
    ids, mask = pad_batch(variants, pad_id=PAD_ID)
    hidden, _ = forward(model.params, model.config, ids, mask, train=False)
    rows = []
    targets = []
    owners = []
    for i, span in enumerate(spans):
        for pos in range(span.start, span.end + 1):
            rows.append(hidden[i, pos])
            targets.append(s.ids[pos - 1])
            owners.append(i)
    log_probs, _ = mlm_head_rows(model.params, np.stack(rows))
    token_probs = np.exp(log_probs[np.arange(len(targets)), targets])
    scores = np.zeros(len(spans))
    np.add.at(scores, owners, token_probs)
    lengths = np.array([sp.length for sp in spans], dtype=float)
    return [float(v) for v in scores / lengths]


def make_examples(
    pairs: Sequence[tuple[EncodedSequence, SpanAnnotation]], model: Model
) -> list[TrainingExample]:
    """Score, select, and split a batch of annotated sequences.

    All masked span variants across the batch share one forward pass,
    which keeps per-step selection cheap.
    """
    variants: list[list[int]] = []
    owners: list[tuple[int, int]] = []  # (pair index, span index)
    for pi, (seq, ann) in enumerate(pairs):
        for si, span in enumerate(ann.spans):
            if not (1 <= span.start <= span.end <= seq.m):
                raise ValueError(f"span {span} outside sequence of length {seq.m}")
            variants.append(_masked_variant(seq, span))
            owners.append((pi, si))

    scores: dict[int, list[float]] = {pi: [] for pi in range(len(pairs))}
    if variants:
        ids, mask = pad_batch(variants, pad_id=PAD_ID)
        hidden, _ = forward(model.params, model.config, ids, mask, train=False)
        rows, targets, row_owner = [], [], []
        for vi, (pi, si) in enumerate(owners):
            seq, ann = pairs[pi]
            span = ann.spans[si]
            for pos in range(span.start, span.end + 1):
                rows.append(hidden[vi, pos])
                targets.append(seq.ids[pos - 1])
                row_owner.append(vi)
        log_probs, _ = mlm_head_rows(model.params, np.stack(rows))
        token_probs = np.exp(log_probs[np.arange(len(targets)), targets])
        sums = np.zeros(len(variants))
        np.add.at(sums, row_owner, token_probs)
        for vi, (pi, si) in enumerate(owners):
            span = pairs[pi][1].spans[si]
            scores[pi].append(float(sums[vi] / span.length))

    examples = []
    for pi, (seq, ann) in enumerate(pairs):
        idx = select_span(scores[pi])
        example = None
        if idx is not None:
            span = ann.spans[idx]
            split = split_sequence(seq, span)
            if split is not None:
                w_ids, r_ids, s_ids = split
                example = TrainingExample(seq, ann, span, w_ids, r_ids, s_ids)
        if example is None:
            example = TrainingExample(seq, ann, None, None, None, frame(seq.ids))
        examples.append(example)
    return examples


def make_example(
    s: EncodedSequence, annotation: SpanAnnotation, model: Model
) -> TrainingExample:
    return make_examples([(s, annotation)], model)[0]


# ---------------------------------------------------------------------------
# losses


def _normalize_rows(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norms < DEGENERATE_NORM_EPS):
        raise ValueError("degenerate embedding")
    return e / norms, norms


def misad_loss(e_w, e_r, e_s) -> float:
    """Mean squared error between E^w + E^R and E^S on unit vectors.

    Inputs may be single vectors or (n, d) stacks; each row is
    normalized to unit length first.  Zero iff the normalized vectors
    compose exactly.
    """
    e_w = np.atleast_2d(np.asarray(e_w, dtype=float))
    e_r = np.atleast_2d(np.asarray(e_r, dtype=float))
    e_s = np.atleast_2d(np.asarray(e_s, dtype=float))
    if not e_w.shape == e_r.shape == e_s.shape:
        raise ValueError("embedding shapes must match")
    uw, _ = _normalize_rows(e_w)
    ur, _ = _normalize_rows(e_r)
    us, _ = _normalize_rows(e_s)
    diff = uw + ur - us
    return float(np.mean(np.mean(diff * diff, axis=-1)))


def mlm_loss(log_probs: np.ndarray, targets) -> float:
    """Mean negative log-likelihood over masked positions; 0 if none."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        return 0.0
    picked = log_probs[np.arange(targets.size), targets]
    return float(-picked.mean())


def mask_for_mlm(
    ids: Sequence[int],
    span: Span | None,
    vocab_size: int,
    rng: np.random.Generator,
    mask_rate: float = 0.15,
):
    """BERT-style masking that never touches the selected span.

    Candidates are real tokens only — delimiters, padding, and every
    position of ``span`` (framed coordinates equal the 1-based token
    positions) are excluded.  Each candidate is masked independently at
    ``mask_rate``; masked positions get [MASK] 80% of the time, a random
    non-special token 10%, and stay unchanged 10%.  Returns
    ``(masked_ids, positions, targets)``; labels exist only at masked
    positions.
    """
    masked = list(ids)
    protected = set()
    if span is not None:
        protected = set(range(span.start, span.end + 1))
    positions: list[int] = []
    targets: list[int] = []
    for pos, tok in enumerate(masked):
        if tok in (PAD_ID, CLS_ID, SEP_ID) or pos in protected:
            continue
        if rng.random() >= mask_rate:
            continue
        positions.append(pos)
        targets.append(tok)
        roll = rng.random()
        if roll < 0.8:
            masked[pos] = MASK_ID
        elif roll < 0.9:
            masked[pos] = int(rng.integers(NUM_SPECIALS, vocab_size))
        # else: keep the original token, but still predict it
    return masked, positions, targets


# ---------------------------------------------------------------------------
# batch preparation


@dataclass
class PreparedBatch:
    """Fixed model inputs for one step: masking and selection already done.

    ``loss_and_gradients`` consumes this; because all stochastic choices
    are frozen here, the loss is a smooth function of the parameters.
    """

    s_ids: np.ndarray
    s_mask: np.ndarray
    mlm_rows: np.ndarray
    mlm_cols: np.ndarray
    mlm_targets: np.ndarray
    misad_s_rows: np.ndarray
    w_ids: np.ndarray | None
    w_mask: np.ndarray | None
    r_ids: np.ndarray | None
    r_mask: np.ndarray | None

    @property
    def n_examples(self) -> int:
        return self.s_ids.shape[0]

    @property
    def n_masked(self) -> int:
        return int(self.mlm_targets.size)

    @property
    def n_misad(self) -> int:
        return int(self.misad_s_rows.size)


def prepare_batch(
    examples: Sequence[TrainingExample],
    vocab_size: int,
    rng: np.random.Generator,
    mask_rate: float = 0.15,
) -> PreparedBatch:
    """Apply MLM masking and pad every input the step will need."""
    if not examples:
        raise ValueError("empty batch")
    s_seqs, w_seqs, r_seqs = [], [], []
    mlm_rows, mlm_cols, mlm_targets = [], [], []
    misad_s_rows = []
    for row, ex in enumerate(examples):
        masked, positions, targets = mask_for_mlm(
            ex.s_ids, ex.span, vocab_size, rng, mask_rate
        )
        s_seqs.append(masked)
        mlm_rows.extend([row] * len(positions))
        mlm_cols.extend(positions)
        mlm_targets.extend(targets)
        if ex.span is not None:
            misad_s_rows.append(row)
            w_seqs.append(ex.w_ids)
            r_seqs.append(ex.r_ids)
    s_ids, s_mask = pad_batch(s_seqs, pad_id=PAD_ID)
    if w_seqs:
        w_ids, w_mask = pad_batch(w_seqs, pad_id=PAD_ID)
        r_ids, r_mask = pad_batch(r_seqs, pad_id=PAD_ID)
    else:
        w_ids = w_mask = r_ids = r_mask = None
    return PreparedBatch(
        s_ids=s_ids,
        s_mask=s_mask,
        mlm_rows=np.asarray(mlm_rows, dtype=np.int64),
        mlm_cols=np.asarray(mlm_cols, dtype=np.int64),
        mlm_targets=np.asarray(mlm_targets, dtype=np.int64),
        misad_s_rows=np.asarray(misad_s_rows, dtype=np.int64),
        w_ids=w_ids,
        w_mask=w_mask,
        r_ids=r_ids,
        r_mask=r_mask,
    )


# ---------------------------------------------------------------------------
# loss + gradients


def _normalized_with_grad(e: np.ndarray):
    """Unit rows plus a closure mapping d(unit) to d(raw)."""
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norms < DEGENERATE_NORM_EPS):
        raise ValueError("degenerate embedding")
    u = e / norms

    def backprop(du: np.ndarray) -> np.ndarray:
        return (du - u * (u * du).sum(-1, keepdims=True)) / norms

    return u, backprop


def loss_and_gradients(
    params: dict[str, np.ndarray],
    config: EncoderConfig,
    batch: PreparedBatch,
    *,
    pooling: str = "cls",
    misad_weight: float = 1.0,
    mlm_weight: float = 1.0,
    train: bool = False,
    dropout_tag: tuple[int, int] | None = None,
) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Joint loss and its exact analytic gradient for every tensor.

    The masked forward pass of S feeds both losses: its hidden rows at
    masked positions go to the MLM head, and its pooled vector is E^S
    for the compositional term.  ``dropout_tag=(seed, step)`` fixes the
    dropout streams when ``train`` is set.
    """
    grads = zero_grads(params)

    def tag(name: str):
        if not (train and config.dropout > 0.0):
            return None
        if dropout_tag is None:
            raise ValueError("train-mode dropout requires dropout_tag=(seed, step)")
        return (*dropout_tag, name)

    hidden_s, pooled_s, cache_s = forward(
        params, config, batch.s_ids, batch.s_mask,
        train=train, rng_tag=tag("s"), want_cache=True,
    )
    d_hidden_s = np.zeros_like(hidden_s)
    d_pooled_s = None

    l_mlm = 0.0
    if mlm_weight != 0.0 and batch.n_masked > 0:
        rows = hidden_s[batch.mlm_rows, batch.mlm_cols]
        log_probs, head_cache = mlm_head_rows(params, rows)
        l_mlm = mlm_loss(log_probs, batch.mlm_targets)
        d_logits = np.exp(log_probs)
        d_logits[np.arange(batch.n_masked), batch.mlm_targets] -= 1.0
        d_logits *= mlm_weight / batch.n_masked
        d_rows = mlm_head_rows_backward(head_cache, params, d_logits, grads)
        np.add.at(d_hidden_s, (batch.mlm_rows, batch.mlm_cols), d_rows)

    l_misad = 0.0
    if misad_weight != 0.0 and batch.n_misad > 0:
        hidden_w, pooled_w, cache_w = forward(
            params, config, batch.w_ids, batch.w_mask,
            train=train, rng_tag=tag("w"), want_cache=True,
        )
        hidden_r, pooled_r, cache_r = forward(
            params, config, batch.r_ids, batch.r_mask,
            train=train, rng_tag=tag("r"), want_cache=True,
        )
        sub = batch.misad_s_rows
        if pooling == "cls":
            e_s, e_w, e_r = pooled_s[sub], pooled_w, pooled_r
        else:
            e_s, cache_ps = _pool_with_cache(hidden_s[sub], batch.s_mask[sub], pooling, params)
            e_w, cache_pw = _pool_with_cache(hidden_w, batch.w_mask, pooling, params)
            e_r, cache_pr = _pool_with_cache(hidden_r, batch.r_mask, pooling, params)
        uw, back_w = _normalized_with_grad(e_w)
        ur, back_r = _normalized_with_grad(e_r)
        us, back_s = _normalized_with_grad(e_s)
        diff = uw + ur - us
        k, d = diff.shape
        l_misad = float(np.mean(np.mean(diff * diff, axis=-1)))
        d_diff = diff * (2.0 * misad_weight / (k * d))
        de_w = back_w(d_diff)
        de_r = back_r(d_diff)
        de_s = back_s(-d_diff)
        if pooling == "cls":
            d_pooled_s = np.zeros_like(pooled_s)
            d_pooled_s[sub] = de_s
            backward(cache_w, params, config, d_pooled=de_w, grads=grads)
            backward(cache_r, params, config, d_pooled=de_r, grads=grads)
        else:
            d_hidden_s[sub] += pool_backward(
                de_s, cache_ps, hidden_s[sub].shape, pooling, params, grads
            )
            d_hw = pool_backward(de_w, cache_pw, hidden_w.shape, pooling, params, grads)
            d_hr = pool_backward(de_r, cache_pr, hidden_r.shape, pooling, params, grads)
            backward(cache_w, params, config, d_hidden=d_hw, grads=grads)
            backward(cache_r, params, config, d_hidden=d_hr, grads=grads)

    backward(cache_s, params, config, d_hidden=d_hidden_s, d_pooled=d_pooled_s, grads=grads)
    l_total = misad_weight * l_misad + mlm_weight * l_mlm
    return LossReport(l_misad=l_misad, l_mlm=l_mlm, l_total=l_total), grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam moments plus the learning-rate schedule parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    peak_lr: float
    total_steps: int
    warmup_fraction: float

    @property
    def warmup_steps(self) -> int:
        return int(self.total_steps * self.warmup_fraction)


def init_optimizer(
    params: dict[str, np.ndarray],
    total_steps: int,
    peak_lr: float = 5e-5,
    warmup_fraction: float = 0.1,
) -> OptimizerState:
    if total_steps < 1:
        raise ValueError(f"total_steps ({total_steps}) must be >= 1")
    if not 0.0 <= warmup_fraction < 1.0:
        raise ValueError(f"warmup_fraction ({warmup_fraction}) must be in [0, 1)")
    return OptimizerState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0,
        peak_lr=peak_lr,
        total_steps=total_steps,
        warmup_fraction=warmup_fraction,
    )


def lr_at(step: int, state: OptimizerState) -> float:
    """Linear warmup to the peak, then linear decay to 0 at total_steps."""
    total, warm, peak = state.total_steps, state.warmup_steps, state.peak_lr
    if step > total:
        return 0.0
    if warm > 0 and step <= warm:
        return peak * step / warm
    if total == warm:
        return peak
    return peak * (total - step) / (total - warm)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> float:
    """One in-place Adam update with bias correction; returns the lr used."""
    t = state.step + 1
    lr = lr_at(t, state)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for tensor {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = t
    return lr


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainingConfig:
    """Loop hyperparameters (architecture lives in EncoderConfig)."""

    total_steps: int
    batch_size: int = 64
    peak_lr: float = 5e-5
    warmup_fraction: float = 0.1
    mask_rate: float = 0.15
    pooling_for_misad: str = "cls"
    misad_weight: float = 1.0
    mlm_weight: float = 1.0
    seed: int = 0


METRICS_HEADER = "step\tl_misad\tl_mlm\tl_total\tlr"


def train_step(
    examples: Sequence[TrainingExample],
    model: Model,
    state: OptimizerState,
    *,
    pooling_for_misad: str = "cls",
    mask_rate: float = 0.15,
    misad_weight: float = 1.0,
    mlm_weight: float = 1.0,
    seed: int = 0,
    use_dropout: bool = True,
) -> LossReport:
    """One optimization step over pre-selected examples.

    Masking randomness and dropout streams are keyed by (seed, current
    step), so a rerun from the same state is bit-identical.
    """
    mask_gen = step_rng(seed, state.step, "mlm")
    batch = prepare_batch(examples, model.config.vocab_size, mask_gen, mask_rate)
    report, grads = loss_and_gradients(
        model.params,
        model.config,
        batch,
        pooling=pooling_for_misad,
        misad_weight=misad_weight,
        mlm_weight=mlm_weight,
        train=use_dropout,
        dropout_tag=(seed, state.step),
    )
    adam_step(params=model.params, grads=grads, state=state)
    return report


class Trainer:
    """Epoch loop over a marked corpus with metric logging.

    Spans are annotated once (the table is static); span *selection* is
    re-scored each time an example is visited, since the model's
    judgment of which span it explains worst changes as it learns.
    """

    def __init__(
        self,
        model: Model,
        table: NgramTable,
        sequences: Sequence[EncodedSequence],
        config: TrainingConfig,
    ):
        limit = model.config.max_len - 2
        sequences = [
            s if s.m <= limit else EncodedSequence(ids=s.ids[:limit])
            for s in sequences
            if s.m > 0
        ]
        if not sequences:
            raise ValueError("empty corpus")
        self.model = model
        self.config = config
        self.pairs = [(s, mark_sequence(s, table)) for s in sequences]
        self.state = init_optimizer(
            model.params, config.total_steps, config.peak_lr, config.warmup_fraction
        )
        self.metrics: list[tuple[int, float, float, float, float]] = []

    def run(self, metrics_path: str | Path | None = None) -> list[tuple]:
        cfg = self.config
        order_rng = np.random.Generator(np.random.PCG64(cfg.seed))
        n = len(self.pairs)
        while self.state.step < cfg.total_steps:
            perm = order_rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                if self.state.step >= cfg.total_steps:
                    break
                idx = perm[lo : lo + cfg.batch_size]
                examples = make_examples([self.pairs[i] for i in idx], self.model)
                step_before = self.state.step
                report = train_step(
                    examples,
                    self.model,
                    self.state,
                    pooling_for_misad=cfg.pooling_for_misad,
                    mask_rate=cfg.mask_rate,
                    misad_weight=cfg.misad_weight,
                    mlm_weight=cfg.mlm_weight,
                    seed=cfg.seed,
                )
                lr = lr_at(self.state.step, self.state)
                self.metrics.append(
                    (step_before + 1, report.l_misad, report.l_mlm, report.l_total, lr)
                )
        if metrics_path is not None:
            write_metrics(self.metrics, metrics_path)
        return self.metrics


def write_metrics(rows: Sequence[tuple], path: str | Path) -> None:
    lines = [METRICS_HEADER]
    for step, l_misad, l_mlm, l_total, lr in rows:
        lines.append(f"{step}\t{l_misad:.9g}\t{l_mlm:.9g}\t{l_total:.9g}\t{lr:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
