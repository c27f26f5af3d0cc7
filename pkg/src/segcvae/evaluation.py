"""Decoding and the automatic metric suite.

Greedy decoding starts from the begin marker and stops at the end marker or
the length cap.  N-response generation cycles through the semantics
branches and draws a fresh latent from each branch's prior.  The metrics
are plain functions over token sequences; special tokens never count.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .corpus import BOS_ID, EOS_ID, SPECIALS, Vocabulary, encode_context
from .errors import DegenerateVector, DomainError
from .model import SegCVAE

EPS_NORM = 1e-8


@dataclass
class GenerationRecord:
    """One context with its generated responses and any ground truths."""

    context: tuple[str, ...]
    responses: list[list[str]]
    ground_truths: list[tuple[str, ...]] = field(default_factory=list)
    branch_indices: list[int] = field(default_factory=list)
    z_samples: list[np.ndarray] = field(default_factory=list)


def greedy_decode(model: SegCVAE, ctx_ids: np.ndarray, branch: int,
                  z: np.ndarray) -> list[int]:
    """Argmax tokens from the given branch and latent until the end marker
    or the length cap; returns token ids without the markers."""
    cfg = model.config
    if not 0 <= branch < cfg.num_triggers:
        raise DomainError(f"branch must lie in [0, {cfg.num_triggers}), got {branch}")
    ctx_ids = np.atleast_2d(ctx_ids)
    with ad.no_grad():
        x = model.prominent_semantics(ctx_ids, noise=False)[branch]
        state = model.decoder_initial(Tensor(np.asarray(z, dtype=np.float64)[None]), x)
        token = BOS_ID
        out: list[int] = []
        for _ in range(cfg.max_len):
            logits, state = model.decode_step(state, np.array([token]))
            token = int(np.argmax(logits.values[0]))
            if token == EOS_ID:
                break
            out.append(token)
    return out


def generate_n(model: SegCVAE, vocab: Vocabulary, context: Sequence[str],
               n: int, rng: Rng,
               ground_truths: Sequence[Sequence[str]] = ()) -> GenerationRecord:
    """Exactly ``n`` responses: branch k % num_triggers with a fresh prior
    draw per response."""
    if n < 1:
        raise DomainError(f"need at least one response, got n={n}")
    cfg = model.config
    ctx_ids = encode_context(tuple(context), vocab, cfg.max_len)[None]
    record = GenerationRecord(tuple(context), [],
                              [tuple(gt) for gt in ground_truths])
    with ad.no_grad():
        xs = model.prominent_semantics(ctx_ids, noise=False)
        priors = [model.prior(x) for x in xs]
    for k in range(n):
        branch = k % cfg.num_triggers
        mu, logvar = priors[branch]
        z = mu.values[0] + np.exp(logvar.values[0] / 2.0) * rng.normal(cfg.latent_dim)
        ids = greedy_decode(model, ctx_ids, branch, z)
        record.responses.append(vocab.tokens_of(ids))
        record.branch_indices.append(branch)
        record.z_samples.append(z)
    return record


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n(responses: Sequence[Sequence[str]], n: int) -> float:
    """Unique n-grams over all generated n-grams, corpus level."""
    grams: list[tuple[str, ...]] = []
    for resp in responses:
        grams.extend(_ngrams(list(resp), n))
    if not grams:
        raise DomainError(f"no {n}-grams in any response")
    return len(set(grams)) / len(grams)


def bleu_n(candidate: Sequence[str], references: Sequence[Sequence[str]],
           n: int) -> float:
    """Geometric mean of clipped k-gram precisions (k = 1..n) with brevity
    penalty; orders above 1 get +1 smoothing on both counts.  Clipping uses
    the per-k-gram maximum over all references."""
    candidate = list(candidate)
    if not candidate:
        raise DomainError("cannot score an empty candidate")
    refs = [list(r) for r in references]
    if not refs:
        raise DomainError("need at least one reference")
    log_sum = 0.0
    for k in range(1, n + 1):
        cand_counts = Counter(_ngrams(candidate, k))
        total = sum(cand_counts.values())
        max_ref = Counter()
        for ref in refs:
            for gram, count in Counter(_ngrams(ref, k)).items():
                max_ref[gram] = max(max_ref[gram], count)
        clipped = sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
        if k == 1:
            if clipped == 0:
                return 0.0
            precision = clipped / total
        else:
            precision = (clipped + 1.0) / (total + 1.0)
        log_sum += np.log(precision)
    c = len(candidate)
    r = min((len(ref) for ref in refs), key=lambda L: (abs(L - c), L))
    brevity = 1.0 if c > r else float(np.exp(1.0 - r / c))
    return float(min(1.0, brevity) * np.exp(log_sum / n))


def _mean_embedding(tokens: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    rows = [vocab.embedding[vocab.token_to_id[t]]
            for t in tokens if t in vocab.token_to_id and t not in SPECIALS]
    if not rows:
        raise DegenerateVector("no usable tokens to embed")
    return np.mean(rows, axis=0)


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= EPS_NORM or nv <= EPS_NORM:
        raise DegenerateVector("cosine of a near-zero mean embedding")
    return float(u @ v / (nu * nv))


def embedding_average(candidate: Sequence[str], reference: Sequence[str],
                      vocab: Vocabulary) -> float:
    """Cosine of the mean word embeddings of the two sentences."""
    return _cosine(_mean_embedding(candidate, vocab), _mean_embedding(reference, vocab))


def coherence(context: Sequence[str], candidate: Sequence[str],
              vocab: Vocabulary) -> float:
    """Cosine of the mean word embeddings of context and response."""
    return _cosine(_mean_embedding(context, vocab), _mean_embedding(candidate, vocab))


def length_avg(responses: Sequence[Sequence[str]]) -> float:
    """Mean token count over responses, special tokens excluded."""
    if not responses:
        raise DomainError("no responses to measure")
    counts = [sum(1 for t in resp if t not in SPECIALS) for resp in responses]
    return float(np.mean(counts))


# ---------------------------------------------------------------------------
# corpus-level aggregation and report files
# ---------------------------------------------------------------------------

def evaluate_records(records: Sequence[GenerationRecord], vocab: Vocabulary,
                     distinct_orders=(1, 2), bleu_orders=(1, 2, 3)) -> dict[str, float]:
    """Aggregate the metric suite over generation records.

    BLEU and the embedding metrics are averaged over generated responses;
    with several ground truths per context, BLEU clips over all of them and
    the embedding score takes the best-matching truth.
    """
    all_responses = [resp for rec in records for resp in rec.responses]
    metrics: dict[str, float] = {}
    for n in distinct_orders:
        try:
            metrics[f"distinct-{n}"] = distinct_n(all_responses, n)
        except DomainError:
            metrics[f"distinct-{n}"] = 0.0
    bleu_acc = {n: [] for n in bleu_orders}
    emb_acc: list[float] = []
    coh_acc: list[float] = []
    for rec in records:
        for resp in rec.responses:
            if rec.ground_truths and resp:
                for n in bleu_orders:
                    bleu_acc[n].append(bleu_n(resp, rec.ground_truths, n))
                scores = []
                for gt in rec.ground_truths:
                    try:
                        scores.append(embedding_average(resp, gt, vocab))
                    except DegenerateVector:
                        pass
                if scores:
                    emb_acc.append(max(scores))
            if resp:
                try:
                    coh_acc.append(coherence(rec.context, resp, vocab))
                except DegenerateVector:
                    pass
    for n in bleu_orders:
        metrics[f"bleu-{n}"] = float(np.mean(bleu_acc[n])) if bleu_acc[n] else 0.0
    metrics["emb_average"] = float(np.mean(emb_acc)) if emb_acc else 0.0
    metrics["coherence"] = float(np.mean(coh_acc)) if coh_acc else 0.0
    metrics["length"] = length_avg(all_responses) if all_responses else 0.0
    return metrics


def report_text(metrics: dict[str, float], corpus_size: int) -> str:
    lines = [f"pairs: {corpus_size}"]
    for name in sorted(metrics):
        lines.append(f"{name}: {metrics[name]!r}")
    return "\n".join(lines) + "\n"


def write_generation(path, records: Sequence[GenerationRecord]):
    """One line per context: the context and each response, TAB-separated."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            cells = [" ".join(rec.context)] + [" ".join(r) for r in rec.responses]
            fh.write("\t".join(cells) + "\n")


def read_generation(path) -> list[GenerationRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split("\t")
            records.append(GenerationRecord(
                tuple(cells[0].split()), [c.split() for c in cells[1:]]))
    return records
