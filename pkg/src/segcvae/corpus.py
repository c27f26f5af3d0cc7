"""Dialogue corpus tooling.

Covers reading the block-structured corpus format (one utterance per line,
blank line between dialogues), tokenization, vocabulary and embedding-table
construction, mining of complex mappings (one context with several distinct
responses, one response shared by several distinct contexts), and building
the derived datasets that keep only such pairs.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Rng
from .errors import DomainError, EmptyCorpus

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

_TOKEN_RE = re.compile(r"'\w+|\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace, detaching punctuation into
    standalone tokens; apostrophe contractions stay with their suffix."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Utterance:
    tokens: tuple[str, ...]
    dialogue_id: str
    turn_index: int


@dataclass(frozen=True)
class DialoguePair:
    context: tuple[str, ...]
    response: tuple[str, ...]
    source: str = ""


def read_corpus(lines: Iterable[str]) -> list[list[Utterance]]:
    """Parse the block format: one utterance per line, blank line between
    dialogues.  Lines that tokenize to nothing are skipped."""
    dialogues: list[list[Utterance]] = []
    current: list[Utterance] = []
    block = 0
    for line in lines:
        if not line.strip():
            if current:
                dialogues.append(current)
                current = []
                block += 1
            continue
        tokens = tuple(tokenize(line))
        if tokens:
            current.append(Utterance(tokens, f"d{block}", len(current)))
    if current:
        dialogues.append(current)
    return dialogues


def read_corpus_file(path) -> list[list[Utterance]]:
    with open(path, encoding="utf-8") as fh:
        return read_corpus(fh)


def extract_single_turn_pairs(dialogue: Sequence[Utterance]) -> list[DialoguePair]:
    """Adjacent-turn pairs: a dialogue of T utterances yields exactly T-1."""
    return [DialoguePair(dialogue[i].tokens, dialogue[i + 1].tokens,
                         source=dialogue[i].dialogue_id)
            for i in range(len(dialogue) - 1)]


def pairs_from_corpus(dialogues: Sequence[Sequence[Utterance]]) -> list[DialoguePair]:
    pairs: list[DialoguePair] = []
    for dialogue in dialogues:
        pairs.extend(extract_single_turn_pairs(dialogue))
    return pairs


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

@dataclass
class Vocabulary:
    """Dense token ids with reserved specials and an embedding table."""

    token_to_id: dict[str, int]
    id_to_token: list[str]
    embedding: np.ndarray  # (vocab_size, emb_dim)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def emb_dim(self) -> int:
        return self.embedding.shape[1]

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def tokens_of(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path, embedding: np.ndarray) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        if tokens[:4] != list(SPECIALS):
            raise DomainError(f"{path}: vocabulary file must start with {SPECIALS}")
        if embedding.shape[0] != len(tokens):
            raise DomainError(f"{path}: embedding rows {embedding.shape[0]} != tokens {len(tokens)}")
        return cls({t: i for i, t in enumerate(tokens)}, tokens, embedding)


def build_vocab(pairs: Sequence[DialoguePair], max_size: int,
                emb_dim: int = 300, embedding_source: dict[str, np.ndarray] = None,
                seed: int = 123456) -> Vocabulary:
    """Keep the most frequent tokens (ties broken lexicographically) under
    ``max_size`` including the four specials.  Tokens without a row in
    ``embedding_source`` get a seeded uniform row in [-0.1, 0.1]."""
    if max_size < len(SPECIALS):
        raise DomainError(f"max_size must be at least {len(SPECIALS)}")
    if not pairs:
        raise EmptyCorpus("cannot build a vocabulary from no pairs")
    counts = Counter()
    for pair in pairs:
        counts.update(pair.context)
        counts.update(pair.response)
    ranked = sorted(counts, key=lambda tok: (-counts[tok], tok))
    kept = ranked[:max_size - len(SPECIALS)]
    id_to_token = list(SPECIALS) + kept
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}

    rng = Rng(seed)
    embedding = np.zeros((len(id_to_token), emb_dim))
    for i, tok in enumerate(id_to_token):
        if tok == PAD:
            continue  # padding row stays zero
        if embedding_source is not None and tok in embedding_source:
            row = np.asarray(embedding_source[tok], dtype=np.float64)
            if row.shape != (emb_dim,):
                raise DomainError(f"embedding row for '{tok}' has shape {row.shape}, want ({emb_dim},)")
            embedding[i] = row
        else:
            embedding[i] = rng.uniform(-0.1, 0.1, emb_dim)
    return Vocabulary(token_to_id, id_to_token, embedding)


def filter_by_vocab(pairs: Sequence[DialoguePair], vocab: Vocabulary) -> list[DialoguePair]:
    """Drop every pair that contains an utterance with out-of-vocabulary
    tokens, on either side and wherever that utterance occurs."""
    bad: set[tuple[str, ...]] = set()
    for pair in pairs:
        for utt in (pair.context, pair.response):
            if any(tok not in vocab for tok in utt):
                bad.add(utt)
    return [p for p in pairs if p.context not in bad and p.response not in bad]


# ---------------------------------------------------------------------------
# complex mapping mining
# ---------------------------------------------------------------------------

@dataclass
class CdmReport:
    """Counts and fractions of one-to-many and many-to-one dialogue pairs."""

    total_pairs: int
    o2m_groups: list[tuple[tuple[str, ...], list[tuple[str, ...]]]]
    m2o_groups: list[tuple[tuple[str, ...], list[tuple[str, ...]]]]
    o2m_pair_count: int
    m2o_pair_count: int

    @property
    def o2m_pair_fraction(self) -> float:
        return self.o2m_pair_count / self.total_pairs

    @property
    def m2o_pair_fraction(self) -> float:
        return self.m2o_pair_count / self.total_pairs

    @property
    def cdm_fraction(self) -> float:
        return self.o2m_pair_fraction + self.m2o_pair_fraction

    def text(self) -> str:
        lines = [
            f"pairs: {self.total_pairs}",
            f"o2m_groups: {len(self.o2m_groups)}",
            f"m2o_groups: {len(self.m2o_groups)}",
            f"o2m_pairs: {self.o2m_pair_count}",
            f"m2o_pairs: {self.m2o_pair_count}",
            f"o2m_pair_fraction: {self.o2m_pair_fraction!r}",
            f"m2o_pair_fraction: {self.m2o_pair_fraction!r}",
            f"cdm_fraction: {self.cdm_fraction!r}",
        ]
        return "\n".join(lines) + "\n"


def _group(pairs: Sequence[DialoguePair], by_context: bool):
    """Map each key utterance to (distinct counterparts, occurrence count)."""
    counterparts: dict[tuple, dict] = defaultdict(dict)
    occurrences: Counter = Counter()
    for pair in pairs:
        key, other = (pair.context, pair.response) if by_context else (pair.response, pair.context)
        counterparts[key].setdefault(other, None)
        occurrences[key] += 1
    groups = [(key, list(others)) for key, others in counterparts.items() if len(others) >= 2]
    pair_count = sum(occurrences[key] for key, _ in groups)
    return groups, pair_count


def mine_cdm(pairs: Sequence[DialoguePair]) -> CdmReport:
    """Group by exact token-sequence equality; a group needs at least two
    distinct counterparts.  Fractions are over the total pair count."""
    if not pairs:
        raise EmptyCorpus("no pairs to mine")
    o2m_groups, o2m_pairs = _group(pairs, by_context=True)
    m2o_groups, m2o_pairs = _group(pairs, by_context=False)
    return CdmReport(len(pairs), o2m_groups, m2o_groups, o2m_pairs, m2o_pairs)


def _split_of(key: tuple[str, ...], ratios: tuple[float, float, float]) -> str:
    digest = hashlib.sha256(" ".join(key).encode("utf-8")).digest()
    bucket = int.from_bytes(digest[:8], "big") % 100
    if bucket < round(100 * ratios[0]):
        return "train"
    if bucket < round(100 * (ratios[0] + ratios[1])):
        return "valid"
    return "test"


def build_cdm_dataset(pairs: Sequence[DialoguePair], mode: str,
                      ratios: tuple[float, float, float] = (0.90, 0.05, 0.05)
                      ) -> tuple[dict[str, list[DialoguePair]], dict]:
    """Keep only pairs whose group qualifies for ``mode`` ("o2m" or "m2o")
    and split whole groups into train/valid/test by a hash of the group key,
    so every one-to-many (or many-to-one) family lands in a single split."""
    mode = mode.lower()
    if mode not in ("o2m", "m2o"):
        raise DomainError(f"mode must be 'o2m' or 'm2o', got '{mode}'")
    report = mine_cdm(pairs)
    groups = report.o2m_groups if mode == "o2m" else report.m2o_groups
    if not groups:
        raise EmptyCorpus(f"no qualifying {mode} groups")
    keys = {key for key, _ in groups}
    splits: dict[str, list[DialoguePair]] = {"train": [], "valid": [], "test": []}
    for pair in pairs:
        key = pair.context if mode == "o2m" else pair.response
        if key in keys:
            splits[_split_of(key, ratios)].append(pair)
    manifest = {
        "mode": mode,
        "ratios": ratios,
        "groups": len(groups),
        "pairs": {name: len(split) for name, split in splits.items()},
    }
    return splits, manifest


def general_split(pairs: Sequence[DialoguePair],
                  ratios: tuple[float, float, float] = (0.90, 0.05, 0.05)
                  ) -> tuple[dict[str, list[DialoguePair]], dict]:
    """Plain deterministic split of all pairs, hashed on the whole pair."""
    if not pairs:
        raise EmptyCorpus("no pairs to split")
    splits: dict[str, list[DialoguePair]] = {"train": [], "valid": [], "test": []}
    for pair in pairs:
        splits[_split_of(pair.context + ("\t",) + pair.response, ratios)].append(pair)
    manifest = {
        "mode": "general",
        "ratios": ratios,
        "groups": len(pairs),
        "pairs": {name: len(split) for name, split in splits.items()},
    }
    return splits, manifest


# ---------------------------------------------------------------------------
# encoding and pair files
# ---------------------------------------------------------------------------

def encode_context(tokens: Sequence[str], vocab: Vocabulary, max_clen: int) -> np.ndarray:
    """Truncate and pad a context to exactly ``max_clen`` ids; OOV -> UNK."""
    ids = [vocab.id_of(t) for t in tokens[:max_clen]]
    ids += [PAD_ID] * (max_clen - len(ids))
    return np.array(ids, dtype=np.int64)


def encode_pair(pair: DialoguePair, vocab: Vocabulary, max_clen: int
                ) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-length id arrays: the context is truncated and padded to
    ``max_clen``; the response is framed with BOS/EOS inside the same
    budget, then padded.  Unknown tokens map to UNK."""
    if max_clen < 2:
        raise DomainError("max_clen must be at least 2 to frame a response")
    resp = [BOS_ID] + [vocab.id_of(t) for t in pair.response[:max_clen - 2]] + [EOS_ID]
    resp += [PAD_ID] * (max_clen - len(resp))
    return encode_context(pair.context, vocab, max_clen), np.array(resp, dtype=np.int64)


def encode_pairs(pairs: Sequence[DialoguePair], vocab: Vocabulary, max_clen: int
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Stack encodings into (N, max_clen) context and response id matrices."""
    if not pairs:
        raise EmptyCorpus("no pairs to encode")
    encoded = [encode_pair(p, vocab, max_clen) for p in pairs]
    return (np.stack([c for c, _ in encoded]), np.stack([r for _, r in encoded]))


def write_pairs(path, pairs: Sequence[DialoguePair]):
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(" ".join(pair.context) + "\t" + " ".join(pair.response) + "\n")


def read_pairs(path) -> list[DialoguePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            context, _, response = line.partition("\t")
            pairs.append(DialoguePair(tuple(context.split()), tuple(response.split())))
    return pairs
