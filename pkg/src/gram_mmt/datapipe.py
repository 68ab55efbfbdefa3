"""Tokenization, topic-phrase masking and triplet dataset collation."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import numerics as nx
from .io import VisionEncodingStore
from .model import BOS_ID, EOS_ID, PAD_ID, UNK_ID

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
assert [PAD_ID, BOS_ID, EOS_ID, UNK_ID] == [0, 1, 2, 3]

_TOKEN_RE = re.compile(r"<[^<>\s]+>|\w+|[^\w\s]")


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Word-level split of raw text: words, single punctuation marks, ``<tags>``."""
    return _TOKEN_RE.findall(text)


def split_tokens(text: str) -> list[str]:
    return text.split()


# --- vocabulary -------------------------------------------------------------

class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise DataError(f"vocabulary must start with the reserved tokens {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def __contains__(self, token):
        return token in self.stoi

    pad_id, bos_id, eos_id, unk_id = PAD_ID, BOS_ID, EOS_ID, UNK_ID

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(lines: Iterable[str], max_size: int, raw: bool = True) -> Vocab:
    """Frequency-ranked word vocabulary; ties break lexicographically."""
    if max_size < 5:
        raise DataError(f"max_size must be at least 5 (4 reserved tokens + 1), got {max_size}")
    split = tokenize if raw else split_tokens
    counts: Counter = Counter()
    n_lines = 0
    for line in lines:
        n_lines += 1
        counts.update(t for t in split(line) if t not in SPECIALS)
    if n_lines == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(SPECIALS) + [t for t, _ in ranked[: max_size - len(SPECIALS)]])


# --- topic phrases and masking ----------------------------------------------

def normalize_phrase(text: str | Sequence[str]) -> tuple[str, ...]:
    toks = tokenize(text) if isinstance(text, str) else list(text)
    phrase = tuple(t.lower() for t in toks)
    if not phrase:
        raise DataError("empty topic phrase")
    if UNK in phrase:
        raise DataError(f"topic phrase may not contain {UNK}: {' '.join(phrase)!r}")
    return phrase


class PhraseSet:
    """Normalized topic phrases grouped by length for longest-match lookup."""

    def __init__(self, phrases: Iterable[str | Sequence[str]] = ()):
        by_len: dict[int, set] = {}
        for ph in phrases:
            ph = normalize_phrase(ph)
            by_len.setdefault(len(ph), set()).add(ph)
        self._by_len = by_len
        self._lengths = sorted(by_len, reverse=True)

    def __len__(self):
        return sum(len(s) for s in self._by_len.values())

    def mask(self, tokens: Sequence[str]) -> tuple[list[str], int]:
        out, count, i, n = [], 0, 0, len(tokens)
        lowered = [t.lower() for t in tokens]
        while i < n:
            for length in self._lengths:
                if i + length <= n and tuple(lowered[i:i + length]) in self._by_len[length]:
                    out.append(UNK)
                    count += 1
                    i += length
                    break
            else:
                out.append(tokens[i])
                i += 1
        return out, count


def load_phrases(path) -> PhraseSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return PhraseSet(line for line in lines if line.strip())


def mask_source(tokens: Sequence[str], phrases) -> tuple[list[str], int]:
    """Replace each topic phrase in ``tokens`` by a single ``<unk>``.

    Left-to-right scan; at each position the longest matching phrase wins and
    scanning resumes after it. Matching is case-insensitive.
    """
    if not isinstance(phrases, PhraseSet):
        phrases = PhraseSet(phrases)
    return phrases.mask(tokens)


# --- triplets ---------------------------------------------------------------

@dataclass(frozen=True)
class TripletRecord:
    src: tuple[int, ...]
    tgt: tuple[int, ...]
    images: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "src", tuple(int(t) for t in self.src))
        object.__setattr__(self, "tgt", tuple(int(t) for t in self.tgt))
        object.__setattr__(self, "images", tuple(str(i) for i in self.images))
        if not self.src or not self.tgt:
            raise DataError("triplet source and target must be nonempty")

    def without_images(self) -> "TripletRecord":
        return TripletRecord(self.src, self.tgt, ())


@dataclass
class CollationStats:
    masked: int = 0
    fully_masked: int = 0
    unmasked_with_image: int = 0
    text_only: int = 0

    @property
    def with_image(self) -> int:
        return self.masked + self.fully_masked + self.unmasked_with_image

    @property
    def total(self) -> int:
        return self.with_image + self.text_only

    def __add__(self, other: "CollationStats") -> "CollationStats":
        return CollationStats(self.masked + other.masked, self.fully_masked + other.fully_masked,
                              self.unmasked_with_image + other.unmasked_with_image,
                              self.text_only + other.text_only)

    def as_dict(self) -> dict:
        return {"masked": self.masked, "fully_masked": self.fully_masked,
                "unmasked_with_image": self.unmasked_with_image, "text_only": self.text_only,
                "with_image": self.with_image, "total": self.total}


def stats_of(records: Iterable[TripletRecord]) -> CollationStats:
    """Counts for records of unknown provenance: image-bearing vs text-only."""
    s = CollationStats()
    for r in records:
        if r.images:
            s.unmasked_with_image += 1
        else:
            s.text_only += 1
    return s


@dataclass
class TripletDataset:
    records: list[TripletRecord]
    vocab: Vocab
    stats: CollationStats = field(default=None)

    def __post_init__(self):
        if self.stats is None:
            self.stats = stats_of(self.records)

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[TripletRecord]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def image_ids(self) -> set[str]:
        return {i for r in self.records for i in r.images}


def _mask_ids(ids: Sequence[int], vocab: Vocab, phrases: PhraseSet) -> tuple[list[int], int]:
    masked, count = phrases.mask(vocab.decode(ids))
    return vocab.encode(masked), count


def collate_pretrain(captions: TripletDataset, phrases, textonly: TripletDataset | None = None) -> TripletDataset:
    """Build the three-part pre-training mixture.

    Output order: masked caption triplets (only captions with at least one
    phrase hit), then one fully-masked triplet per caption (source is a lone
    ``<unk>``), then the text-only pairs unchanged.
    """
    phrases = phrases if isinstance(phrases, PhraseSet) else PhraseSet(phrases)
    vocab = captions.vocab
    if textonly is not None and textonly.vocab != vocab:
        raise DataError("caption and text-only datasets use different vocabularies")
    masked, fully = [], []
    for n, rec in enumerate(captions):
        if not rec.images:
            raise DataError(f"caption record {n} has no image id")
        ids, hits = _mask_ids(rec.src, vocab, phrases)
        if hits:
            masked.append(TripletRecord(ids, rec.tgt, rec.images))
        fully.append(TripletRecord((UNK_ID,), rec.tgt, rec.images))
    plain = []
    for n, rec in enumerate(textonly or ()):
        if rec.images:
            raise DataError(f"text-only record {n} carries image ids {list(rec.images)}")
        plain.append(rec)
    stats = CollationStats(masked=len(masked), fully_masked=len(fully), text_only=len(plain))
    return TripletDataset(masked + fully + plain, vocab, stats)


def collate_finetune(triplets: TripletDataset, masked: bool, phrases=()) -> TripletDataset:
    """With-image copies (source optionally masked) followed by image-stripped
    copies of the original records; output is twice the input size."""
    phrases = phrases if isinstance(phrases, PhraseSet) else PhraseSet(phrases)
    vocab = triplets.vocab
    with_image, stripped = [], []
    stats = CollationStats()
    for n, rec in enumerate(triplets):
        if not rec.images:
            raise DataError(f"fine-tuning record {n} has no image id")
        if masked:
            ids, hits = _mask_ids(rec.src, vocab, phrases)
        else:
            ids, hits = rec.src, 0
        if hits:
            stats.masked += 1
        else:
            stats.unmasked_with_image += 1
        with_image.append(TripletRecord(ids, rec.tgt, rec.images))
        stripped.append(rec.without_images())
    stats.text_only = len(stripped)
    return TripletDataset(with_image + stripped, vocab, stats)


def concat_datasets(a: TripletDataset, b: TripletDataset) -> TripletDataset:
    if a.vocab != b.vocab:
        raise DataError("cannot concatenate datasets built on different vocabularies")
    return TripletDataset(a.records + b.records, a.vocab, a.stats + b.stats)


# --- JSON Lines -------------------------------------------------------------

def read_triplet_text(path, raw: bool = False) -> list[tuple[list[str], list[str], list[str]]]:
    """Parse a triplet file into token lists, validating every line."""
    split = tokenize if raw else split_tokens
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("src"), str) or not isinstance(obj.get("tgt"), str):
                raise DataError(f"{path}:{lineno}: record needs string fields 'src' and 'tgt'")
            images = obj.get("images", [])
            if not isinstance(images, list) or not all(isinstance(i, str) for i in images):
                raise DataError(f"{path}:{lineno}: 'images' must be a list of strings")
            src, tgt = split(obj["src"]), split(obj["tgt"])
            if not src or not tgt:
                raise DataError(f"{path}:{lineno}: empty source or target")
            rows.append((src, tgt, images))
    return rows


def read_triplets(path, vocab: Vocab, raw: bool = False) -> TripletDataset:
    rows = read_triplet_text(path, raw)
    return TripletDataset([TripletRecord(vocab.encode(s), vocab.encode(t), im) for s, t, im in rows], vocab)


def write_triplets(dataset: TripletDataset, path) -> None:
    vocab = dataset.vocab
    with open(path, "w", encoding="utf-8") as fh:
        for rec in dataset:
            obj = {"src": " ".join(vocab.decode(rec.src)), "tgt": " ".join(vocab.decode(rec.tgt)),
                   "images": list(rec.images)}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def record_images(rec: TripletRecord, store: VisionEncodingStore | None) -> np.ndarray | None:
    """Stacked encodings of a record's images, or None when it has none."""
    if not rec.images:
        return None
    if store is None:
        raise DataError(f"record references images {list(rec.images)[:2]} but no vision store was given")
    return np.stack([store.lookup(i) for i in rec.images])


# --- synthetic grounded corpus ----------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Word inventory of the synthetic task. Objects are the image-determined
    content words; every other slot is recoverable from the text, up to the
    free choice between place renderings (irreducible target entropy, as in
    real translation data)."""

    objects: tuple = (("car", "auto"), ("dog", "hund"), ("cat", "katze"), ("bird", "vogel"),
                      ("boat", "boot"), ("horse", "pferd"), ("tree", "baum"), ("house", "haus"))
    # each place has two interchangeable renderings, drawn at random per record
    places: tuple = (("road", ("strasse", "weg")), ("garden", ("garten", "hof")),
                     ("beach", ("strand", "ufer")), ("river", ("fluss", "bach")))
    preps: tuple = (("near", "nahe"), ("behind", "hinter"), ("beside", "neben"))
    enc_dim: int = 32
    noise: float = 0.05

    # (source template, target template); {o} object, {p} place, {r} preposition
    templates: tuple = (
        ("a {o} is {r} the {p}", "ein {o} ist {r} der {p}"),
        ("the {p} has a {o}", "der {p} hat ein {o}"),
        ("{r} the {p} is a {o}", "{r} der {p} ist ein {o}"),
    )

    def words(self) -> list[str]:
        out = set()
        for en_t, de_t in self.templates:
            out.update(w for w in (en_t + " " + de_t).split() if not w.startswith("{"))
        for table in (self.objects, self.places, self.preps):
            for en, de in table:
                out.add(en)
                out.update((de,) if isinstance(de, str) else de)
        return sorted(out)

    def vocab(self) -> Vocab:
        return Vocab(list(SPECIALS) + self.words())


def content_word_ids(vocab: Vocab, spec: SyntheticSpec = SyntheticSpec()) -> dict[int, int]:
    """Map target-side object token id -> object index."""
    return {vocab.stoi[de]: k for k, (_, de) in enumerate(spec.objects)}


def object_encoding(k: int, spec: SyntheticSpec) -> np.ndarray:
    block = spec.enc_dim // len(spec.objects)
    if block < 1:
        raise ValueError("enc_dim too small for one block per object")
    vec = np.zeros(spec.enc_dim)
    vec[k * block:(k + 1) * block] = 1.0
    return vec


def generate_synthetic_grounded_corpus(seed: int, size: int, spec: SyntheticSpec = SyntheticSpec(),
                                       masked: bool = True) -> tuple[TripletDataset, VisionEncodingStore]:
    """Triplets whose object word is visible only in the image.

    Every record draws an object, place, preposition and template uniformly
    and independently. Its single image is a block one-hot code of the object
    plus small Gaussian noise. In the masked variant the source object word is
    replaced by ``<unk>``; the control variant leaves it in place. Both
    variants share the same draws for a given seed.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    gen = nx.rng(seed, "synthetic")
    vocab = spec.vocab()
    records, images = [], {}
    for i in range(size):
        k = int(gen.integers(len(spec.objects)))
        place = spec.places[int(gen.integers(len(spec.places)))]
        prep = spec.preps[int(gen.integers(len(spec.preps)))]
        src_t, tgt_t = spec.templates[int(gen.integers(len(spec.templates)))]
        obj = spec.objects[k]
        src = src_t.format(o=UNK if masked else obj[0], p=place[0], r=prep[0]).split()
        renderings = (place[1],) if isinstance(place[1], str) else place[1]
        place_de = renderings[int(gen.integers(len(renderings)))]
        tgt = tgt_t.format(o=obj[1], p=place_de, r=prep[1]).split()
        image_id = f"syn{seed}-{i:06d}"
        images[image_id] = object_encoding(k, spec) + gen.normal(0.0, spec.noise, spec.enc_dim)
        records.append(TripletRecord(vocab.encode(src), vocab.encode(tgt), (image_id,)))
    ds = TripletDataset(records, vocab, CollationStats(masked=size) if masked else CollationStats(unmasked_with_image=size))
    return ds, VisionEncodingStore.from_entries(images, spec.enc_dim)
