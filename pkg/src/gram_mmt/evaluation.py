"""Corpus BLEU4, perplexity, contrastive (image-disambiguation) scoring and the
multimodal / text-only / non-matching evaluation regimes."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .datapipe import DataError, TripletDataset, Vocab, split_tokens, tokenize
from .model import PAD_ID, greedy_decode, make_batch

REGIMES = ("multimodal", "text_only", "non_matching")
TOKENIZATION_NOTE = "BLEU computed on the artifact's word-level token streams (no SacreBLEU signature)"


# --- BLEU -------------------------------------------------------------------

def _ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Unsmoothed corpus BLEU4 in [0, 100], one reference per hypothesis."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            h = _ngram_counts(hyp, n)
            r = _ngram_counts(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


# --- perplexity ---------------------------------------------------------------

def sequence_nll(model, srcs, tgts, image_sets) -> np.ndarray:
    """Mean per-token negative log-likelihood (EOS included) of each target."""
    batch = make_batch(srcs, tgts, image_sets, model.config.enc_dim)
    with nx.no_grad():
        logits = model(batch).data.astype(np.float64)
    logp = nx.log_softmax_np(logits)
    gold = np.take_along_axis(logp, batch.tgt_out[..., None], axis=-1)[..., 0]
    keep = batch.tgt_out != PAD_ID
    return -(gold * keep).sum(axis=1) / keep.sum(axis=1)


def perplexity(model, src: Sequence[int], images, tgt: Sequence[int]) -> float:
    if not tgt:
        raise ValueError("perplexity needs a nonempty target")
    return float(np.exp(sequence_nll(model, [src], [tgt], [images])[0]))


# --- contrastive scoring ----------------------------------------------------

@dataclass
class CommuteInstance:
    src: tuple[int, ...]
    cases: tuple  # two (image_id, target ids) pairs

    def __post_init__(self):
        if len(self.cases) != 2:
            raise DataError("a contrastive instance needs exactly two cases")
        self.cases = tuple((str(img), tuple(tgt)) for img, tgt in self.cases)
        if self.cases[0][1] == self.cases[1][1]:
            raise DataError("the two case targets must differ")


def read_commute(path, vocab: Vocab, raw: bool = False) -> list[CommuteInstance]:
    split = tokenize if raw else split_tokens
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                cases = [(c["image"], vocab.encode(split(c["tgt"]))) for c in obj["cases"]]
                out.append(CommuteInstance(tuple(vocab.encode(split(obj["src"]))), tuple(cases)))
            except (json.JSONDecodeError, KeyError, TypeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: bad contrastive instance ({exc})") from None
    return out


def write_commute(instances: Sequence[CommuteInstance], vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            obj = {"src": " ".join(vocab.decode(inst.src)),
                   "cases": [{"image": img, "tgt": " ".join(vocab.decode(t))} for img, t in inst.cases]}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def contrastive_score(instances: Sequence[CommuteInstance],
                      perplexities: Callable[[tuple, str, list], Sequence[float]]) -> float:
    """Mean credit over both cases of every instance.

    ``perplexities(src, image_id, [tgt_a, tgt_b])`` scores both candidate
    targets under one image. Strictly lower perplexity for the matching target
    earns 1, a tie 0.5, otherwise 0.
    """
    if not instances:
        raise ValueError("contrastive scoring needs at least one instance")
    credit = 0.0
    for inst in instances:
        cands = [inst.cases[0][1], inst.cases[1][1]]
        for k, (image_id, _) in enumerate(inst.cases):
            ppl = perplexities(inst.src, image_id, cands)
            right, wrong = ppl[k], ppl[1 - k]
            credit += 1.0 if right < wrong else 0.5 if right == wrong else 0.0
    return credit / (2 * len(instances))


def derangement(n: int, seed: int) -> np.ndarray:
    """Uniform random permutation of range(n) with no fixed point."""
    if n < 2:
        raise ValueError("a derangement needs at least two items")
    gen = nx.rng(seed, "derangement", n)
    while True:
        perm = gen.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def commute_score(model, instances: Sequence[CommuteInstance], store=None,
                  regime: str = "multimodal", seed: int = 13) -> float:
    _check_regime(regime)
    image_for = {}
    if regime == "non_matching":
        pool = [img for inst in instances for img, _ in inst.cases]
        perm = derangement(len(pool), seed)
        image_for = {i: pool[j] for i, j in enumerate(perm)}
    slot = iter(range(2 * len(instances)))

    def ppls(src, image_id, cands):
        i = next(slot)
        if regime == "text_only":
            enc = None
        else:
            if store is None:
                raise DataError(f"regime {regime} needs a vision store")
            enc = store.lookup(image_for.get(i, image_id))[None]
        nll = sequence_nll(model, [src, src], cands, [enc, enc])
        return list(np.exp(nll))

    return contrastive_score(instances, ppls)


# --- full evaluation --------------------------------------------------------

@dataclass
class EvalReport:
    regime: str
    seed: int
    bleu: dict = field(default_factory=dict)
    commute: float | None = None
    decode: dict = field(default_factory=dict)
    tokenization: str = TOKENIZATION_NOTE

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def _check_regime(regime):
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")


def regime_image_ids(dataset: TripletDataset, regime: str, seed: int) -> list[tuple[str, ...]]:
    """Per-record image ids under ``regime`` (empty tuples for text-only)."""
    _check_regime(regime)
    if regime == "text_only":
        return [() for _ in dataset]
    ids = [r.images for r in dataset]
    if not any(ids):
        raise DataError(f"regime {regime} needs images but the test set has none")
    if regime == "multimodal":
        return ids
    with_images = [i for i, im in enumerate(ids) if im]
    perm = derangement(len(with_images), seed)
    out = list(ids)
    for dst, src in zip(with_images, perm):
        out[dst] = ids[with_images[src]]
    return out


def translate(model, dataset: TripletDataset, image_ids, store=None, max_len: int = 50,
              beam: int = 1, chunk: int = 64) -> list[list[int]]:
    hyps = []
    for start in range(0, len(dataset), chunk):
        recs = dataset.records[start:start + chunk]
        ims = [None if not ids else np.stack([store.lookup(i) for i in ids])
               for ids in image_ids[start:start + chunk]]
        hyps.extend(greedy_decode(model, [r.src for r in recs], ims, max_len, beam))
    return hyps


def evaluate(model, testsets: dict[str, TripletDataset], regime: str, seed: int = 13, store=None,
             commute: Sequence[CommuteInstance] | None = None, max_len: int = 50,
             beam: int = 1) -> EvalReport:
    """Decode every test set under ``regime`` and score it.

    ``text_only`` feeds the zero encoding to every record and never touches
    ``store``; ``non_matching`` gives each record the images of another
    record, drawn as a seeded derangement.
    """
    _check_regime(regime)
    report = EvalReport(regime=regime, seed=seed, decode={"beam": beam, "max_len": max_len})
    for name, ds in testsets.items():
        ids = regime_image_ids(ds, regime, seed)
        use_store = None if regime == "text_only" else store
        if use_store is None and any(ids):
            raise DataError(f"test set {name!r} references images but no vision store was given")
        hyps = translate(model, ds, ids, use_store, max_len, beam)
        report.bleu[name] = bleu4(hyps, [r.tgt for r in ds])
    if commute:
        report.commute = commute_score(model, commute, None if regime == "text_only" else store, regime, seed)
    return report


def validation_bleu(model, dataset: TripletDataset, store=None, max_len: int = 50) -> float:
    ids = [r.images for r in dataset]
    return bleu4(translate(model, dataset, ids, store, max_len), [r.tgt for r in dataset])
