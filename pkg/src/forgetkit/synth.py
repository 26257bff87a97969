"""Synthetic stand-ins for the generic, bio-medical and clinical corpora.

Each generator owns a lexicon with its own alphabet, word-length range and
punctuation habits. Words follow a sparse first-order Markov chain so that
context carries information for the masked-LM objective. A fixed share of the
lexicon is marked as entities; their character spans are the tags of the
probing task.
"""
from __future__ import annotations

import hashlib
import json
import string
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import tokenize

GRAMMARS = {
    "newswire": {
        "alphabet": string.ascii_lowercase,
        "word_len": (3, 7),
        "sentence_len": (6, 12),
        "sentence_end": ". ",
        "joiner": " ",
        "capitalize": True,
    },
    "biomed": {
        "alphabet": string.ascii_lowercase + "0123",
        "word_len": (3, 6),
        "sentence_len": (4, 9),
        "sentence_end": "; ",
        "joiner": "-",
        "capitalize": False,
    },
    "clinical": {
        "alphabet": string.ascii_lowercase,
        "word_len": (2, 5),
        "sentence_len": (3, 6),
        "sentence_end": ": ",
        "joiner": "/",
        "capitalize": False,
    },
}


class DomainCheckError(ValueError):
    """Generated domains are not distinguishable enough."""


@dataclass(frozen=True)
class SyntheticDomainSpec:
    name: str
    grammar: str = "newswire"
    lexicon_size: int = 120
    zipf: float = 1.1
    successors: int = 4
    entity_share: float = 0.2
    num_docs: int = 200
    tokens_per_doc: int = 400

    def __post_init__(self):
        if self.grammar not in GRAMMARS:
            raise ValueError(f"unknown grammar {self.grammar!r}; choose from {sorted(GRAMMARS)}")


class DomainGenerator:
    def __init__(self, spec: SyntheticDomainSpec, seed: int):
        self.spec = spec
        self.rules = GRAMMARS[spec.grammar]
        # the lexicon depends on the grammar and the seed only, so a domain's
        # probe data and corpus share words
        lex_seed = int.from_bytes(hashlib.sha256(f"{spec.name}:{seed}".encode()).digest()[:4], "little")
        rng = np.random.default_rng(lex_seed)
        alphabet = self.rules["alphabet"]
        lo, hi = self.rules["word_len"]
        words: list[str] = []
        while len(words) < spec.lexicon_size:
            w = "".join(rng.choice(list(alphabet), size=rng.integers(lo, hi + 1)))
            if w not in words:
                words.append(w)
        self.words = words
        n = len(words)
        self.entities = set(rng.choice(n, size=max(1, int(round(spec.entity_share * n))), replace=False).tolist())
        ranks = np.arange(1, n + 1, dtype=float)
        self.unigram = ranks ** -spec.zipf
        self.unigram /= self.unigram.sum()
        self.next_words = np.array([rng.choice(n, size=spec.successors, replace=False, p=self.unigram)
                                    for _ in range(n)])

    def sentence(self, rng: np.random.Generator) -> list[tuple[str, bool]]:
        lo, hi = self.rules["sentence_len"]
        length = int(rng.integers(lo, hi + 1))
        w = int(rng.choice(len(self.words), p=self.unigram))
        out = []
        for _ in range(length):
            out.append((self.words[w], w in self.entities))
            w = int(self.next_words[w, rng.integers(self.spec.successors)]) if rng.random() < 0.9 \
                else int(rng.choice(len(self.words), p=self.unigram))
        return out

    def document(self, rng: np.random.Generator) -> tuple[str, np.ndarray]:
        """Text of one document and a per-byte entity tag array."""
        pieces: list[tuple[str, int]] = []
        size = 0
        while size < self.spec.tokens_per_doc:
            sent = self.sentence(rng)
            for j, (word, is_ent) in enumerate(sent):
                if j == 0 and self.rules["capitalize"]:
                    word = word.capitalize()
                pieces.append((word, int(is_ent)))
                sep = self.rules["joiner"] if j < len(sent) - 1 else self.rules["sentence_end"]
                pieces.append((sep, 0))
                size += len(word) + len(sep)
        text = "".join(p for p, _ in pieces).strip()
        tags = np.concatenate([np.full(len(p), t, dtype=np.int64) for p, t in pieces])[:len(text)]
        return text, tags


def generate_text(spec: SyntheticDomainSpec, seed: int) -> str:
    gen = DomainGenerator(spec, seed)
    rng = np.random.default_rng([seed, 1])
    return "\n\n".join(gen.document(rng)[0] for _ in range(spec.num_docs)) + "\n"


def probe_data(spec: SyntheticDomainSpec, seed: int, num_docs: int = 40, length: int = 48):
    """Token-tagging probe for one domain: segments with per-position entity tags.

    Returns ``(segments, tags)`` where both are lists of int arrays starting with
    ``<s>`` (whose tag is -1, i.e. ignored).
    """
    from .model import BOS_ID

    gen = DomainGenerator(spec, seed)
    rng = np.random.default_rng([seed, 2])
    segs, tags = [], []
    for _ in range(num_docs):
        text, tag = gen.document(rng)
        ids = tokenize(text)
        for off in range(0, len(ids) - length + 1, length):
            segs.append(np.concatenate([[BOS_ID], ids[off:off + length]]))
            tags.append(np.concatenate([[-1], tag[off:off + length]]))
    return segs, tags


def byte_histograms(text: str, chunk: int = 200) -> np.ndarray:
    docs = [d for d in text.split("\n\n") if d.strip()]
    rows = []
    for d in docs:
        b = np.frombuffer(d.encode("utf-8"), dtype=np.uint8)
        for off in range(0, len(b), chunk):
            rows.append(np.bincount(b[off:off + chunk], minlength=256))
    return np.array(rows, dtype=float)


def domain_classifier_accuracy(texts: dict[str, str], seed: int) -> float:
    """Held-out accuracy of a multinomial naive-Bayes bag-of-bytes domain classifier."""
    rng = np.random.default_rng(seed)
    X_tr, y_tr, X_te, y_te = [], [], [], []
    for label, text in enumerate(texts.values()):
        H = byte_histograms(text)
        perm = rng.permutation(len(H))
        cut = len(H) // 2
        X_tr.append(H[perm[:cut]]); y_tr += [label] * cut
        X_te.append(H[perm[cut:]]); y_te += [label] * (len(H) - cut)
    X_tr, X_te = np.vstack(X_tr), np.vstack(X_te)
    y_tr, y_te = np.array(y_tr), np.array(y_te)
    k = len(texts)
    log_prob = np.stack([np.log(X_tr[y_tr == c].sum(axis=0) + 1.0) for c in range(k)])
    log_prob -= np.log(np.exp(log_prob).sum(axis=1, keepdims=True))
    prior = np.log(np.bincount(y_tr, minlength=k) / len(y_tr))
    pred = np.argmax(X_te @ log_prob.T + prior, axis=1)
    return float((pred == y_te).mean())


def gen_domains(specs: list[SyntheticDomainSpec], seed: int, outdir, min_accuracy: float = 0.9) -> dict:
    """Write one corpus file per spec plus ``manifest.json``; returns the manifest."""
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("domain names must be unique")
    texts = {s.name: generate_text(s, seed) for s in specs}
    acc = domain_classifier_accuracy(texts, seed) if len(specs) >= 2 else 1.0
    if acc <= min_accuracy:
        raise DomainCheckError(f"domain classifier accuracy {acc:.3f} <= {min_accuracy}")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, text in texts.items():
        path = outdir / f"{name}.txt"
        path.write_text(text, encoding="utf-8")
        files[name] = str(path.name)
    manifest = {
        "seed": seed,
        "specs": [asdict(s) for s in specs],
        "files": files,
        "classifier_accuracy": acc,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


DEFAULT_SPECS = [
    SyntheticDomainSpec("generic", "newswire"),
    SyntheticDomainSpec("biomed", "biomed"),
    SyntheticDomainSpec("clinical", "clinical"),
]
