"""Text corpora: tokenization, vocabularies, and the bundled desk dataset.

Vocabularies are built from the training split only: special tokens
first, then remaining tokens by descending frequency with lexicographic
tie-break, so two ingests of the same files assign identical ids. The
bundled desk corpus is synthesized English-like text, generated
deterministically so it can be regenerated byte-for-byte from source.
"""

from dataclasses import dataclass, field
from collections import Counter
from pathlib import Path

import numpy as np

from .exceptions import DataError

UNK = "<unk>"
EOS = "<eos>"

DATA_DIR = Path(__file__).with_name("data")
DESK_FILES = ("desk_train.txt", "desk_valid.txt", "desk_test.txt")


def read_text(path) -> str:
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file {path} does not exist")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"corpus file {path} is not valid UTF-8: {e}") from e
    if not text:
        raise DataError(f"corpus file {path} is empty")
    return text


def tokenize(text: str, mode: str) -> list:
    """word: whitespace split, one <eos> per line; char: every character."""
    if mode == "word":
        out = []
        for line in text.splitlines():
            out.extend(line.split())
            out.append(EOS)
        return out
    if mode == "char":
        return list(text)
    raise DataError(f"unknown tokenization mode {mode!r}")


def build_vocab(tokens, specials) -> list:
    counts = Counter(tokens)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return list(specials) + [t for t in ranked if t not in specials]


@dataclass
class Corpus:
    """Token id streams for the three splits plus their shared vocabulary."""

    vocab: list
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    mode: str = "char"
    token_to_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.vocab)}
        if len(self.token_to_id) != len(self.vocab):
            raise DataError("vocabulary contains duplicate tokens")
        for name in ("train", "valid", "test"):
            ids = np.asarray(getattr(self, name), dtype=np.int64)
            if ids.size and (ids.min() < 0 or ids.max() >= len(self.vocab)):
                raise DataError(f"{name} split has ids outside the vocabulary")
            setattr(self, name, ids)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, tokens) -> np.ndarray:
        unk = self.token_to_id[UNK]
        return np.array([self.token_to_id.get(t, unk) for t in tokens],
                        dtype=np.int64)

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)

    def save(self, path) -> None:
        np.savez(path, vocab=np.array(self.vocab, dtype=np.str_),
                 train=self.train, valid=self.valid, test=self.test,
                 mode=np.str_(self.mode))

    @classmethod
    def load(cls, path) -> "Corpus":
        path = Path(path)
        if not path.exists():
            raise DataError(f"corpus archive {path} does not exist")
        try:
            with np.load(path, allow_pickle=False) as z:
                return cls(vocab=[str(t) for t in z["vocab"]],
                           train=z["train"], valid=z["valid"], test=z["test"],
                           mode=str(z["mode"]))
        except (KeyError, ValueError, OSError) as e:
            raise DataError(f"corpus archive {path} is malformed: {e}") from e


def ingest_corpus(train_path, valid_path, test_path,
                  mode: str = "char") -> Corpus:
    """Tokenize three files into one corpus; ids come from the train split."""
    texts = [read_text(p) for p in (train_path, valid_path, test_path)]
    streams = [tokenize(t, mode) for t in texts]
    specials = (UNK, EOS) if mode == "word" else (UNK,)
    vocab = build_vocab(streams[0], specials)
    t2i = {t: i for i, t in enumerate(vocab)}
    unk = t2i[UNK]

    def encode(tokens):
        return np.array([t2i.get(t, unk) for t in tokens], dtype=np.int64)

    return Corpus(vocab=vocab, train=encode(streams[0]),
                  valid=encode(streams[1]), test=encode(streams[2]), mode=mode)


# -- synthetic desk text ------------------------------------------------------------

_DETERMINERS = ("the", "a", "each", "this", "some")
_NOUNS = ("miller", "weaver", "garden", "river", "letter", "ladder",
          "market", "lantern", "harbor", "meadow", "walnut", "sparrow",
          "basket", "ribbon", "candle", "satchel", "orchard", "spindle")
_VERBS = ("carries", "watches", "mends", "gathers", "follows", "paints",
          "borrows", "measures", "shelters", "trades")
_ADJECTIVES = ("quiet", "silver", "narrow", "heavy", "pale", "woven",
               "early", "distant", "round", "gentle")
_PREPOSITIONS = ("near", "beside", "under", "along", "behind")
_CONNECTIVES = ("and then", "while", "because", "although")


def _noun_phrase(rng) -> str:
    words = [_zipf_pick(rng, _DETERMINERS)]
    if rng.random() < 0.45:
        words.append(_zipf_pick(rng, _ADJECTIVES))
    words.append(_zipf_pick(rng, _NOUNS))
    return " ".join(words)


def _zipf_pick(rng, items):
    # 1/(k+1) weights: common words stay common, like running text
    w = 1.0 / np.arange(1, len(items) + 1)
    return items[rng.choice(len(items), p=w / w.sum())]


def _clause(rng) -> str:
    parts = [_noun_phrase(rng), _zipf_pick(rng, _VERBS), _noun_phrase(rng)]
    if rng.random() < 0.35:
        parts.append(_zipf_pick(rng, _PREPOSITIONS))
        parts.append(_noun_phrase(rng))
    return " ".join(parts)


def _sentence(rng) -> str:
    s = _clause(rng)
    if rng.random() < 0.25:
        s = f"{s}, {_zipf_pick(rng, _CONNECTIVES)} {_clause(rng)}"
    return s + "."


def synthesize_text(n_chars: int, seed: int = 0) -> str:
    """Grammar-generated prose of at least n_chars characters."""
    if n_chars <= 0:
        raise DataError(f"requested {n_chars} characters of text")
    rng = np.random.default_rng(seed)
    paragraphs = []
    total = 0
    while total < n_chars:
        n_sent = int(rng.integers(3, 7))
        para = " ".join(_sentence(rng) for _ in range(n_sent))
        paragraphs.append(para)
        total += len(para) + 1
    return "\n".join(paragraphs) + "\n"


def write_desk_corpus(directory=None, total_chars: int = 200_000,
                      seed: int = 7) -> tuple:
    """Write train/valid/test files (80/10/10 contiguous) and return paths."""
    directory = Path(directory) if directory is not None else DATA_DIR
    directory.mkdir(parents=True, exist_ok=True)
    text = synthesize_text(total_chars, seed=seed)
    cut1 = int(len(text) * 0.8)
    cut2 = int(len(text) * 0.9)
    pieces = (text[:cut1], text[cut1:cut2], text[cut2:])
    paths = []
    for name, piece in zip(DESK_FILES, pieces):
        path = directory / name
        path.write_text(piece, encoding="utf-8")
        paths.append(path)
    return tuple(paths)


def desk_corpus_paths() -> tuple:
    """Bundled desk dataset file paths, regenerating them if absent."""
    paths = tuple(DATA_DIR / name for name in DESK_FILES)
    if not all(p.exists() for p in paths):
        return write_desk_corpus()
    return paths


def load_desk_corpus(mode: str = "char") -> Corpus:
    return ingest_corpus(*desk_corpus_paths(), mode=mode)
