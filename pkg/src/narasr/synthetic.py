"""Synthetic speech task and its on-disk dataset layout.

Each real token owns a fixed random prototype vector. An utterance's
transcript is drawn from a random Markov chain over the tokens (so there is
something for the LM to learn); every token is then "spoken" for 2-4
frames of its prototype plus Gaussian noise. The first frame of every token
additionally carries a shared onset vector, which keeps back-to-back
repeats of the same token separable.

Directory layout written by :func:`save_dataset`::

    vocab.txt         one token per line, line number = id
    spec.json         the SyntheticSpec and seed
    <split>.trn       utt_id TAB space-separated tokens
    <split>.idx       utt_id TAB byte_offset TAB frames TAB dim
    <split>.feats     little-endian float64 frames, concatenated
    lm_corpus.txt     text-only sentences from the same Markov chain
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .vocab import Vocabulary, load_vocab, save_vocab

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    num_real: int = 20
    d_in: int = 16
    frames_min: int = 2
    frames_max: int = 4
    noise_std: float = 0.3
    min_len: int = 3
    max_len: int = 8
    silence_max: int = 0  # leading/trailing silence frames, uniform in [0, silence_max]
    onset_marker: bool = True
    markov_concentration: float = 0.3
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    n_lm_corpus: int = 5000

    def __post_init__(self):
        if self.frames_min < 2 or self.frames_max < self.frames_min:
            # two frames per token keep every transcript alignable, repeats included
            raise ConfigurationError("need 2 <= frames_min <= frames_max")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigurationError("need 1 <= min_len <= max_len")
        if self.num_real < 1 or self.d_in < 1 or self.noise_std < 0:
            raise ConfigurationError(f"invalid synthetic spec: {self}")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.synthetic(self.num_real)

    @classmethod
    def from_json(cls, path) -> SyntheticSpec:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            if isinstance(raw, dict) and isinstance(raw.get("spec"), dict):
                raw = raw["spec"]  # the spec.json that save_dataset writes
            return cls(**raw)
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"{path}: bad synthetic spec ({exc})") from exc


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    tokens: list[int]


@dataclass
class Dataset:
    vocab: Vocabulary
    splits: dict[str, list[Utterance]]
    lm_corpus: list[list[int]] = field(default_factory=list)
    spec: SyntheticSpec | None = None
    seed: int | None = None

    def __getitem__(self, split: str) -> list[Utterance]:
        return self.splits[split]


class _World:
    """The fixed acoustic and linguistic structure behind one seed."""

    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        self.spec = spec
        n = spec.num_real
        self.prototypes = rng.normal(size=(n, spec.d_in))
        self.silence = rng.normal(scale=0.3, size=spec.d_in)
        self.onset = rng.normal(size=spec.d_in)
        self.initial = np.full(n, 1.0 / n)
        self.transitions = rng.dirichlet(np.full(n, spec.markov_concentration), size=n)

    def sentence(self, rng) -> list[int]:
        s = self.spec
        L = int(rng.integers(s.min_len, s.max_len + 1))
        toks = [int(rng.choice(s.num_real, p=self.initial))]
        for _ in range(L - 1):
            toks.append(int(rng.choice(s.num_real, p=self.transitions[toks[-1]])))
        return [t + 2 for t in toks]  # ids 0/1 are blank/unk

    def speak(self, tokens, rng) -> np.ndarray:
        s = self.spec
        chunks = []
        if s.silence_max:
            chunks.append(np.tile(self.silence, (int(rng.integers(0, s.silence_max + 1)), 1)))
        for tok in tokens:
            k = int(rng.integers(s.frames_min, s.frames_max + 1))
            span = np.tile(self.prototypes[tok - 2], (k, 1))
            if s.onset_marker:
                span[0] += self.onset
            chunks.append(span)
        if s.silence_max:
            chunks.append(np.tile(self.silence, (int(rng.integers(0, s.silence_max + 1)), 1)))
        x = np.concatenate(chunks)
        if s.noise_std:
            x = x + rng.normal(scale=s.noise_std, size=x.shape)
        return x


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Deterministic dataset for ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    world = _World(spec, rng)
    splits = {}
    for name, n in zip(SPLITS, (spec.n_train, spec.n_dev, spec.n_test)):
        utts = []
        for i in range(n):
            toks = world.sentence(rng)
            utts.append(Utterance(f"{name}-{i:05d}", world.speak(toks, rng), toks))
        splits[name] = utts
    corpus = [world.sentence(rng) for _ in range(spec.n_lm_corpus)]
    return Dataset(spec.vocab, splits, corpus, spec, seed)


# ---------------------------------------------------------------- file IO


def write_transcripts(path, items, vocab: Vocabulary) -> None:
    """``utt_id TAB tokens`` lines for (utt_id, token ids) pairs."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for utt_id, ids in items:
            f.write(f"{utt_id}\t{' '.join(vocab.decode(ids))}\n")


def read_transcripts(path, vocab: Vocabulary) -> list[tuple[str, list[int]]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, sep, text = line.partition("\t")
            if not sep:
                raise FormatError(f"{path}:{n}: expected 'utt_id<TAB>tokens'")
            words = text.split()
            unknown = [w for w in words if w not in vocab.tokens]
            if unknown:
                raise FormatError(f"{path}:{n}: tokens not in vocabulary: {unknown}")
            out.append((utt_id, vocab.encode(words)))
    return out


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_vocab(ds.vocab, out / "vocab.txt")
    if ds.spec is not None:
        meta = {"spec": asdict(ds.spec), "seed": ds.seed}
        (out / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for name, utts in ds.splits.items():
        write_transcripts(out / f"{name}.trn", [(u.utt_id, u.tokens) for u in utts], ds.vocab)
        offset = 0
        with open(out / f"{name}.feats", "wb") as fb, \
                open(out / f"{name}.idx", "w", encoding="utf-8", newline="\n") as fi:
            for u in utts:
                raw = np.ascontiguousarray(u.features, dtype="<f8").tobytes()
                fb.write(raw)
                fi.write(f"{u.utt_id}\t{offset}\t{u.features.shape[0]}\t{u.features.shape[1]}\n")
                offset += len(raw)
    with open(out / "lm_corpus.txt", "w", encoding="utf-8", newline="\n") as f:
        for sent in ds.lm_corpus:
            f.write(" ".join(ds.vocab.decode(sent)) + "\n")


def read_token_corpus(path, vocab: Vocabulary) -> list[list[int]]:
    """Plain-text corpus: one sentence of space-separated tokens per line."""
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            words = line.split()
            if not words:
                continue
            unknown = [w for w in words if w not in vocab.tokens]
            if unknown:
                raise FormatError(f"{path}:{n}: tokens not in vocabulary: {unknown}")
            out.append(vocab.encode(words))
    return out


def load_split(data_dir, split: str, vocab: Vocabulary) -> list[Utterance]:
    d = Path(data_dir)
    trn = dict(read_transcripts(d / f"{split}.trn", vocab))
    blob = (d / f"{split}.feats").read_bytes()
    utts = []
    with open(d / f"{split}.idx", encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise FormatError(f"{d / (split + '.idx')}:{n}: expected 4 tab-separated fields")
            utt_id, offset, frames, dim = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
            nbytes = frames * dim * 8
            if offset + nbytes > len(blob):
                raise FormatError(f"{split}.feats: utterance {utt_id} runs past end of file")
            if utt_id not in trn:
                raise FormatError(f"{split}.trn: no transcript for {utt_id}")
            feats = np.frombuffer(blob, dtype="<f8", count=frames * dim, offset=offset)
            utts.append(Utterance(utt_id, feats.reshape(frames, dim).astype(np.float64), trn[utt_id]))
    return utts


def load_dataset(data_dir, splits=SPLITS) -> Dataset:
    d = Path(data_dir)
    vocab = load_vocab(d / "vocab.txt")
    loaded = {s: load_split(d, s, vocab) for s in splits if (d / f"{s}.idx").exists()}
    corpus = read_token_corpus(d / "lm_corpus.txt", vocab) if (d / "lm_corpus.txt").exists() else []
    spec = seed = None
    if (d / "spec.json").exists():
        meta = json.loads((d / "spec.json").read_text(encoding="utf-8"))
        spec, seed = SyntheticSpec(**meta["spec"]), meta["seed"]
    return Dataset(vocab, loaded, corpus, spec, seed)
