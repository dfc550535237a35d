"""Text-corpus tooling: filters, lexicon LID, CMI, vocabulary, and the
synthetic bilingual generator.

Language A is the Malay-like side (prompt token ``<|ms|>``), language B the
English-like side (``<|en|>``). The generator builds two disjoint
pseudo-word vocabularies with bigram grammars, splices code-switched
utterances from alternating language segments, and synthesizes "audio" as
per-token codebook vectors with seeded jitter. A configurable fraction of
cross-language word pairs share a codebook vector (homophones), so
transcription genuinely needs language context, not just acoustics.
"""

from __future__ import annotations

import json
import os
import zlib
from collections import Counter
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DataError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
PROMPT_A, PROMPT_B = "<|ms|>", "<|en|>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK, PROMPT_A, PROMPT_B)


class Vocab:
    """Bijective word/id map with fixed special-token ids (0..5)."""

    def __init__(self, words):
        words = list(words)
        if len(set(words)) != len(words):
            raise ConfigError("vocabulary words must be unique")
        if any(w in SPECIAL_TOKENS for w in words):
            raise ConfigError("special tokens may not appear in the word list")
        self.tokens = list(SPECIAL_TOKENS) + words
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id = self._ids[PAD]
        self.bos_id = self._ids[BOS]
        self.eos_id = self._ids[EOS]
        self.unk_id = self._ids[UNK]

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.strip()]
        if tokens[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise ConfigError(f"{path}: vocab file must start with the special tokens")
        return cls(tokens[len(SPECIAL_TOKENS):])


class Lexicon:
    """Disjoint word lists for the two languages; everything else is unknown."""

    def __init__(self, lang_a, lang_b):
        self.lang_a = frozenset(lang_a)
        self.lang_b = frozenset(lang_b)
        overlap = self.lang_a & self.lang_b
        if overlap:
            raise ConfigError(f"lexicon lists must be disjoint; shared: {sorted(overlap)[:5]}")

    def tag(self, word: str) -> str:
        if word in self.lang_a:
            return "A"
        if word in self.lang_b:
            return "B"
        return "unknown"

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for w in sorted(self.lang_a):
                f.write(f"{w}\tA\n")
            for w in sorted(self.lang_b):
                f.write(f"{w}\tB\n")

    @classmethod
    def load(cls, path: str) -> "Lexicon":
        a, b = [], []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                word, lang = line.rstrip("\n").split("\t")
                (a if lang == "A" else b).append(word)
        return cls(a, b)


def lexicon_lid(word: str, lexicon: Lexicon) -> str:
    """Exact-lookup language id: 'A', 'B', or 'unknown'."""
    return lexicon.tag(word)


@dataclass(frozen=True)
class Utterance:
    uid: str
    text: str
    words: tuple
    tags: tuple

    def __post_init__(self):
        if len(self.words) != len(self.tags):
            raise DataError(f"{self.uid}: {len(self.words)} words but {len(self.tags)} tags")

    @classmethod
    def from_text(cls, uid: str, text: str, lexicon: Lexicon) -> "Utterance":
        words = tuple(text.split())
        tags = tuple(lexicon.tag(w) for w in words)
        return cls(uid, text, words, tags)


@dataclass
class PairedExample:
    """An utterance with synthetic acoustic features and its prompt tokens
    (usually the single dominant-language token; the general-domain
    pretraining split mixes in the combined two-token prompt so the base
    model is robust to either prefix length)."""

    utterance: Utterance
    features: np.ndarray
    prompt: tuple


def dominant_language(tags) -> str:
    """'A' or 'B' by word count; ties and all-unknown go to 'B'."""
    counts = Counter(tags)
    return "A" if counts.get("A", 0) > counts.get("B", 0) else "B"


# ---------------------------------------------------------------------------
# filters


def filter_repeated_ngrams(words, n_set=(2, 3), max_occurrences=4) -> bool:
    """Keep unless any n-gram occurs more than `max_occurrences` times.

    Occurrences are counted with overlap, the stricter reading.
    """
    words = list(words)
    for n in n_set:
        counts = Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))
        if counts and max(counts.values()) > max_occurrences:
            return False
    return True


def filter_min_tokens(words, min_tokens=32) -> bool:
    """Keep iff the utterance has at least `min_tokens` tokens."""
    return len(list(words)) >= min_tokens


@dataclass
class FilterRule:
    name: str
    keep: object  # callable(words) -> bool

    @classmethod
    def parse(cls, rule: str) -> "FilterRule":
        """Parse 'ngram:2,3:4' or 'mintok:32' rule strings."""
        parts = rule.split(":")
        if parts[0] == "ngram":
            if len(parts) != 3:
                raise ConfigError(f"bad ngram rule {rule!r}; expected ngram:N,N:MAX")
            ns = tuple(int(x) for x in parts[1].split(","))
            cap = int(parts[2])
            return cls(rule, lambda w, ns=ns, cap=cap: filter_repeated_ngrams(w, ns, cap))
        if parts[0] == "mintok":
            if len(parts) != 2:
                raise ConfigError(f"bad mintok rule {rule!r}; expected mintok:N")
            k = int(parts[1])
            return cls(rule, lambda w, k=k: filter_min_tokens(w, k))
        raise ConfigError(f"unknown filter rule {rule!r}")


@dataclass
class FilterReport:
    input_count: int = 0
    kept: int = 0
    rejected_by_rule: dict = field(default_factory=dict)

    def conserves_counts(self) -> bool:
        return self.kept + sum(self.rejected_by_rule.values()) == self.input_count

    def to_dict(self) -> dict:
        return {"input": self.input_count, "kept": self.kept,
                "rejected_by_rule": dict(self.rejected_by_rule)}


def run_filters(utterances, rules) -> tuple[list, FilterReport]:
    """Apply rules per utterance; an utterance counts against the first
    rule that rejects it. Output order equals input order."""
    rules = [r if isinstance(r, FilterRule) else FilterRule.parse(r) for r in rules]
    report = FilterReport(rejected_by_rule={r.name: 0 for r in rules})
    kept = []
    for utt in utterances:
        report.input_count += 1
        words = utt.words if isinstance(utt, Utterance) else tuple(str(utt).split())
        for rule in rules:
            if not rule.keep(words):
                report.rejected_by_rule[rule.name] += 1
                break
        else:
            kept.append(utt)
            report.kept += 1
    return kept, report


# ---------------------------------------------------------------------------
# code-mixing index


def cmi(utt: Utterance) -> float:
    """Code-mixing index in [0, 100]: 0 when monolingual (or untagged),
    100*(1 - dominant-language fraction among tagged words) otherwise."""
    n = len(utt.words)
    if n == 0:
        raise DataError(f"{utt.uid}: empty utterance has no CMI")
    counts = Counter(t for t in utt.tags if t != "unknown")
    tagged = sum(counts.values())
    if tagged == 0:
        return 0.0
    return 100.0 * (1.0 - max(counts.values()) / tagged)


def corpus_cmi(utterances) -> tuple[float, int]:
    """Unweighted mean of per-utterance CMI plus the utterance count."""
    utterances = list(utterances)
    if not utterances:
        raise DataError("empty corpus has no CMI")
    values = [cmi(u) for u in utterances]
    return sum(values) / len(values), len(values)


def cmi_table(rows) -> str:
    """Render (type, name, #utt, cmi) rows as an aligned text table."""
    header = ("Type", "Name", "#Utt", "CMI")
    body = [(t, n, str(c), f"{v:.2f}") for t, n, c, v in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(4)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# tokenizer


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Whitespace word tokenizer; unknown words map to <unk>."""
    return [vocab.id(w) for w in text.split()]


def detokenize(ids, vocab: Vocab, skip_specials: bool = True) -> str:
    words = []
    for i in ids:
        tok = vocab.token(i)
        if skip_specials and tok in SPECIAL_TOKENS:
            continue
        words.append(tok)
    return " ".join(words)


# ---------------------------------------------------------------------------
# synthetic corpus generator


@dataclass(frozen=True)
class CorpusSpec:
    """Defaults define the standard desk-scale regime: a text-only set at
    least ten times the paired train set, code-switching concentrated in
    the text side."""

    vocab_a: int = 40
    vocab_b: int = 40
    homophone_fraction: float = 0.5
    text_utterances: int = 2400
    text_mix: tuple = (("a", 0.30), ("b", 0.25), ("cs", 0.45))
    babble_rate: float = 0.02
    pretrain_paired: int = 400
    pretrain_mix: tuple = (("a", 0.25), ("b", 0.70), ("cs", 0.05))
    paired_train: int = 240
    paired_mix: tuple = (("a", 0.45), ("b", 0.45), ("cs", 0.10))
    dev_size: int = 12
    test_size: int = 16
    min_len: int = 6
    max_len: int = 12
    cs_segment_mean: float = 4.0
    branching: int = 6
    frames_per_token: int = 2
    feature_dim: int = 16
    feature_jitter: float = 0.12
    target_jitter: float = 0.30
    channel_shift: float = 0.5

    def validate(self) -> None:
        if self.vocab_a < 2 or self.vocab_b < 2:
            raise ConfigError("each language needs at least 2 words")
        if not (0.0 <= self.homophone_fraction <= 1.0):
            raise ConfigError("homophone_fraction must be in [0, 1]")
        if self.min_len < 2 or self.max_len < self.min_len:
            raise ConfigError("need 2 <= min_len <= max_len")
        for mix in (self.text_mix, self.paired_mix, self.pretrain_mix):
            if abs(sum(w for _, w in mix) - 1.0) > 1e-9:
                raise ConfigError("mix weights must sum to 1")
        if self.text_utterances < 1 or self.paired_train < 1:
            raise ConfigError("corpus sizes must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("text_mix", "paired_mix", "pretrain_mix"):
            d[key] = {k: v for k, v in getattr(self, key)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        for key in ("text_mix", "paired_mix", "pretrain_mix"):
            if key in d and isinstance(d[key], dict):
                d[key] = tuple(sorted(d[key].items()))
        spec = cls(**d)
        spec.validate()
        return spec


def _make_words(rng, count: int, syllables, length_range=(2, 3)) -> list[str]:
    words = []
    seen = set()
    while len(words) < count:
        n = int(rng.integers(length_range[0], length_range[1] + 1))
        w = "".join(syllables[int(rng.integers(0, len(syllables)))] for _ in range(n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


_SYLLABLES_A = [c + v for c in "kstmnlrgd" for v in "aiu"]
_SYLLABLES_B = [c + v for c in "pbfwhzjvy" for v in "eo"]


class _Grammar:
    """Order-2 (bigram) word chain with a start distribution."""

    def __init__(self, rng, words: list[str], branching: int):
        self.words = words
        n = len(words)
        k = min(branching, n)
        self.start_p = rng.dirichlet(np.ones(n))
        self.next_words = []
        self.next_p = []
        for _ in range(n):
            succ = rng.choice(n, size=k, replace=False)
            self.next_words.append(succ)
            self.next_p.append(rng.dirichlet(np.ones(k)))

    def start(self, rng) -> int:
        return int(rng.choice(len(self.words), p=self.start_p))

    def step(self, rng, idx: int) -> int:
        return int(rng.choice(self.next_words[idx], p=self.next_p[idx]))

    def walk(self, rng, length: int, start: int | None = None) -> list[str]:
        idx = self.start(rng) if start is None else start
        out = [self.words[idx]]
        for _ in range(length - 1):
            idx = self.step(rng, idx)
            out.append(self.words[idx])
        return out


@dataclass
class SyntheticCorpus:
    spec: CorpusSpec
    seed: int
    vocab: Vocab
    lexicon: Lexicon
    text: list  # list[Utterance], includes babble lines for the filter step
    pretrain: list  # general-domain paired split used to build the base model
    paired_train: list
    dev: list
    test_a: list
    test_b: list
    test_cs: list

    def paired_splits(self) -> dict:
        return {"pretrain": self.pretrain, "train": self.paired_train, "dev": self.dev,
                "test_a": self.test_a, "test_b": self.test_b, "test_cs": self.test_cs}


def generate_corpus(spec: CorpusSpec, seed: int) -> SyntheticCorpus:
    """Fully deterministic synthetic bilingual corpus.

    Splits are disjoint by utterance text; paired features are fixed
    per-token codebook vectors (frames_per_token frames each) plus seeded
    Gaussian jitter.
    """
    spec.validate()
    rng_words = np.random.default_rng([seed, 1])
    words_a = _make_words(rng_words, spec.vocab_a, _SYLLABLES_A)
    words_b = _make_words(rng_words, spec.vocab_b, _SYLLABLES_B)
    lexicon = Lexicon(words_a, words_b)
    vocab = Vocab(sorted(words_a) + sorted(words_b))

    rng_grammar = np.random.default_rng([seed, 2])
    grammar = {"a": _Grammar(rng_grammar, words_a, spec.branching),
               "b": _Grammar(rng_grammar, words_b, spec.branching)}

    # Codebook: one feature vector per word; the first
    # homophone_fraction * min(|A|,|B|) word pairs share a vector across
    # languages, so acoustics alone cannot disambiguate them.
    rng_code = np.random.default_rng([seed, 3])
    codebook = {}
    n_homophones = int(round(spec.homophone_fraction * min(len(words_a), len(words_b))))
    for w in words_a:
        codebook[w] = rng_code.normal(size=spec.feature_dim)
    for i, w in enumerate(words_b):
        if i < n_homophones:
            codebook[w] = codebook[words_a[i]]
        else:
            codebook[w] = rng_code.normal(size=spec.feature_dim)

    rng_sample = np.random.default_rng([seed, 4])
    used_texts: set[str] = set()

    def sample_length() -> int:
        return int(rng_sample.integers(spec.min_len, spec.max_len + 1))

    def sample_mono(lang: str) -> list[str]:
        return grammar[lang].walk(rng_sample, sample_length())

    def sample_cs() -> list[str]:
        length = sample_length()
        lang = "a" if rng_sample.random() < 0.5 else "b"
        out: list[str] = []
        p_stop = 1.0 / spec.cs_segment_mean
        while len(out) < length:
            seg = int(rng_sample.geometric(p_stop))
            seg = max(1, min(seg, length - len(out)))
            out.extend(grammar[lang].walk(rng_sample, seg))
            lang = "b" if lang == "a" else "a"
        return out

    def sample_babble() -> list[str]:
        lang = "a" if rng_sample.random() < 0.5 else "b"
        pair = grammar[lang].walk(rng_sample, 2)
        return pair * int(rng_sample.integers(5, 9))

    def draw(kind: str) -> list[str]:
        if kind == "cs":
            return sample_cs()
        return sample_mono(kind)

    def fresh_utterance(uid: str, kind: str, babble: bool = False) -> Utterance:
        for _ in range(200):
            words = sample_babble() if babble else draw(kind)
            text = " ".join(words)
            if text not in used_texts:
                used_texts.add(text)
                return Utterance.from_text(uid, text, lexicon)
        raise ConfigError("could not sample a fresh utterance; vocabulary too small "
                          "for the requested corpus size")

    def pick_kind(mix) -> str:
        kinds = [k for k, _ in mix]
        probs = np.array([w for _, w in mix])
        return kinds[int(rng_sample.choice(len(kinds), p=probs))]

    text_utts = []
    for i in range(spec.text_utterances):
        babble = rng_sample.random() < spec.babble_rate
        text_utts.append(fresh_utterance(f"text-{i:05d}", pick_kind(spec.text_mix), babble))

    # The target domain differs acoustically from the general-domain
    # pretrain split: a fixed linear channel mix plus heavier jitter. Full
    # fine-tuning therefore has real encoder adaptation to do that
    # cross-attention alone cannot fully absorb.
    rng_chan = np.random.default_rng([seed, 6])
    channel = rng_chan.normal(size=(spec.feature_dim, spec.feature_dim)) \
        / np.sqrt(spec.feature_dim)

    def synth_features(words, split: str, index: int) -> np.ndarray:
        # zlib.crc32 is stable across processes, unlike hash()
        rng_f = np.random.default_rng([seed, 5, zlib.crc32(split.encode()), index])
        pretrain = split == "pretrain"
        jitter = spec.feature_jitter if pretrain else spec.target_jitter
        frames = []
        for w in words:
            base = codebook[w]
            if not pretrain:
                base = base + spec.channel_shift * (channel @ base)
            for _ in range(spec.frames_per_token):
                frames.append(base + jitter * rng_f.normal(size=spec.feature_dim))
        return np.asarray(frames, dtype=np.float64)

    def paired_split(name: str, count: int, mix,
                     mixed_prompts: bool = False) -> list[PairedExample]:
        out = []
        for i in range(count):
            kind = pick_kind(mix) if isinstance(mix, tuple) else mix
            utt = fresh_utterance(f"{name}-{i:04d}", kind)
            dominant = PROMPT_A if dominant_language(utt.tags) == "A" else PROMPT_B
            prompt = (dominant,)
            if mixed_prompts and rng_sample.random() < 0.25:
                prompt = (PROMPT_A, PROMPT_B)
            out.append(PairedExample(utt, synth_features(utt.words, name, i), prompt))
        return out

    pretrain = paired_split("pretrain", spec.pretrain_paired, spec.pretrain_mix,
                            mixed_prompts=True)
    paired_train = paired_split("train", spec.paired_train, spec.paired_mix)
    dev = paired_split("dev", spec.dev_size, spec.paired_mix)
    test_a = paired_split("test_a", spec.test_size, "a")
    test_b = paired_split("test_b", spec.test_size, "b")
    test_cs = paired_split("test_cs", spec.test_size, "cs")

    return SyntheticCorpus(spec, seed, vocab, lexicon, text_utts, pretrain,
                           paired_train, dev, test_a, test_b, test_cs)


# ---------------------------------------------------------------------------
# dataset files


def save_text_corpus(utterances, path: str, tagged: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in utterances:
            if tagged:
                f.write(f"{u.text}\t{' '.join(u.tags)}\n")
            else:
                f.write(u.text + "\n")


def load_text_corpus(path: str, lexicon: Lexicon) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f):
            line = line.rstrip("\n")
            if not line:
                continue
            text = line.split("\t")[0]
            out.append(Utterance.from_text(f"line-{i:05d}", text, lexicon))
    return out


def save_dataset(corpus: SyntheticCorpus, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    corpus.vocab.save(os.path.join(out_dir, "vocab.txt"))
    corpus.lexicon.save(os.path.join(out_dir, "lexicon.txt"))
    save_text_corpus(corpus.text, os.path.join(out_dir, "text.txt"))
    save_text_corpus(corpus.text, os.path.join(out_dir, "text_tagged.txt"), tagged=True)
    paired_dir = os.path.join(out_dir, "paired")
    os.makedirs(paired_dir, exist_ok=True)
    splits = corpus.paired_splits()
    for name, examples in splits.items():
        with open(os.path.join(paired_dir, f"{name}.jsonl"), "w", encoding="utf-8") as f:
            for ex in examples:
                rec = {
                    "id": ex.utterance.uid,
                    "text": ex.utterance.text,
                    "tags": list(ex.utterance.tags),
                    "prompt": list(ex.prompt),
                    "features": [[float(v) for v in row] for row in ex.features],
                }
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {
        "spec": corpus.spec.to_dict(),
        "seed": corpus.seed,
        "files": {
            "vocab": "vocab.txt",
            "lexicon": "lexicon.txt",
            "text": "text.txt",
            "text_tagged": "text_tagged.txt",
            "paired": {name: f"paired/{name}.jsonl" for name in splits},
        },
        "counts": {"text": len(corpus.text),
                   **{name: len(ex) for name, ex in splits.items()}},
    }
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def load_paired_split(path: str, lexicon: Lexicon) -> list[PairedExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            utt = Utterance(rec["id"], rec["text"], tuple(rec["text"].split()),
                            tuple(rec["tags"]))
            feats = np.asarray(rec["features"], dtype=np.float64)
            prompt = rec["prompt"]
            if isinstance(prompt, str):
                prompt = (prompt,)
            out.append(PairedExample(utt, feats, tuple(prompt)))
    return out


def load_dataset(out_dir: str) -> SyntheticCorpus:
    with open(os.path.join(out_dir, "dataset.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    spec = CorpusSpec.from_dict(manifest["spec"])
    lexicon = Lexicon.load(os.path.join(out_dir, manifest["files"]["lexicon"]))
    vocab = Vocab.load(os.path.join(out_dir, manifest["files"]["vocab"]))
    text = load_text_corpus(os.path.join(out_dir, manifest["files"]["text"]), lexicon)
    paired = {name: load_paired_split(os.path.join(out_dir, rel), lexicon)
              for name, rel in manifest["files"]["paired"].items()}
    return SyntheticCorpus(spec, manifest["seed"], vocab, lexicon, text,
                           paired["pretrain"], paired["train"], paired["dev"],
                           paired["test_a"], paired["test_b"], paired["test_cs"])
