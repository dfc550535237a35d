"""Count-based n-gram language model with stupid-backoff smoothing.

Raw backoff scores (count ratio, else backoff_factor times the next-lower
order) are normalized over the closed symbol set -- every seen word plus
</s> and <unk> -- so conditional distributions sum to one for any context.
Unknown words hit an explicit unigram floor of 1/(total + V), so a
log-probability is never -inf.

Serialization is a plain-text, diff-able record of the raw counts.
"""

from __future__ import annotations

import math
from collections import Counter

from .errors import ConfigError, DataError

BOS, EOS, UNK = "<s>", "</s>", "<unk>"


class NGramLM:
    def __init__(self, order: int = 5, backoff_factor: float = 0.4):
        if order < 1:
            raise ConfigError(f"order must be >= 1, got {order}")
        self.order = order
        self.backoff_factor = backoff_factor
        # counts[k] maps a length-(k-1) context tuple to a Counter of
        # continuations; context_totals[k] caches the row sums.
        self.counts: dict[int, dict[tuple, Counter]] = {k: {} for k in range(1, order + 1)}
        self.context_totals: dict[int, dict[tuple, int]] = {k: {} for k in range(1, order + 1)}
        self.vocab: set[str] = set()
        self.total_unigrams = 0
        self._symbols: tuple | None = None
        self._next_cache: dict[tuple, dict] = {}

    # -- training ----------------------------------------------------------

    @classmethod
    def train(cls, corpus, order: int = 5, backoff_factor: float = 0.4) -> "NGramLM":
        """Count n-grams of orders 1..order with start pads and an end token."""
        lm = cls(order, backoff_factor)
        n_sentences = 0
        for sentence in corpus:
            words = list(sentence)
            if not words:
                continue
            n_sentences += 1
            lm.vocab.update(words)
            padded = [BOS] * (order - 1) + words + [EOS]
            for pos in range(order - 1, len(padded)):
                token = padded[pos]
                lm.total_unigrams += 1
                for k in range(1, order + 1):
                    ctx = tuple(padded[pos - k + 1:pos])
                    row = lm.counts[k].setdefault(ctx, Counter())
                    row[token] += 1
                    totals = lm.context_totals[k]
                    totals[ctx] = totals.get(ctx, 0) + 1
        if n_sentences == 0:
            raise DataError("empty corpus")
        return lm

    # -- scoring -----------------------------------------------------------

    def symbols(self) -> tuple:
        """Closed prediction set: seen words plus </s> and <unk>."""
        if self._symbols is None:
            self._symbols = tuple(sorted(self.vocab)) + (EOS, UNK)
        return self._symbols

    def raw_count(self, ngram) -> int:
        ngram = tuple(ngram)
        k = len(ngram)
        if not (1 <= k <= self.order):
            return 0
        return self.counts[k].get(ngram[:-1], Counter()).get(ngram[-1], 0)

    def mle(self, word: str, context=()) -> float:
        """Unsmoothed count ratio; 0 when the context is unseen."""
        ctx = self._truncate(context)
        total = self.context_totals[len(ctx) + 1].get(ctx, 0)
        if total == 0:
            return 0.0
        return self.counts[len(ctx) + 1][ctx].get(word, 0) / total

    def _floor(self) -> float:
        return 1.0 / (self.total_unigrams + len(self.symbols()))

    def _truncate(self, context) -> tuple:
        ctx = tuple(context)
        if self.order == 1:
            return ()
        return ctx[-(self.order - 1):] if len(ctx) > self.order - 1 else ctx

    def score(self, word: str, context=()) -> float:
        """Unnormalized stupid-backoff score."""
        ctx = self._truncate(context)
        if ctx:
            row = self.counts[len(ctx) + 1].get(ctx)
            if row:
                c = row.get(word, 0)
                if c > 0:
                    return c / self.context_totals[len(ctx) + 1][ctx]
            return self.backoff_factor * self.score(word, ctx[1:])
        c = self.counts[1].get((), Counter()).get(word, 0)
        if c > 0:
            return c / self.total_unigrams
        return self._floor()

    def next_logprobs(self, context=()) -> dict:
        """Normalized log-distribution over the symbol set for a context."""
        ctx = self._truncate(context)
        cached = self._next_cache.get(ctx)
        if cached is not None:
            return cached
        scores = {s: self.score(s, ctx) for s in self.symbols()}
        z = sum(scores.values())
        out = {s: math.log(v / z) for s, v in scores.items()}
        if len(self._next_cache) > 20000:
            self._next_cache.clear()
        self._next_cache[ctx] = out
        return out

    def logprob(self, word: str, context=()) -> float:
        """Normalized log p(word | context); unknown words map to <unk>."""
        table = self.next_logprobs(context)
        key = word if word in table else UNK
        return table[key]

    def perplexity(self, corpus) -> float:
        """exp(mean NLL per token, end-of-sequence included)."""
        total_nll = 0.0
        n = 0
        for sentence in corpus:
            words = list(sentence)
            if not words:
                continue
            padded = [BOS] * (self.order - 1) + words + [EOS]
            for pos in range(self.order - 1, len(padded)):
                ctx = tuple(padded[max(0, pos - self.order + 1):pos])
                total_nll -= self.logprob(padded[pos], ctx)
                n += 1
        if n == 0:
            raise DataError("empty corpus")
        return math.exp(total_nll / n)

    # -- serialization -----------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("stagedasr-ngram 1\n")
            f.write(f"order {self.order}\n")
            f.write(f"backoff {self.backoff_factor!r}\n")
            f.write(f"total {self.total_unigrams}\n")
            f.write(f"vocab {len(self.vocab)}\n")
            for w in sorted(self.vocab):
                f.write(f"w {w}\n")
            for k in range(1, self.order + 1):
                f.write(f"\\{k}-grams\n")
                for ctx in sorted(self.counts[k]):
                    row = self.counts[k][ctx]
                    for word in sorted(row):
                        gram = " ".join(ctx + (word,))
                        f.write(f"{row[word]}\t{gram}\n")
            f.write("\\end\n")

    @classmethod
    def load(cls, path: str) -> "NGramLM":
        with open(path, encoding="utf-8") as f:
            header = f.readline().strip()
            if header != "stagedasr-ngram 1":
                raise ConfigError(f"{path}: not an n-gram model file")
            order = int(f.readline().split()[1])
            backoff = float(f.readline().split()[1])
            total = int(f.readline().split()[1])
            vocab_size = int(f.readline().split()[1])
            lm = cls(order, backoff)
            lm.total_unigrams = total
            for _ in range(vocab_size):
                lm.vocab.add(f.readline().rstrip("\n").split(" ", 1)[1])
            k = 0
            for line in f:
                line = line.rstrip("\n")
                if line.startswith("\\"):
                    if line == "\\end":
                        break
                    k = int(line[1:].split("-")[0])
                    continue
                count_s, gram = line.split("\t")
                tokens = tuple(gram.split(" "))
                ctx, word = tokens[:-1], tokens[-1]
                row = lm.counts[k].setdefault(ctx, Counter())
                row[word] = int(count_s)
                totals = lm.context_totals[k]
                totals[ctx] = totals.get(ctx, 0) + int(count_s)
        return lm
