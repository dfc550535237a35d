"""Greedy/beam decoding with language prompts and optional shallow fusion.

The fused score of a hypothesis is

    asr_logprob + alpha * lm_logprob + beta * emitted_token_count

applied at every expansion; the end-of-sequence step contributes the
language model's end probability but does not count as an emitted token.
Ties break toward the lower token id, then the earlier hypothesis; final
selection prefers the lexicographically smaller token sequence among
equal scores, which keeps exhaustive-search comparisons exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import (PROMPT_A, PROMPT_B, Lexicon, PairedExample, Utterance, Vocab,
                     detokenize, dominant_language)
from .errors import ConfigError, DataError
from .evaluation import corpus_wer
from .model import ModelParams, decoder_logits, encode
from .ngram import EOS as LM_EOS
from .ngram import NGramLM

ALPHA_GRID = tuple(np.linspace(0.0, 0.1, 4))
BETA_GRID = tuple(np.linspace(-0.2, 0.2, 4))


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 2
    max_len: int = 48
    prompt_tokens: tuple = (PROMPT_A, PROMPT_B)
    fusion: bool = False
    alpha: float = 0.0
    beta: float = 0.0

    def validate(self) -> None:
        if self.beam < 1:
            raise ConfigError(f"beam must be >= 1, got {self.beam}")
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ConfigError("alpha and beta must be finite")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")


@dataclass
class Hypothesis:
    tokens: tuple = ()
    asr_logprob: float = 0.0
    lm_logprob: float = 0.0
    finished: bool = False

    def fused(self, alpha: float, beta: float) -> float:
        return self.asr_logprob + alpha * self.lm_logprob + beta * len(self.tokens)


@dataclass
class DecodeResult:
    tokens: list
    text: str
    asr_logprob: float
    lm_logprob: float
    fused_score: float
    truncated: bool


def beam_search(step_logprobs, cfg: DecodeConfig, eos_id: int,
                lm_logprobs=None) -> tuple[Hypothesis, bool]:
    """Generic fused beam search over `step_logprobs(prefix) -> (V,) array`.

    `lm_logprobs(prefix) -> (V,) array` must be supplied when fusion is
    on. Returns (best hypothesis, truncated flag).
    """
    cfg.validate()
    if cfg.fusion and lm_logprobs is None:
        raise ConfigError("fusion enabled but no language model supplied")
    use_lm = cfg.fusion and lm_logprobs is not None
    live = [Hypothesis()]
    finished: list[Hypothesis] = []
    for _ in range(cfg.max_len):
        candidates = []
        for hi, h in enumerate(live):
            asr_lp = step_logprobs(h.tokens)
            lm_lp = lm_logprobs(h.tokens) if use_lm else None
            for tok in range(len(asr_lp)):
                asr = h.asr_logprob + float(asr_lp[tok])
                lm = h.lm_logprob + (float(lm_lp[tok]) if use_lm else 0.0)
                if tok == eos_id:
                    cand = Hypothesis(h.tokens, asr, lm, True)
                else:
                    cand = Hypothesis(h.tokens + (tok,), asr, lm, False)
                candidates.append((cand.fused(cfg.alpha, cfg.beta), tok, hi, cand))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        live = []
        for _score, _tok, _hi, cand in candidates[:cfg.beam]:
            if cand.finished:
                finished.append(cand)
            else:
                live.append(cand)
        if not live:
            break
    pool = finished if finished else live
    truncated = not finished
    best = min(pool, key=lambda h: (-h.fused(cfg.alpha, cfg.beta), h.tokens))
    return best, truncated


def _log_softmax(row: np.ndarray) -> np.ndarray:
    m = row.max()
    return row - (m + np.log(np.exp(row - m).sum()))


def make_model_stepper(params: ModelParams, enc, vocab: Vocab, prompt_ids):
    prefix_base = [vocab.bos_id] + list(prompt_ids)

    def step_logprobs(gen_tokens) -> np.ndarray:
        logits = decoder_logits(params, prefix_base + list(gen_tokens), enc)
        return _log_softmax(logits.data[-1])

    return step_logprobs


def make_lm_stepper(lm: NGramLM, vocab: Vocab):
    """Adapter mapping model token ids to LM word scores. Structural ids
    (pad/bos/prompts) take the <unk> floor so fusion never emits -inf."""

    def lm_logprobs(gen_tokens) -> np.ndarray:
        ctx = [vocab.token(t) for t in gen_tokens]
        table = lm.next_logprobs(ctx)
        unk = table["<unk>"]
        out = np.full(len(vocab), unk)
        for idx, tok in enumerate(vocab.tokens):
            if idx == vocab.eos_id:
                out[idx] = table[LM_EOS]
            elif tok in table:
                out[idx] = table[tok]
        return out

    return lm_logprobs


def decode(params: ModelParams, features: np.ndarray, cfg: DecodeConfig,
           vocab: Vocab, lm: NGramLM | None = None) -> DecodeResult:
    """Beam-search transcription of one feature matrix."""
    cfg.validate()
    if cfg.fusion and lm is None:
        raise ConfigError("fusion enabled but no language model supplied")
    prompt_ids = []
    for tok in cfg.prompt_tokens:
        if tok not in vocab:
            raise ConfigError(f"prompt token {tok!r} not in vocabulary")
        prompt_ids.append(vocab.id(tok))
    enc = encode(params, features)
    stepper = make_model_stepper(params, enc, vocab, prompt_ids)
    lm_stepper = make_lm_stepper(lm, vocab) if (cfg.fusion and lm is not None) else None
    best, truncated = beam_search(stepper, cfg, vocab.eos_id, lm_stepper)
    text = detokenize(best.tokens, vocab)
    return DecodeResult(list(best.tokens), text, best.asr_logprob, best.lm_logprob,
                        best.fused(cfg.alpha, cfg.beta), truncated)


def greedy_decode(params: ModelParams, features: np.ndarray, cfg: DecodeConfig,
                  vocab: Vocab) -> DecodeResult:
    """Stepwise argmax decode; the reference behavior for beam=1 without
    fusion."""
    prompt_ids = [vocab.id(t) for t in cfg.prompt_tokens]
    enc = encode(params, features)
    stepper = make_model_stepper(params, enc, vocab, prompt_ids)
    tokens: tuple = ()
    asr = 0.0
    truncated = True
    for _ in range(cfg.max_len):
        lp = stepper(tokens)
        tok = int(np.argmax(lp))  # np.argmax takes the first (lowest id) max
        asr += float(lp[tok])
        if tok == vocab.eos_id:
            truncated = False
            break
        tokens = tokens + (tok,)
    return DecodeResult(list(tokens), detokenize(tokens, vocab), asr, 0.0, asr, truncated)


def tag_prompt(utt: Utterance, lexicon: Lexicon, mode: str = "train") -> list[str]:
    """Dominant-language prompt for training; the combined pair (A then B)
    for evaluation. Ties go to the B (English-like) token."""
    if not utt.words:
        raise DataError(f"{utt.uid}: cannot tag an empty utterance")
    if mode == "eval":
        return [PROMPT_A, PROMPT_B]
    if mode != "train":
        raise ConfigError(f"unknown prompt mode {mode!r}")
    tags = utt.tags if utt.tags else tuple(lexicon.tag(w) for w in utt.words)
    return [PROMPT_A if dominant_language(tags) == "A" else PROMPT_B]


@dataclass
class FusionTrial:
    alpha: float
    beta: float
    wer: float | None
    failures: list = field(default_factory=list)


@dataclass
class FusionTuning:
    alpha: float
    beta: float
    wer: float
    trials: list

    def to_csv(self) -> str:
        lines = ["alpha,beta,wer,failures"]
        for t in self.trials:
            wer_s = f"{t.wer:.4f}" if t.wer is not None else ""
            lines.append(f"{t.alpha:g},{t.beta:g},{wer_s},{len(t.failures)}")
        return "\n".join(lines) + "\n"


def tune_fusion(params: ModelParams, lm: NGramLM, dev_set: list[PairedExample],
                vocab: Vocab, alphas=ALPHA_GRID, betas=BETA_GRID,
                base_cfg: DecodeConfig = DecodeConfig()) -> FusionTuning:
    """Grid-search (alpha, beta) by dev WER; ties prefer smaller alpha then
    smaller beta, so the no-fusion point wins unless something beats it."""
    if not dev_set:
        raise DataError("empty dev set")
    trials = []
    for alpha in alphas:
        for beta in betas:
            cfg = DecodeConfig(beam=base_cfg.beam, max_len=base_cfg.max_len,
                               prompt_tokens=base_cfg.prompt_tokens, fusion=True,
                               alpha=float(alpha), beta=float(beta))
            pairs = []
            failures = []
            for ex in dev_set:
                try:
                    res = decode(params, ex.features, cfg, vocab, lm)
                    pairs.append((ex.utterance.text, res.text))
                except Exception as exc:
                    failures.append(f"{ex.utterance.uid}: {type(exc).__name__}: {exc}")
            trial = FusionTrial(float(alpha), float(beta),
                                corpus_wer(pairs) if pairs else None, failures)
            trials.append(trial)
    scored = [t for t in trials if t.wer is not None]
    if not scored:
        raise DataError("every fusion trial failed to decode the dev set")
    best = min(scored, key=lambda t: (t.wer, t.alpha, t.beta))
    return FusionTuning(best.alpha, best.beta, best.wer, trials)
