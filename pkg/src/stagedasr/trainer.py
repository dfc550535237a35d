"""Three-stage training: freeze masks, warmup+cosine schedule, AdamW,
feature augmentation, and the seeded minibatch loop.

Stage 1 adapts the decoder as a text-only language model (self-attention,
feed-forward, output projection trainable; encoder output zeroed).
Stage 2 trains only the decoder cross-attention on paired data.
Stage 3 fine-tunes everything on the same paired data.

Optimizer state is created fresh per stage and only for trainable
parameters; everything outside a stage's mask stays bitwise unchanged.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from .corpus import PairedExample, Utterance, Vocab, dominant_language, PROMPT_A, PROMPT_B
from .errors import ConfigError, DataError, DivergenceError
from .model import EncodedExample, ModelParams, ParamGroup, loss_stage
from .tensor import Graph

STAGE_MASKS: dict[int, frozenset] = {
    1: frozenset({ParamGroup.DECODER_SELF_ATTN, ParamGroup.DECODER_FFN,
                  ParamGroup.OUTPUT_PROJ}),
    2: frozenset({ParamGroup.DECODER_CROSS_ATTN}),
    3: frozenset(ParamGroup),
}


def stage_mask(stage: int) -> frozenset:
    if stage not in STAGE_MASKS:
        raise ConfigError(f"stage must be 1, 2, or 3, got {stage}")
    return STAGE_MASKS[stage]


@dataclass(frozen=True)
class AugmentPolicy:
    """Feature masking plus noise at a signal-to-noise ratio drawn from
    `snr_db`. Mask widths are sampled up to the configured maximum and
    clipped at the sequence edge."""

    time_masks: int = 2
    time_width: int = 3
    feat_masks: int = 1
    feat_width: int = 3
    snr_db: tuple = (10.0, 40.0)

    def is_identity(self) -> bool:
        return self.time_masks == 0 and self.feat_masks == 0 and not self.snr_db

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        d = dict(d)
        if "snr_db" in d and d["snr_db"] is not None:
            d["snr_db"] = tuple(d["snr_db"])
        elif d.get("snr_db") is None:
            d["snr_db"] = ()
        return cls(**d)


def augment(features: np.ndarray, policy: AugmentPolicy, seed) -> np.ndarray:
    """Seeded SpecAugment-style masking plus scaled Gaussian noise.

    Noise power is set from the pre-mask signal power so the empirical
    SNR matches the drawn value.
    """
    x = np.array(features, dtype=np.float64, copy=True)
    if policy.is_identity():
        return x
    rng = np.random.default_rng(seed)
    n_frames, n_feats = x.shape
    p_signal = float(np.mean(features.astype(np.float64) ** 2))
    for _ in range(policy.time_masks):
        w = int(rng.integers(0, policy.time_width + 1))
        w = min(w, n_frames)
        start = int(rng.integers(0, max(1, n_frames - w + 1)))
        x[start:start + w, :] = 0.0
    for _ in range(policy.feat_masks):
        w = int(rng.integers(0, policy.feat_width + 1))
        w = min(w, n_feats)
        start = int(rng.integers(0, max(1, n_feats - w + 1)))
        x[:, start:start + w] = 0.0
    if policy.snr_db and p_signal > 0.0:
        snr = float(policy.snr_db[int(rng.integers(0, len(policy.snr_db)))])
        sigma = math.sqrt(p_signal / (10.0 ** (snr / 10.0)))
        x += sigma * rng.normal(size=x.shape)
    return x


@dataclass(frozen=True)
class StageConfig:
    """Per-stage schedule. Defaults keep the full-scale settings (peak
    2e-5, warmup 10% for stage 1 / 20% for speech stages, epochs 3/1/2,
    batch 128 text / 32 speech); desk-scale runs override lr, batch, and
    counts in their run config."""

    stage: int
    peak_lr: float = 2e-5
    warmup_frac: float | None = None
    epochs: int | None = None
    batch_size: int | None = None
    total_updates: int | None = None
    augment_policy: AugmentPolicy | None = None
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    sampler_temperature: float = 1.0

    def resolved(self) -> "StageConfig":
        stage = self.stage
        if stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2, or 3, got {stage}")
        warm = self.warmup_frac if self.warmup_frac is not None else (0.1 if stage == 1 else 0.2)
        epochs = self.epochs if self.epochs is not None else {1: 3, 2: 1, 3: 2}[stage]
        batch = self.batch_size if self.batch_size is not None else (128 if stage == 1 else 32)
        cfg = replace(self, warmup_frac=warm, epochs=epochs, batch_size=batch)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not (0.0 <= (self.warmup_frac or 0.0) < 1.0):
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if self.total_updates is not None and self.total_updates < 1:
            raise ConfigError("total_updates must be >= 1")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.augment_policy is not None:
            d["augment_policy"] = self.augment_policy.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        d = dict(d)
        if d.get("augment_policy") is not None:
            d["augment_policy"] = AugmentPolicy.from_dict(d["augment_policy"])
        return cls(**d)


def lr_at(cfg: StageConfig, step) -> float:
    """Linear ramp 0 -> peak over the warmup steps, then cosine decay to 0."""
    total = cfg.total_updates
    if total is None:
        raise ConfigError("lr_at needs total_updates; resolve the config first")
    if not (0 <= step <= total):
        raise ConfigError(f"step {step} outside [0, {total}]")
    warm = cfg.warmup_frac if cfg.warmup_frac is not None else 0.0
    w = int(warm * total)
    if step < w:
        return cfg.peak_lr * step / w
    if total == w:
        return cfg.peak_lr if step == w else 0.0
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total - w)))


def apply_freeze(params: ModelParams, mask: frozenset) -> list[tuple[str, object]]:
    """Mark masked groups trainable (and writable), everything else frozen
    read-only. Returns the sorted (name, tensor) view the optimizer sees."""
    if not mask:
        raise ConfigError("freeze mask must contain at least one group")
    params.set_trainable(mask)
    return [(n, params.tensors[n]) for n in sorted(params.tensors)
            if params.groups[n] in mask]


class AdamW:
    """Adam with decoupled weight decay; moments only for the given view."""

    def __init__(self, view, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.01):
        self.view = list(view)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.view}
        self.v = {name: np.zeros_like(t.data) for name, t in self.view}

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, t in self.view:
            g = t.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * t.data
            t.data -= lr * update


@dataclass
class TrainingLog:
    stage: int
    config: dict
    records: list = field(default_factory=list)

    def add(self, step: int, loss: float, lr: float, wall: float) -> None:
        self.records.append({"step": step, "loss": loss, "lr": lr, "wall_time": wall})

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def save(self, path: str) -> None:
        import json
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"stage": self.stage, "config": self.config},
                               sort_keys=True) + "\n")
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")


def encode_text_example(utt: Utterance, vocab: Vocab) -> EncodedExample:
    """Teacher-forcing pair for a text-only utterance; the dominant-language
    prompt is force-fed, so its prediction is masked out of the loss."""
    prompt = PROMPT_A if dominant_language(utt.tags) == "A" else PROMPT_B
    word_ids = [vocab.id(w) for w in utt.words]
    inputs = [vocab.bos_id, vocab.id(prompt)] + word_ids
    targets = [vocab.pad_id] + word_ids + [vocab.eos_id]
    return EncodedExample(inputs, targets, None)


def encode_paired_example(ex: PairedExample, vocab: Vocab,
                          features: np.ndarray | None = None) -> EncodedExample:
    word_ids = [vocab.id(w) for w in ex.utterance.words]
    prompt_ids = [vocab.id(t) for t in ex.prompt]
    inputs = [vocab.bos_id] + prompt_ids + word_ids
    targets = [vocab.pad_id] * len(prompt_ids) + word_ids + [vocab.eos_id]
    feats = ex.features if features is None else features
    return EncodedExample(inputs, targets, feats)


class _BalancedTextSampler:
    """Buckets text by language profile (mono-A, mono-B, mixed) and samples
    buckets proportional to count**temperature, items uniformly within."""

    def __init__(self, utterances, temperature: float, rng):
        self.rng = rng
        buckets: dict[str, list] = {"a": [], "b": [], "cs": []}
        for u in utterances:
            langs = {t for t in u.tags if t != "unknown"}
            if langs == {"A"}:
                buckets["a"].append(u)
            elif langs == {"B"}:
                buckets["b"].append(u)
            else:
                buckets["cs"].append(u)
        self.buckets = [b for b in buckets.values() if b]
        if not self.buckets:
            raise DataError("text corpus is empty")
        weights = np.array([len(b) ** temperature for b in self.buckets], dtype=np.float64)
        self.probs = weights / weights.sum()

    def draw(self, count: int) -> list:
        out = []
        for _ in range(count):
            b = self.buckets[int(self.rng.choice(len(self.buckets), p=self.probs))]
            out.append(b[int(self.rng.integers(0, len(b)))])
        return out


def train_stage(params: ModelParams, cfg: StageConfig, dataset, vocab: Vocab, *,
                allow_lineage_mismatch: bool = False,
                lineage_label: str | None = None) -> tuple[ModelParams, TrainingLog]:
    """Run one stage and return (updated copy of params, log).

    `dataset` is a list of Utterance for stage 1 and of PairedExample for
    stages 2/3. The input params object is left untouched. `lineage_label`
    overrides the default "stage<k>" lineage entry (the pipeline uses it
    to tag base-model pretraining, which reuses the stage-3 formula).
    """
    cfg = cfg.resolved()
    stage = cfg.stage
    if not dataset:
        raise DataError("empty dataset")
    if stage == 1:
        if not all(isinstance(d, Utterance) for d in dataset):
            raise DataError("stage 1 trains on text utterances")
    else:
        if not all(isinstance(d, PairedExample) for d in dataset):
            raise DataError(f"stage {stage} trains on paired examples")
        expected = f"stage{stage - 1}"
        if expected not in params.lineage and not allow_lineage_mismatch:
            raise ConfigError(
                f"stage {stage} expects params with {expected} lineage, got "
                f"{params.lineage}; pass allow_lineage_mismatch=True to override")

    params = params.copy()
    n = len(dataset)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.total_updates or cfg.epochs * steps_per_epoch
    cfg = replace(cfg, total_updates=total)

    view = apply_freeze(params, stage_mask(stage))
    opt = AdamW(view, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    log = TrainingLog(stage, cfg.to_dict())

    rng = np.random.default_rng([cfg.seed, stage, 1])
    sampler = _BalancedTextSampler(dataset, cfg.sampler_temperature, rng) \
        if stage == 1 else None
    order = None
    t0 = time.monotonic()
    try:
        for step in range(total):
            if stage == 1:
                batch = [encode_text_example(u, vocab) for u in sampler.draw(cfg.batch_size)]
            else:
                pos = step % steps_per_epoch
                if pos == 0:
                    order = rng.permutation(n)
                idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
                batch = []
                for j in idx:
                    ex = dataset[int(j)]
                    feats = ex.features
                    if cfg.augment_policy is not None:
                        feats = augment(feats, cfg.augment_policy,
                                        [cfg.seed, stage, step, int(j)])
                    batch.append(encode_paired_example(ex, vocab, feats))
            params.zero_grads()
            with Graph() as g:
                loss = loss_stage(params, batch, stage, vocab.pad_id)
                value = loss.item()
                if not math.isfinite(value):
                    # params not yet updated this step, so they are the
                    # last good state
                    raise DivergenceError(f"non-finite loss at step {step}",
                                          step=step, last_good=params)
                g.backward(loss)
            lr = lr_at(cfg, step + 1)
            opt.step(lr)
            log.add(step, value, lr, time.monotonic() - t0)
    finally:
        params.unfreeze_all()
    params.lineage.append(lineage_label or f"stage{stage}")
    return params, log
