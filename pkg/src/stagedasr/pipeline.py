"""End-to-end workflow: generate -> filter -> stage1 -> stage2 -> stage3
-> merge -> fusion tuning -> evaluation, with a manifest tying every
artifact to its inputs and seeds.

Re-running with an identical config reproduces identical artifacts; the
final report is byte-stable (no timestamps, relative paths only).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from . import corpus as C
from . import decoding as D
from . import evaluation as E
from .checkpoint import save_checkpoint
from .errors import ConfigError
from .merge import DEFAULT_RATIOS, merge, ratio_sweep
from .model import Hyperparams, init_model
from .ngram import NGramLM
from .trainer import AugmentPolicy, StageConfig, train_stage

DEFAULT_MERGE_RATIO = 0.4


def default_config() -> dict:
    """Desk-scale demo defaults. Schedule fractions, epoch ratios, the
    merge ratio, beam size, and fusion grids keep the full-scale values;
    learning rates and batch sizes are rescaled for the tiny model."""
    return {
        "seed": 0,
        "corpus": C.CorpusSpec().to_dict(),
        "model": {"d_model": 32, "n_heads": 2, "enc_layers": 2, "dec_layers": 2,
                  "ffn_dim": 64},
        "filter_rules": ["ngram:2,3:4", "mintok:4"],
        "stage1": {"peak_lr": 3e-3, "warmup_frac": 0.10, "epochs": 3, "batch_size": 16},
        "stage2": {"peak_lr": 2e-3, "warmup_frac": 0.20, "epochs": 1, "batch_size": 4,
                   "augment": AugmentPolicy().to_dict()},
        "stage3": {"peak_lr": 1e-3, "warmup_frac": 0.20, "epochs": 2, "batch_size": 4,
                   "augment": AugmentPolicy().to_dict()},
        "baseline": {"peak_lr": 1e-3, "warmup_frac": 0.20, "epochs": 3, "batch_size": 4,
                     "augment": AugmentPolicy().to_dict()},
        "merge_ratio": DEFAULT_MERGE_RATIO,
        "lm": {"order": 5, "backoff": 0.4},
        "decode": {"beam": 2},
        "fusion": {"enabled": True, "alphas": list(D.ALPHA_GRID),
                   "betas": list(D.BETA_GRID)},
        "sweep": {"enabled": True, "ratios": list(DEFAULT_RATIOS)},
    }


def _merge_dicts(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge_dicts(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        with open(path, encoding="utf-8") as f:
            cfg = _merge_dicts(cfg, json.load(f))
    if overrides:
        cfg = _merge_dicts(cfg, overrides)
    return cfg


def _stage_config(cfg: dict, stage: int, key: str, seed: int) -> StageConfig:
    raw = dict(cfg[key])
    aug = raw.pop("augment", None)
    policy = AugmentPolicy.from_dict(aug) if aug else None
    return StageConfig(stage=stage, augment_policy=policy, seed=seed, **raw)


@dataclass
class PipelineResult:
    out_dir: str
    manifest: dict
    report_text: str
    results: dict = field(default_factory=dict)


class _Artifacts:
    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.files: dict[str, str] = {}

    def path(self, name: str, rel: str) -> str:
        self.files[name] = rel
        full = os.path.join(self.out_dir, rel)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full


def evaluate_model(params, testsets: dict, vocab, decode_cfg: D.DecodeConfig,
                   lm=None) -> dict:
    """WER per test set, decoding with the combined language prompt."""
    out = {}
    for name, examples in testsets.items():
        pairs = []
        for ex in examples:
            res = D.decode(params, ex.features, decode_cfg, vocab, lm)
            pairs.append((ex.utterance.text, res.text))
        out[name] = E.corpus_wer(pairs)
    return out


def run_pipeline(cfg: dict, out_dir: str, skip_stage1: bool = False) -> PipelineResult:
    """Execute the full workflow under `out_dir` and return the manifest
    and final report. With `skip_stage1` the staged branch is omitted and
    only the equal-speech-budget baseline (full fine-tune from init) is
    trained and evaluated."""
    os.makedirs(out_dir, exist_ok=True)
    art = _Artifacts(out_dir)
    seed = int(cfg["seed"])

    # --- data ------------------------------------------------------------
    if "path" in cfg["corpus"]:
        data_dir = cfg["corpus"]["path"]
        corpus = C.load_dataset(data_dir)
    else:
        spec = C.CorpusSpec.from_dict(cfg["corpus"])
        corpus = C.generate_corpus(spec, seed)
        data_dir = os.path.join(out_dir, "data")
        C.save_dataset(corpus, data_dir)
        for name in ("vocab.txt", "lexicon.txt", "text.txt", "text_tagged.txt",
                     "dataset.json"):
            art.files[f"data/{name}"] = f"data/{name}"
        for split in corpus.paired_splits():
            art.files[f"data/paired/{split}"] = f"data/paired/{split}.jsonl"
    vocab, lexicon = corpus.vocab, corpus.lexicon

    filtered, freport = C.run_filters(corpus.text, cfg["filter_rules"])
    with open(art.path("filter_report", "data/filter_report.json"), "w",
              encoding="utf-8") as f:
        json.dump(freport.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    C.save_text_corpus(filtered, art.path("text_filtered", "data/text_filtered.txt"))

    # --- language model ----------------------------------------------------
    lm = NGramLM.train((u.words for u in filtered), order=int(cfg["lm"]["order"]),
                       backoff_factor=float(cfg["lm"]["backoff"]))
    lm.save(art.path("lm", "lm/ngram.lm"))

    # --- model + stages ----------------------------------------------------
    spec = corpus.spec
    hp = Hyperparams(vocab_size=len(vocab), input_dim=spec.feature_dim,
                     max_frames=spec.max_len * spec.frames_per_token + 8,
                     max_tokens=spec.max_len + 8, **cfg["model"])
    init = init_model(hp, seed)
    save_checkpoint(init, art.path("ckpt_init", "ckpt/init.ckpt"))

    lam = float(cfg["merge_ratio"])
    decode_cfg = D.DecodeConfig(beam=int(cfg["decode"].get("beam", 2)),
                                max_len=hp.max_tokens - 3)
    testsets = {"test_a": corpus.test_a, "test_b": corpus.test_b,
                "test_cs": corpus.test_cs}
    groups = {"EN": ["test_b"], "BM": ["test_a"], "CS": ["test_cs"]}
    results: dict[str, dict] = {}
    manifest_models: dict[str, dict] = {}

    results["orig (init)"] = evaluate_model(init, testsets, vocab, decode_cfg)

    stage_ckpts = {}
    if not skip_stage1:
        s1_cfg = _stage_config(cfg, 1, "stage1", seed)
        s1, log1 = train_stage(init, s1_cfg, filtered, vocab)
        log1.save(art.path("log_stage1", "logs/stage1.jsonl"))
        save_checkpoint(s1, art.path("ckpt_stage1", "ckpt/stage1.ckpt"))
        s2_cfg = _stage_config(cfg, 2, "stage2", seed)
        s2, log2 = train_stage(s1, s2_cfg, corpus.paired_train, vocab)
        log2.save(art.path("log_stage2", "logs/stage2.jsonl"))
        save_checkpoint(s2, art.path("ckpt_stage2", "ckpt/stage2.ckpt"))
        s3_cfg = _stage_config(cfg, 3, "stage3", seed)
        s3, log3 = train_stage(s2, s3_cfg, corpus.paired_train, vocab)
        log3.save(art.path("log_stage3", "logs/stage3.jsonl"))
        save_checkpoint(s3, art.path("ckpt_stage3", "ckpt/stage3.ckpt"))
        stage_ckpts = {"stage1": s1, "stage2": s2, "stage3": s3}

        final = merge(init, s3, lam)
        save_checkpoint(final, art.path("ckpt_final", "ckpt/final_merged.ckpt"))
        for name, ck in stage_ckpts.items():
            merged = merge(init, ck, lam)
            results[f"{name} - {lam:g}"] = evaluate_model(merged, testsets, vocab,
                                                          decode_cfg)
            manifest_models[f"{name} - {lam:g}"] = {"lineage": merged.lineage}
        results["stage3 (unmerged)"] = evaluate_model(s3, testsets, vocab, decode_cfg)
        manifest_models["stage3 (unmerged)"] = {"lineage": s3.lineage}

    # Equal-speech-budget baseline: full fine-tune from init for the
    # combined stage-2 + stage-3 epoch budget, then the same merge.
    b_cfg = _stage_config(cfg, 3, "baseline", seed)
    baseline, blog = train_stage(init, b_cfg, corpus.paired_train, vocab,
                                 allow_lineage_mismatch=True)
    blog.save(art.path("log_baseline", "logs/baseline.jsonl"))
    save_checkpoint(baseline, art.path("ckpt_baseline", "ckpt/baseline.ckpt"))
    baseline_merged = merge(init, baseline, lam)
    save_checkpoint(baseline_merged,
                    art.path("ckpt_baseline_merged", "ckpt/baseline_merged.ckpt"))
    results[f"baseline - {lam:g}"] = evaluate_model(baseline_merged, testsets, vocab,
                                                    decode_cfg)
    manifest_models[f"baseline - {lam:g}"] = {"lineage": baseline_merged.lineage}

    # --- fusion tuning on the baseline, mirroring the +LM comparison ------
    fusion_summary = None
    if cfg["fusion"].get("enabled", True):
        tuning = D.tune_fusion(baseline_merged, lm, corpus.dev, vocab,
                               alphas=cfg["fusion"]["alphas"],
                               betas=cfg["fusion"]["betas"], base_cfg=decode_cfg)
        with open(art.path("fusion_table", "fusion/tuning.csv"), "w",
                  encoding="utf-8") as f:
            f.write(tuning.to_csv())
        fused_cfg = D.DecodeConfig(beam=decode_cfg.beam, max_len=decode_cfg.max_len,
                                   fusion=True, alpha=tuning.alpha, beta=tuning.beta)
        results[f"baseline - {lam:g} + lm"] = evaluate_model(
            baseline_merged, testsets, vocab, fused_cfg, lm)
        fusion_summary = {"alpha": tuning.alpha, "beta": tuning.beta,
                          "dev_wer": tuning.wer}

    # --- merge-ratio sweep -------------------------------------------------
    sweep_csv = None
    if cfg["sweep"].get("enabled", True) and not skip_stage1:
        def sweep_eval(m):
            wers = evaluate_model(m, testsets, vocab, decode_cfg)
            rows = E.build_report_rows({"m": wers}, groups)
            return {**wers, "overall": float(rows[0].overall)}

        sweep = ratio_sweep(init, stage_ckpts["stage3"], cfg["sweep"]["ratios"],
                            sweep_eval)
        sweep_csv = sweep.to_csv()
        with open(art.path("sweep_table", "report/sweep.csv"), "w",
                  encoding="utf-8") as f:
            f.write(sweep_csv)

    # --- report ------------------------------------------------------------
    rows = E.build_report_rows(results, groups)
    table_text, table_csv = E.render_report(rows, groups)
    with open(art.path("report_csv", "report/report.csv"), "w", encoding="utf-8") as f:
        f.write(table_csv)

    cmi_rows = [
        ("Text", "text_filtered", len(filtered), C.corpus_cmi(filtered)[0]),
        ("Speech-Text", "paired_train",
         len(corpus.paired_train), C.corpus_cmi([p.utterance for p in corpus.paired_train])[0]),
        ("Test", "test_a", len(corpus.test_a),
         C.corpus_cmi([p.utterance for p in corpus.test_a])[0]),
        ("Test", "test_b", len(corpus.test_b),
         C.corpus_cmi([p.utterance for p in corpus.test_b])[0]),
        ("Test", "test_cs", len(corpus.test_cs),
         C.corpus_cmi([p.utterance for p in corpus.test_cs])[0]),
    ]

    lines = ["stagedasr pipeline report", "=" * 60, ""]
    lines.append(f"seed: {seed}")
    lines.append(f"merge ratio: {lam:g}")
    lines.append("")
    lines.append("corpus code-mixing (CMI)")
    lines.append(C.cmi_table([(t, n, str(c), v) for t, n, c, v in cmi_rows]).rstrip("\n"))
    lines.append("")
    lines.append("text filters: " + json.dumps(freport.to_dict(), sort_keys=True))
    lines.append("")
    lines.append("word error rates (%)")
    lines.append(table_text.rstrip("\n"))
    lines.append("")
    if not skip_stage1:
        base_row = next(r for r in rows if r.model == f"baseline - {lam:g}")
        final_row = next(r for r in rows if r.model == f"stage3 - {lam:g}")
        orig_row = next(r for r in rows if r.model == "orig (init)")
        if base_row.set_wers["test_cs"] > 0:
            lines.append("relative WER reduction, staged vs baseline (CS): "
                         f"{E.rel_reduction(base_row.set_wers['test_cs'], final_row.set_wers['test_cs'])}%")
        if float(orig_row.overall) > 0:
            lines.append("relative WER reduction, staged vs init (overall): "
                         f"{E.rel_reduction(float(orig_row.overall), float(final_row.overall))}%")
        lines.append("")
    if fusion_summary is not None:
        lines.append("fusion tuning (baseline + lm): "
                     + json.dumps(fusion_summary, sort_keys=True))
        lines.append("")
    if sweep_csv is not None:
        lines.append("merge-ratio sweep (init <-> stage3)")
        lines.append(sweep_csv.rstrip("\n"))
        lines.append("")
    report_text = "\n".join(lines) + "\n"
    with open(art.path("report", "report/report.txt"), "w", encoding="utf-8") as f:
        f.write(report_text)

    manifest = {
        "config": cfg,
        "seed": seed,
        "skip_stage1": skip_stage1,
        "artifacts": dict(sorted(art.files.items())),
        "models": manifest_models,
        "results": {m: {s: round(v, 6) for s, v in wers.items()}
                    for m, wers in results.items()},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return PipelineResult(out_dir, manifest, report_text, results)
