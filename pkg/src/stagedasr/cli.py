"""Command-line interface: one verb per module.

Subcommands: gen, corpus (filter/cmi), lm (train/ppl), train, merge,
sweep, decode, tune-fusion, eval, pipeline. Exit codes: 0 success,
2 config error, 3 data error, 4 divergence/numerics, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import corpus as C
from . import decoding as D
from . import evaluation as E
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, exit_code_for
from .merge import DEFAULT_RATIOS, merge, ratio_sweep
from .ngram import NGramLM
from .pipeline import default_config, load_config, run_pipeline, evaluate_model
from .trainer import StageConfig, AugmentPolicy, train_stage


def _add_gen(sub):
    p = sub.add_parser("gen", help="generate a synthetic bilingual dataset")
    p.add_argument("--spec", help="JSON corpus spec file (defaults used if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")


def _add_corpus(sub):
    p = sub.add_parser("corpus", help="text corpus tools")
    csub = p.add_subparsers(dest="corpus_cmd", required=True)
    f = csub.add_parser("filter", help="apply text filters")
    f.add_argument("--rules", nargs="+", default=["ngram:2,3:4", "mintok:32"],
                   help="filter rules, e.g. ngram:2,3:4 mintok:32 "
                        "(defaults: repeated 2-/3-grams >4 times, <32 tokens)")
    f.add_argument("--in", dest="infile", required=True)
    f.add_argument("--out", dest="outfile", required=True)
    f.add_argument("--report", help="write a JSON filter report here")
    c = csub.add_parser("cmi", help="report corpus code-mixing index")
    c.add_argument("--in", dest="infile", required=True)
    c.add_argument("--lexicon", required=True)
    c.add_argument("--name", default="corpus")
    c.add_argument("--type", default="Text")


def _add_lm(sub):
    p = sub.add_parser("lm", help="n-gram language model tools")
    lsub = p.add_subparsers(dest="lm_cmd", required=True)
    t = lsub.add_parser("train", help="train a count-based LM")
    t.add_argument("--in", dest="infile", required=True)
    t.add_argument("--order", type=int, default=5, help="n-gram order (default 5)")
    t.add_argument("--backoff", type=float, default=0.4,
                   help="stupid-backoff factor (default 0.4)")
    t.add_argument("--out", required=True)
    q = lsub.add_parser("ppl", help="corpus perplexity under a saved LM")
    q.add_argument("--lm", required=True)
    q.add_argument("--in", dest="infile", required=True)


def _add_train(sub):
    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--config", help="JSON StageConfig overrides")
    p.add_argument("--init", required=True, help="input checkpoint")
    p.add_argument("--data", required=True,
                   help="dataset dir (stage 1 uses its filtered/plain text, "
                        "stages 2-3 its paired train split)")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--log", help="training log JSONL path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-lineage-mismatch", action="store_true",
                   help="train even if the input checkpoint lacks the "
                        "previous stage in its lineage")


def _add_merge(sub):
    p = sub.add_parser("merge", help="linear checkpoint interpolation")
    p.add_argument("--base", required=True)
    p.add_argument("--tuned", required=True)
    p.add_argument("--ratio", type=float, default=0.4,
                   help="weight of the tuned model (default 0.4; the base "
                        "model contributes 1-ratio)")
    p.add_argument("--out", required=True)


def _add_sweep(sub):
    p = sub.add_parser("sweep", help="merge-ratio sweep with WER evaluation")
    p.add_argument("--base", required=True)
    p.add_argument("--tuned", required=True)
    p.add_argument("--ratios", default=",".join(f"{r:g}" for r in DEFAULT_RATIOS),
                   help="comma-separated ratios (default 0,0.2,0.4,0.6,0.8,1.0)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--beam", type=int, default=2)
    p.add_argument("--out", required=True, help="CSV output")


def _add_decode(sub):
    p = sub.add_parser("decode", help="transcribe a paired split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test_cs",
                   choices=("train", "dev", "test_a", "test_b", "test_cs"))
    p.add_argument("--beam", type=int, default=2, help="beam size (default 2)")
    p.add_argument("--lm", help="fuse this LM during search")
    p.add_argument("--alpha", type=float, default=0.0,
                   help="LM weight (tuned in [0, 0.1])")
    p.add_argument("--beta", type=float, default=0.0,
                   help="length bonus (tuned in [-0.2, 0.2])")
    p.add_argument("--prompt", default="ms,en",
                   help="comma-separated language prompts (default ms,en)")
    p.add_argument("--out", help="write hypotheses here (default stdout)")


def _add_tune_fusion(sub):
    p = sub.add_parser("tune-fusion", help="grid-search fusion weights on dev")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--alphas", default=",".join(f"{a:g}" for a in D.ALPHA_GRID),
                   help="comma-separated grid (default 4 points on [0, 0.1])")
    p.add_argument("--betas", default=",".join(f"{b:g}" for b in D.BETA_GRID),
                   help="comma-separated grid (default 4 points on [-0.2, 0.2])")
    p.add_argument("--beam", type=int, default=2)
    p.add_argument("--out", help="CSV table output")


def _add_eval(sub):
    p = sub.add_parser("eval", help="WER report over the test sets")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--lm")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--beam", type=int, default=2)
    p.add_argument("--report", help="write the text report here (default stdout)")


def _add_pipeline(sub):
    p = sub.add_parser("pipeline", help="run the full staged workflow")
    p.add_argument("--config", help="JSON run config (defaults if omitted)")
    p.add_argument("--out", required=True, help="artifacts directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--skip-stage1", action="store_true",
                   help="train only the equal-speech-budget baseline "
                        "(full fine-tune from init, no stages 1-2)")
    p.add_argument("--print-defaults", action="store_true",
                   help="print the default config as JSON and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="stagedasr",
        description="Staged text-then-speech adaptation lab: three-stage "
                    "decoder/cross-attention/full fine-tuning, checkpoint "
                    "merging (default ratio 0.4), 5-gram shallow fusion "
                    "(beam 2, alpha in [0,0.1], beta in [-0.2,0.2]), and WER "
                    "reports. Warmup defaults: 10%% (text stage), 20%% "
                    "(speech stages).")
    sub = ap.add_subparsers(dest="cmd", required=True)
    for add in (_add_gen, _add_corpus, _add_lm, _add_train, _add_merge, _add_sweep,
                _add_decode, _add_tune_fusion, _add_eval, _add_pipeline):
        add(sub)
    return ap


def _load_words(path: str) -> list[list[str]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.split("\t")[0].strip()
            if line:
                out.append(line.split())
    return out


def _prompt_tokens(arg: str) -> tuple:
    names = {"ms": C.PROMPT_A, "en": C.PROMPT_B}
    out = []
    for part in arg.split(","):
        part = part.strip()
        if not part:
            continue
        out.append(names.get(part, part))
    return tuple(out)


def _decode_cfg(args, fusion: bool) -> D.DecodeConfig:
    return D.DecodeConfig(beam=args.beam, fusion=fusion,
                          alpha=getattr(args, "alpha", 0.0),
                          beta=getattr(args, "beta", 0.0))


def _run(args) -> int:
    if args.cmd == "gen":
        spec = C.CorpusSpec() if not args.spec else \
            C.CorpusSpec.from_dict(json.load(open(args.spec, encoding="utf-8")))
        corpus = C.generate_corpus(spec, args.seed)
        C.save_dataset(corpus, args.out)
        print(f"wrote dataset to {args.out} "
              f"(text={len(corpus.text)}, paired_train={len(corpus.paired_train)})")
        return 0

    if args.cmd == "corpus":
        if args.corpus_cmd == "filter":
            lines = _load_words(args.infile)
            kept, report = C.run_filters([" ".join(ws) for ws in lines], args.rules)
            with open(args.outfile, "w", encoding="utf-8") as f:
                for text in kept:
                    f.write(text + "\n")
            if args.report:
                with open(args.report, "w", encoding="utf-8") as f:
                    json.dump(report.to_dict(), f, sort_keys=True, indent=2)
                    f.write("\n")
            print(json.dumps(report.to_dict(), sort_keys=True))
            return 0
        lexicon = C.Lexicon.load(args.lexicon)
        utts = C.load_text_corpus(args.infile, lexicon)
        mean, count = C.corpus_cmi(utts)
        print(C.cmi_table([(args.type, args.name, str(count), mean)]), end="")
        return 0

    if args.cmd == "lm":
        if args.lm_cmd == "train":
            lm = NGramLM.train(_load_words(args.infile), order=args.order,
                               backoff_factor=args.backoff)
            lm.save(args.out)
            print(f"trained order-{args.order} LM on {lm.total_unigrams} tokens "
                  f"-> {args.out}")
            return 0
        lm = NGramLM.load(args.lm)
        print(f"perplexity: {lm.perplexity(_load_words(args.infile)):.4f}")
        return 0

    if args.cmd == "train":
        params = load_checkpoint(args.init)
        data = C.load_dataset(args.data)
        overrides = {}
        if args.config:
            overrides = json.load(open(args.config, encoding="utf-8"))
        aug = overrides.pop("augment", None)
        cfg = StageConfig(stage=args.stage, seed=args.seed,
                          augment_policy=AugmentPolicy.from_dict(aug) if aug else None,
                          **overrides)
        dataset = data.text if args.stage == 1 else data.paired_train
        trained, log = train_stage(params, cfg, dataset, data.vocab,
                                   allow_lineage_mismatch=args.allow_lineage_mismatch)
        if args.log:
            log.save(args.log)
        save_checkpoint(trained, args.out)
        print(f"stage {args.stage}: {len(log.records)} updates, "
              f"final loss {log.records[-1]['loss']:.4f} -> {args.out}")
        return 0

    if args.cmd == "merge":
        merged = merge(load_checkpoint(args.base), load_checkpoint(args.tuned),
                       args.ratio)
        save_checkpoint(merged, args.out)
        print(f"merged at ratio {args.ratio:g} -> {args.out}")
        return 0

    if args.cmd == "sweep":
        base = load_checkpoint(args.base)
        tuned = load_checkpoint(args.tuned)
        data = C.load_dataset(args.data)
        testsets = {"test_a": data.test_a, "test_b": data.test_b,
                    "test_cs": data.test_cs}
        cfg = D.DecodeConfig(beam=args.beam, max_len=base.hp.max_tokens - 3)

        def eval_fn(m):
            return evaluate_model(m, testsets, data.vocab, cfg)

        ratios = [float(r) for r in args.ratios.split(",") if r]
        result = ratio_sweep(base, tuned, ratios, eval_fn)
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(result.to_csv())
        print(result.to_csv(), end="")
        return 0

    if args.cmd == "decode":
        params = load_checkpoint(args.ckpt)
        data = C.load_dataset(args.data)
        lm = NGramLM.load(args.lm) if args.lm else None
        cfg = D.DecodeConfig(beam=args.beam, max_len=params.hp.max_tokens - 3,
                             prompt_tokens=_prompt_tokens(args.prompt),
                             fusion=lm is not None, alpha=args.alpha, beta=args.beta)
        lines = []
        for ex in getattr(data, args.split):
            res = D.decode(params, ex.features, cfg, data.vocab, lm)
            lines.append(json.dumps({"id": ex.utterance.uid, "text": res.text,
                                     "asr_logprob": round(res.asr_logprob, 6),
                                     "lm_logprob": round(res.lm_logprob, 6),
                                     "fused": round(res.fused_score, 6),
                                     "truncated": res.truncated}, sort_keys=True))
        out_text = "\n".join(lines) + "\n"
        if args.out:
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(out_text)
        else:
            print(out_text, end="")
        return 0

    if args.cmd == "tune-fusion":
        params = load_checkpoint(args.ckpt)
        lm = NGramLM.load(args.lm)
        data = C.load_dataset(args.data)
        cfg = D.DecodeConfig(beam=args.beam, max_len=params.hp.max_tokens - 3)
        tuning = D.tune_fusion(params, lm, data.dev, data.vocab,
                               alphas=[float(a) for a in args.alphas.split(",")],
                               betas=[float(b) for b in args.betas.split(",")],
                               base_cfg=cfg)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(tuning.to_csv())
        print(f"best alpha={tuning.alpha:g} beta={tuning.beta:g} "
              f"dev WER={tuning.wer:.2f}")
        return 0

    if args.cmd == "eval":
        params = load_checkpoint(args.ckpt)
        data = C.load_dataset(args.data)
        lm = NGramLM.load(args.lm) if args.lm else None
        cfg = D.DecodeConfig(beam=args.beam, max_len=params.hp.max_tokens - 3,
                             fusion=lm is not None, alpha=args.alpha, beta=args.beta)
        testsets = {"test_a": data.test_a, "test_b": data.test_b,
                    "test_cs": data.test_cs}
        wers = evaluate_model(params, testsets, data.vocab, cfg, lm)
        groups = {"EN": ["test_b"], "BM": ["test_a"], "CS": ["test_cs"]}
        rows = E.build_report_rows({os.path.basename(args.ckpt): wers}, groups)
        text, _csv = E.render_report(rows, groups)
        if args.report:
            with open(args.report, "w", encoding="utf-8") as f:
                f.write(text)
        print(text, end="")
        return 0

    if args.cmd == "pipeline":
        if args.print_defaults:
            print(json.dumps(default_config(), sort_keys=True, indent=2))
            return 0
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = load_config(args.config, overrides)
        result = run_pipeline(cfg, args.out, skip_stage1=args.skip_stage1)
        print(result.report_text, end="")
        return 0

    raise ConfigError(f"unknown command {args.cmd!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
