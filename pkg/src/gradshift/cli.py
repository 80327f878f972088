"""Command-line entry point wiring the pipeline end to end.

Subcommands: generate, train, score, eval, monitor, report. Each takes a
config file (--config) or a named preset (--preset); individual flags
override config fields. Subcommands exit non-zero with a machine-parsable
error code on failure (see ERROR_CODES).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import baselines as bl
from .config import (
    ExperimentConfig, config_to_dict, get_preset, load_config,
)
from .evaluation import (
    MonitorConfig, Stopwatch, auroc, calibrate_monitor, export_distributions,
    load_results_json, monitor_episode, save_results_json, summarize_monitor,
)
from .models import load_model, model_hash, save_model
from .scoring import (
    BASELINE_VARIANTS, GRADIENT_VARIANTS, RECON_VARIANTS, ScoredSample,
    load_scores_csv, save_scores_csv, score_corpus,
)
from .synthetic import (
    GenerationError, generate_episodes, generate_trajectories,
    load_episodes_jsonl, save_episodes_jsonl, training_windows,
)
from .trajectory import (
    EmptySplitError, apply_labels, build_split, label_corpus,
    load_corpus_jsonl, save_corpus_jsonl,
)
from .training import (
    EncoderMutated, train_autoencoder, train_forecaster,
    train_history_decoder, train_masked_autoencoder,
)

ERROR_CODES = {
    "E_CONFIG": 2,     # bad flags, config file, or preset
    "E_MISSING": 3,    # missing prerequisite file/checkpoint
    "E_DATA": 4,       # contract violation in data or models
    "E_GENERATE": 5,   # scenario generation failed
    "E_INTERNAL": 1,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _require(path, what) -> str:
    if not os.path.exists(path):
        raise CliError("E_MISSING", f"{what} not found: {path} "
                       f"(run the producing subcommand first)")
    return path


# ----------------------------------------------------------------------
# generate
# ----------------------------------------------------------------------

def run_generate(cfg: ExperimentConfig) -> dict:
    out = cfg.resolved_out_dir()
    os.makedirs(out, exist_ok=True)
    manifest = {"experiment": cfg.experiment, "seed": cfg.seed, "files": {},
                "counts": {}}
    if cfg.is_monitor:
        plan = cfg.episodes
        sc = cfg.scenario
        train_eps = generate_episodes(
            dataclasses.replace(sc, seed=cfg.seed), plan.n_train_safe, 0)
        cal_eps = generate_episodes(
            dataclasses.replace(sc, seed=cfg.seed + 1), plan.n_cal_safe, 0)
        eval_eps = generate_episodes(
            dataclasses.replace(sc, seed=cfg.seed + 2),
            plan.n_eval_safe, plan.n_eval_collision)
        save_episodes_jsonl(cfg.path("episodes_train"), train_eps)
        save_episodes_jsonl(cfg.path("episodes_cal"), cal_eps)
        save_episodes_jsonl(cfg.path("episodes_eval"), eval_eps)
        windows = training_windows(train_eps, cfg.split.n_past,
                                   cfg.split.horizon, plan.window_stride)
        save_corpus_jsonl(cfg.path("corpus_train"), windows)
        manifest["counts"] = {
            "train_episodes": len(train_eps),
            "cal_episodes": len(cal_eps),
            "eval_safe": sum(e.outcome == "safe" for e in eval_eps),
            "eval_collision": sum(e.outcome == "collision" for e in eval_eps),
            "training_windows": len(windows),
        }
        files = ("episodes_train", "episodes_cal", "episodes_eval",
                 "corpus_train")
    else:
        train_corpus = generate_trajectories(
            dataclasses.replace(cfg.scenario, seed=cfg.seed))
        split_res = build_split(train_corpus, cfg.rule, cfg.turn_threshold)
        save_corpus_jsonl(cfg.path("corpus_train"), split_res.train)
        eval_corpus = generate_trajectories(
            dataclasses.replace(cfg.scenario, seed=cfg.seed + 1,
                                counts=dict(cfg.eval_counts)))
        labels = label_corpus(eval_corpus, cfg.rule, split_res.threshold)
        eval_corpus = apply_labels(eval_corpus, labels)
        save_corpus_jsonl(cfg.path("corpus_eval"), eval_corpus)
        n_ood = sum(t.label.is_shifted for t in eval_corpus)
        manifest["counts"] = {
            "train": len(split_res.train),
            "train_removed": len(split_res.ood),
            "eval_id": len(eval_corpus) - n_ood,
            "eval_ood": n_ood,
        }
        manifest["rule"] = cfg.rule
        manifest["threshold"] = split_res.threshold
        files = ("corpus_train", "corpus_eval")
    for key in files:
        manifest["files"][key] = _sha256_file(cfg.path(key))
    with open(cfg.path("manifest"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for name, count in manifest["counts"].items():
        print(f"{name}: {count}")
    return manifest


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------

def run_train(cfg: ExperimentConfig, phase: str) -> dict:
    if phase not in ("primary", "past", "ae", "mae"):
        raise CliError("E_CONFIG", f"unknown training phase {phase!r}")
    corpus = load_corpus_jsonl(_require(cfg.path("corpus_train"),
                                        "training corpus"))
    out = cfg.resolved_out_dir()
    os.makedirs(out, exist_ok=True)
    info = {"phase": phase, "n_train": len(corpus)}
    if phase == "primary":
        encoder, decoder, log = train_forecaster(
            corpus, cfg.split, cfg.encoder, cfg.decoder, cfg.train)
        save_model(cfg.path("encoder"), encoder)
        save_model(cfg.path("primary_decoder"), decoder)
        info["encoder_hash"] = model_hash(encoder)
    elif phase == "past":
        encoder = load_model(_require(cfg.path("encoder"),
                                      "primary encoder checkpoint"))
        pre_hash = model_hash(encoder)
        decoder, log = train_history_decoder(
            encoder, corpus, cfg.split, cfg.decoder, cfg.train)
        save_model(cfg.path("past_decoder"), decoder)
        info["encoder_hash_before"] = pre_hash
        info["encoder_hash_after"] = model_hash(encoder)
        info["encoder_frozen"] = pre_hash == info["encoder_hash_after"]
    elif phase == "ae":
        model, log = train_autoencoder(corpus, cfg.split, cfg.recon, cfg.train)
        save_model(cfg.path("ae"), model)
    else:
        model, log = train_masked_autoencoder(corpus, cfg.split, cfg.recon,
                                              cfg.train)
        save_model(cfg.path("mae"), model)
    log_path = os.path.join(out, f"train_log_{phase}.csv")
    log.save_csv(log_path)
    info["epochs_run"] = len(log.rows)
    info["final_val"] = log.rows[-1]["val_nll"]
    print(f"phase={phase} epochs={info['epochs_run']} "
          f"final_val={info['final_val']:.4f}")
    if phase == "past":
        print(f"encoder_frozen={info['encoder_frozen']}")
    return info


# ----------------------------------------------------------------------
# score
# ----------------------------------------------------------------------

def _score_chunk(payload):
    (encoder_path, decoder_path, ae_path, mae_path, corpus_path, lo, hi,
     split, variants, mae_seed) = payload
    corpus = load_corpus_jsonl(corpus_path)[lo:hi]
    encoder = load_model(encoder_path) if encoder_path else None
    decoder = load_model(decoder_path) if decoder_path else None
    ae = load_model(ae_path) if ae_path else None
    mae = load_model(mae_path) if mae_path else None
    run = score_corpus(corpus, split, variants, encoder=encoder,
                       decoder=decoder, ae=ae, mae=mae, mae_seed=mae_seed)
    return [(r.sample_id, r.variant, r.score) for r in run.rows], \
        run.mean_gradient_ms


def run_score(cfg: ExperimentConfig, variants=None) -> dict:
    variants = tuple(variants if variants is not None else cfg.variants)
    model_variants = tuple(v for v in variants if v not in BASELINE_VARIANTS)
    grad_needed = any(v in GRADIENT_VARIANTS for v in variants) \
        or any(v in BASELINE_VARIANTS for v in variants)
    eval_path = _require(cfg.path("corpus_eval"), "evaluation corpus")
    eval_corpus = load_corpus_jsonl(eval_path)
    labels = {t.sample_id: t.label for t in eval_corpus}

    encoder = decoder = ae = mae = None
    if grad_needed:
        encoder = load_model(_require(cfg.path("encoder"),
                                      "encoder checkpoint"))
    if any(v in GRADIENT_VARIANTS for v in variants):
        decoder = load_model(_require(cfg.path("past_decoder"),
                                      "history-decoder checkpoint"))
    if "recon_ae" in variants:
        ae = load_model(_require(cfg.path("ae"), "autoencoder checkpoint"))
    if "recon_mae" in variants:
        mae = load_model(_require(cfg.path("mae"),
                                  "masked autoencoder checkpoint"))

    hashes_before = [model_hash(m)
                     for m in (encoder, decoder, ae, mae) if m is not None]
    rows: list[ScoredSample] = []
    mean_ms = 0.0
    if model_variants:
        if cfg.jobs > 1:
            chunks = np.array_split(np.arange(len(eval_corpus)),
                                    cfg.jobs * 4)
            payloads = [
                (cfg.path("encoder") if encoder else None,
                 cfg.path("past_decoder") if decoder else None,
                 cfg.path("ae") if ae else None,
                 cfg.path("mae") if mae else None,
                 eval_path, int(c[0]), int(c[-1]) + 1, cfg.split,
                 model_variants, cfg.mae_score_seed)
                for c in chunks if len(c)]
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                outs = list(pool.map(_score_chunk, payloads))
            per_ms = [ms for _, ms in outs if ms > 0]
            mean_ms = float(np.mean(per_ms)) if per_ms else 0.0
            for part, _ in outs:
                for sample_id, variant, score in part:
                    rows.append(ScoredSample(sample_id, variant, score,
                                             labels[sample_id]))
        else:
            run = score_corpus(eval_corpus, cfg.split, model_variants,
                               encoder=encoder, decoder=decoder, ae=ae,
                               mae=mae, mae_seed=cfg.mae_score_seed)
            rows = list(run.rows)
            mean_ms = run.mean_gradient_ms

    baseline_wanted = [v for v in variants if v in BASELINE_VARIANTS]
    if baseline_wanted:
        train_corpus = load_corpus_jsonl(_require(cfg.path("corpus_train"),
                                                  "training corpus"))
        z_train = bl.corpus_latents(encoder, train_corpus, cfg.split.n_past)
        z_eval = bl.corpus_latents(encoder, eval_corpus, cfg.split.n_past)
        if "kde" in baseline_wanted:
            kde = bl.KernelDensityModel(z_train)
            for t, s in zip(eval_corpus, kde.score_many(z_eval)):
                rows.append(ScoredSample(t.sample_id, "kde", float(s), t.label))
        if "iforest" in baseline_wanted:
            forest = bl.IsolationForest(z_train, seed=cfg.seed)
            for t, s in zip(eval_corpus, forest.score_many(z_eval)):
                rows.append(ScoredSample(t.sample_id, "iforest", float(s),
                                         t.label))

    if {model_hash(m) for m in (encoder, decoder, ae, mae)
            if m is not None} != set(hashes_before):
        raise CliError("E_DATA", "scoring mutated a model checkpoint")
    save_scores_csv(cfg.path("scores"), rows)
    meta = {"variants": list(variants), "n_rows": len(rows),
            "mean_score_ms": mean_ms}
    with open(cfg.path("scores_meta"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    print(f"scored {len(rows)} rows ({len(eval_corpus)} samples); "
          f"mean gradient-score time {mean_ms:.2f} ms")
    return meta


# ----------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------

def run_eval(cfg: ExperimentConfig) -> dict:
    rows = load_scores_csv(_require(cfg.path("scores"), "score CSV"))
    if any(r.label is None for r in rows):
        raise CliError("E_DATA", "score rows are missing labels; "
                       "evaluation needs a labeled corpus")
    by_variant: dict[str, list] = {}
    for r in rows:
        by_variant.setdefault(r.variant, []).append(r)
    mean_ms = 0.0
    if os.path.exists(cfg.path("scores_meta")):
        with open(cfg.path("scores_meta"), encoding="utf-8") as fh:
            mean_ms = json.load(fh).get("mean_score_ms", 0.0)
    results = {"experiment": cfg.experiment, "seed": cfg.seed,
               "mean_score_ms": mean_ms, "variants": []}
    for variant in sorted(by_variant):
        vrows = by_variant[variant]
        pos = [r.score for r in vrows if r.label.is_shifted]
        neg = [r.score for r in vrows if not r.label.is_shifted]
        res = auroc(pos, neg)
        results["variants"].append({
            "variant": variant, "auroc": res.auroc,
            "n_pos": res.n_pos, "n_neg": res.n_neg,
        })
        print(f"{variant:12s} auroc={res.auroc:.4f} "
              f"(pos={res.n_pos}, neg={res.n_neg})")
    export_distributions(rows, cfg.path("distributions"))
    save_results_json(cfg.path("results"), results)
    return results


# ----------------------------------------------------------------------
# monitor
# ----------------------------------------------------------------------

def run_monitor(cfg: ExperimentConfig) -> dict:
    encoder = load_model(_require(cfg.path("encoder"), "encoder checkpoint"))
    decoder = load_model(_require(cfg.path("past_decoder"),
                                  "history-decoder checkpoint"))
    cal = load_episodes_jsonl(_require(cfg.path("episodes_cal"),
                                       "calibration episodes"))
    eval_eps = load_episodes_jsonl(_require(cfg.path("episodes_eval"),
                                            "evaluation episodes"))
    mc: MonitorConfig = cfg.monitor
    watch = Stopwatch()
    threshold = calibrate_monitor(encoder, decoder, cal, cfg.split, mc)
    results = [monitor_episode(encoder, decoder, ep, cfg.split, threshold, mc)
               for ep in eval_eps]
    summary = summarize_monitor(results, threshold)
    n_windows = sum(len(r.scores) for r in results)
    summary.update({
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "quantile": mc.quantile,
        "lead_seconds": mc.lead_seconds,
        "mean_score_ms": watch.elapsed() / max(n_windows, 1) * 1e3,
    })
    save_results_json(cfg.path("monitor_results"), summary)
    with open(cfg.path("monitor_episodes"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode_id", "outcome", "collision_step",
                         "alarm_step", "eval_score", "verdict"])
        for r in results:
            writer.writerow([r.episode_id, r.outcome, r.collision_step,
                             r.alarm_step, repr(r.eval_score), r.verdict])
    print(f"threshold={threshold:.4f} "
          f"detection_rate={summary.get('detection_rate', float('nan')):.3f} "
          f"false_alarm_rate={summary.get('false_alarm_rate', float('nan')):.3f} "
          f"auroc={summary.get('auroc', float('nan')):.4f}")
    return summary


# ----------------------------------------------------------------------
# report
# ----------------------------------------------------------------------

def run_report(cfg: ExperimentConfig) -> dict:
    report = {}
    if os.path.exists(cfg.path("results")):
        results = load_results_json(cfg.path("results"))
        report["offline"] = results
        print(f"experiment: {results['experiment']} (seed {results['seed']})")
        print(f"{'variant':14s} {'AUROC':>8s} {'pos':>6s} {'neg':>6s}")
        for row in sorted(results["variants"], key=lambda r: -r["auroc"]):
            print(f"{row['variant']:14s} {row['auroc']:8.4f} "
                  f"{row['n_pos']:6d} {row['n_neg']:6d}")
    if os.path.exists(cfg.path("monitor_results")):
        summary = load_results_json(cfg.path("monitor_results"))
        report["monitor"] = summary
        print(f"monitor: threshold={summary['threshold']:.4f} "
              f"detection={summary.get('detection_rate')} "
              f"false_alarm={summary.get('false_alarm_rate')} "
              f"auroc={summary.get('auroc')}")
    if not report:
        raise CliError("E_MISSING",
                       "no results found; run eval or monitor first")
    return report


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------

def _load_cfg(args) -> ExperimentConfig:
    try:
        if args.config:
            cfg = load_config(args.config)
        elif args.preset:
            cfg = get_preset(args.preset)
        else:
            raise CliError("E_CONFIG", "pass --config FILE or --preset NAME")
    except FileNotFoundError as exc:
        raise CliError("E_MISSING", f"config file not found: {exc.filename}")
    except (ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
        raise CliError("E_CONFIG", f"bad config: {exc}")
    # flags win over the config file
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.scenario.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    if getattr(args, "jobs", None):
        cfg.jobs = args.jobs
    if getattr(args, "epochs", None):
        cfg.train.epochs = args.epochs
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradshift",
        description="Gradient-based distribution shift detection for "
                    "2D trajectories")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--preset", help="named preset "
                       "(turn_left, turn_right, over_speed, monitor, smoke)")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out-dir", help="override the output directory")
        p.add_argument("--jobs", type=int, help="worker process cap")

    p = sub.add_parser("generate", help="write corpora/episodes + manifest")
    common(p)
    p = sub.add_parser("train", help="train one model phase")
    common(p)
    p.add_argument("--phase", required=True,
                   choices=["primary", "past", "ae", "mae"])
    p.add_argument("--epochs", type=int, help="override epoch count")
    p = sub.add_parser("score", help="score the evaluation corpus")
    common(p)
    p.add_argument("--variants", help="comma-separated variant list")
    p = sub.add_parser("eval", help="AUROC tables + distribution export")
    common(p)
    p = sub.add_parser("monitor", help="online monitoring of episodes")
    common(p)
    p = sub.add_parser("report", help="print result tables")
    common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_cfg(args)
        if args.command == "generate":
            run_generate(cfg)
        elif args.command == "train":
            run_train(cfg, args.phase)
        elif args.command == "score":
            variants = None
            if args.variants:
                variants = tuple(v.strip() for v in args.variants.split(",")
                                 if v.strip())
            run_score(cfg, variants)
        elif args.command == "eval":
            run_eval(cfg)
        elif args.command == "monitor":
            run_monitor(cfg)
        elif args.command == "report":
            run_report(cfg)
        return 0
    except CliError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return ERROR_CODES[exc.code]
    except FileNotFoundError as exc:
        print(f"error[E_MISSING]: {exc}", file=sys.stderr)
        return ERROR_CODES["E_MISSING"]
    except GenerationError as exc:
        print(f"error[E_GENERATE]: {exc}", file=sys.stderr)
        return ERROR_CODES["E_GENERATE"]
    except (EmptySplitError, EncoderMutated) as exc:
        print(f"error[E_DATA]: {exc}", file=sys.stderr)
        return ERROR_CODES["E_DATA"]
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error[E_DATA]: {exc}", file=sys.stderr)
        return ERROR_CODES["E_DATA"]


if __name__ == "__main__":
    sys.exit(main())
