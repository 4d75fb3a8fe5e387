"""Command-line entry points: data generation, staged training, evaluation, probes."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as CK
from . import data as D
from . import evaluate as E
from . import train as TR
from .errors import VTokenError
from .model import ModelConfig, VisionLanguageModel

log = logging.getLogger("vtoken")

# corpus files written by gen-data, with the seed offset and task of each
CORPUS = {
    "caption.jsonl": (1, "caption"),
    "instruct.jsonl": (2, "instruct"),
    "images.jsonl": (3, "image"),
    "heldout.jsonl": (99, "caption"),
}


class CliError(Exception):
    pass


def _vocab(data_dir) -> D.Vocabulary:
    path = Path(data_dir) / "vocab.txt"
    return D.Vocabulary.load(path) if path.exists() else D.Vocabulary.default()


def _write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- gen-data / init

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = D.Vocabulary.default()
    vocab.save(out / "vocab.txt")
    for name, (offset, task) in CORPUS.items():
        n = args.heldout if name == "heldout.jsonl" else args.n
        D.generate_corpus(out / name, args.seed + offset, n, task, vocab)
        print(f"wrote {out / name} ({n} samples)")
    return 0


def cmd_init(args) -> int:
    model = VisionLanguageModel(ModelConfig(), seed=args.seed)
    CK.save_checkpoint(args.out, model, {"stage": None, "step": 0, "rng": {"init_seed": args.seed},
                                         "history": []})
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------- training

def stage_config(stage: int, config_file=None, data_dir=None, seed=None, loss=None) -> TR.StageConfig:
    """Defaults for ``stage`` overlaid with a JSON config file and CLI overrides."""
    if config_file:
        raw = json.loads(Path(config_file).read_text())
        if raw.get("stage", stage) != stage:
            raise CliError(f"{config_file}: config is for stage {raw['stage']}, not {stage}")
        cfg = TR.StageConfig.from_file(config_file, stage=stage, seed=seed, loss=loss)
        if cfg.dataset and not Path(cfg.dataset).is_absolute():
            cfg.dataset = str(Path(config_file).parent / cfg.dataset)
    else:
        cfg = TR.StageConfig(stage=stage, **({"seed": seed} if seed is not None else {}),
                             **({"loss": loss} if loss else {}))
    if cfg.dataset is None:
        if data_dir is None:
            raise CliError(f"stage {stage}: no dataset in config and no --data directory")
        cfg.dataset = str(Path(data_dir) / TR.STAGE_DATASET[stage])
    return cfg


def train_one(stage: int, ckpt_in, ckpt_out, config_file=None, data_dir=None, metrics_path=None,
              seed=None, loss=None) -> TR.RunMetrics:
    cfg = stage_config(stage, config_file, data_dir, seed, loss)
    model, meta = CK.load_checkpoint(ckpt_in)
    vocab = _vocab(data_dir or Path(cfg.dataset).parent)
    if len(vocab) != model.config.vocab_size:
        raise CliError(f"vocabulary has {len(vocab)} tokens, model expects {model.config.vocab_size}")
    start = time.perf_counter()
    metrics = TR.run_stage(model, cfg, vocab=vocab)
    elapsed = time.perf_counter() - start
    history = list(meta.get("history", [])) + [TR.stage_meta(cfg, len(metrics.rows))]
    CK.save_checkpoint(ckpt_out, model, {**TR.stage_meta(cfg, len(metrics.rows)), "history": history})
    if metrics_path:
        metrics.write_csv(metrics_path, append=False)
    log.info("stage %s: %d steps in %.1fs -> %s", TR.STAGE_NAMES[stage], len(metrics.rows),
             elapsed, ckpt_out)
    return metrics


def cmd_pretrain(args) -> int:
    m = train_one(0, args.inp, args.out, args.config, args.data, args.metrics, args.seed)
    print(f"pretrain: {len(m.rows)} steps, final loss {m.rows[-1]['loss']:.4f}")
    return 0


def cmd_train(args) -> int:
    m = train_one(args.stage, args.inp, args.out, args.config, args.data, args.metrics,
                  args.seed, args.loss)
    print(f"stage {TR.STAGE_NAMES[args.stage]}: {len(m.rows)} steps, "
          f"loss {m.rows[0]['loss']:.4f} -> {m.rows[-1]['loss']:.4f}")
    return 0


def _eval_record(model, samples, pseudo: bool) -> dict:
    rec = {}
    r = E.evaluate(model, samples)
    rec["original"] = {"accuracy": r.accuracy, "loss_lm": r.loss_lm, "n": r.n}
    if pseudo:
        p = E.evaluate(model, samples, pseudo=True)
        rec["pseudo"] = {"accuracy": p.accuracy, "loss_lm": p.loss_lm, "n": p.n}
    rec["visual_kl"] = E.heldout_visual_kl(model, samples)
    return rec


def _token_map_stats(model, samples, vocab, mode: str, fig_dir=None, n_figs: int = 0) -> dict:
    from . import analysis as A
    from . import plotting
    probe = A.token_map_top if mode == "top" else A.token_map_nearest
    hit = tot = ohit = otot = 0
    for i, s in enumerate(samples):
        tm = probe(model, s.pixels, vocab)
        a, b = A.color_accuracy(tm, s.pixels, vocab)
        c, d = A.object_color_accuracy(tm, s.pixels, vocab)
        hit, tot, ohit, otot = hit + a, tot + b, ohit + c, otot + d
        if fig_dir and i < n_figs:
            plotting.token_map(s.pixels, tm, Path(fig_dir) / f"token_map_{mode}_{i:03d}.png")
    return {"solid_patch_accuracy": hit / max(tot, 1), "object_patch_accuracy": ohit / max(otot, 1),
            "solid_patches": tot, "object_patches": otot}


def cmd_train_all(args) -> int:
    from . import plotting
    data, out = Path(args.data), Path(args.out)
    ck, met, figs = out / "checkpoints", out / "metrics", out / "figures"
    for name in ("vocab.txt",) + tuple(CORPUS):
        if not (data / name).exists():
            raise CliError(f"{data / name} missing; run gen-data first")
    cfg_dir = Path(args.config_dir) if args.config_dir else None

    def cfg_file(stage):
        if cfg_dir is None:
            return None
        f = cfg_dir / f"stage{stage}.json"
        return f if f.exists() else None

    model = VisionLanguageModel(ModelConfig(), seed=args.seed)
    CK.save_checkpoint(ck / "init.ckpt", model, {"stage": None, "step": 0,
                                                  "rng": {"init_seed": args.seed}, "history": []})
    runs, timings = {}, {}
    prev = ck / "init.ckpt"
    t_all = time.perf_counter()
    for stage in range(5):
        t0 = time.perf_counter()
        path = ck / f"stage{stage}.ckpt"
        runs[stage] = train_one(stage, prev, path, cfg_file(stage), data, met / f"stage{stage}.csv",
                                args.seed)
        timings[TR.STAGE_NAMES[stage]] = round(time.perf_counter() - t0, 2)
        print(f"stage {TR.STAGE_NAMES[stage]}: {len(runs[stage].rows)} steps "
              f"in {timings[TR.STAGE_NAMES[stage]]:.1f}s", flush=True)
        prev = path
    timings["pipeline"] = round(time.perf_counter() - t_all, 2)

    heldout = D.read_jsonl(data / "heldout.jsonl")
    vocab = _vocab(data)
    final, _ = CK.load_checkpoint(ck / "stage4.ckpt")
    summary = {"seed": args.seed, "timings_s": timings}
    mm_losses = runs[4].column("loss")
    summary["stage4"] = {"initial_loss_mm": float(mm_losses[0]), "final_loss_mm": float(mm_losses[-1]),
                         "steps": len(mm_losses)}
    summary["eval"] = _eval_record(final, heldout, pseudo=True)
    summary["token_map_top"] = _token_map_stats(final, heldout, vocab, "top", figs, args.figures)
    summary["token_map_nearest"] = _token_map_stats(final, heldout, vocab, "nearest", figs,
                                                    args.figures)

    if not args.no_ablation:
        t0 = time.perf_counter()
        lm_run = train_one(4, ck / "stage3.ckpt", ck / "stage4_lm_only.ckpt", cfg_file(4), data,
                           met / "stage4_lm_only.csv", args.seed, loss="lm")
        timings["ablation"] = round(time.perf_counter() - t0, 2)
        lm_model, _ = CK.load_checkpoint(ck / "stage4_lm_only.ckpt")
        summary["ablation"] = {"mm": summary["eval"], "lm_only": _eval_record(lm_model, heldout, False)}
        plotting.ablation(runs[4], lm_run, figs / "ablation_stage4.png")

    plotting.loss_curves({f"stage {TR.STAGE_NAMES[s]}": runs[s] for s in runs},
                         figs / "loss_curves.png")
    _write_json(summary, out / "summary.json")
    ev = summary["eval"]
    print(f"held-out caption accuracy {ev['original']['accuracy']:.3f}, "
          f"pseudo-feature {ev['pseudo']['accuracy']:.3f}, visual KL {ev['visual_kl']:.4f}")
    print(f"summary: {out / 'summary.json'}")
    return 0


# ---------------------------------------------------------------- eval / analyze / gradcheck

def cmd_eval(args) -> int:
    model, _ = CK.load_checkpoint(args.ckpt)
    samples = D.read_jsonl(args.data)
    if args.limit:
        samples = samples[:args.limit]
    rec = _eval_record(model, samples, args.pseudo_features)
    for kind in ("original", "pseudo"):
        if kind in rec:
            r = rec[kind]
            print(f"{kind}-features: accuracy={r['accuracy']:.4f} loss_lm={r['loss_lm']:.4f} n={r['n']}")
    print(f"visual_kl={rec['visual_kl']:.6f}")
    if args.json:
        _write_json(rec, args.json)
    return 0


def cmd_analyze(args) -> int:
    from . import analysis as A
    from . import plotting
    model, _ = CK.load_checkpoint(args.ckpt)
    samples = D.read_jsonl(args.data)[:args.n]
    vocab = _vocab(Path(args.data).parent)
    probe = A.token_map_top if args.mode == "top" else A.token_map_nearest
    for i, s in enumerate(samples):
        tm = probe(model, s.pixels, vocab)
        print(tm.to_json())
        if args.out:
            plotting.token_map(s.pixels, tm, Path(args.out) / f"token_map_{args.mode}_{i:03d}.png")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all
    ok = run_all(args.n_params, args.seed)
    return 0 if ok else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vtoken", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write vocabulary and synthetic corpus files")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=4096, help="samples per training file")
    g.add_argument("--heldout", type=int, default=256)
    g.set_defaults(fn=cmd_gen_data)

    g = sub.add_parser("init", help="write a freshly initialised checkpoint")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_init)

    def train_args(g):
        g.add_argument("--config", help="JSON stage config")
        g.add_argument("--in", dest="inp", required=True)
        g.add_argument("--out", required=True)
        g.add_argument("--data", help="corpus directory (default dataset per stage)")
        g.add_argument("--metrics", help="CSV path for per-step metrics")
        g.add_argument("--seed", type=int)

    g = sub.add_parser("pretrain", help="text-only decoder pretraining on patch transcripts")
    train_args(g)
    g.set_defaults(fn=cmd_pretrain)

    g = sub.add_parser("train", help="run one training stage")
    g.add_argument("--stage", type=int, choices=(1, 2, 3, 4), required=True)
    g.add_argument("--loss", choices=("mm", "lm"), help="stage IV loss selector")
    train_args(g)
    g.set_defaults(fn=cmd_train)

    g = sub.add_parser("train-all", help="pretraining plus the four stages, evaluation and figures")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config-dir", help="directory of stage{N}.json overrides")
    g.add_argument("--figures", type=int, default=4, help="token-map figures per mode")
    g.add_argument("--no-ablation", action="store_true", help="skip the LM-only stage IV run")
    g.set_defaults(fn=cmd_train_all)

    g = sub.add_parser("eval", help="held-out captioning accuracy and losses")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--pseudo-features", action="store_true",
                   help="also evaluate with visual embeddings replaced by token-weighted embeddings")
    g.add_argument("--limit", type=int)
    g.add_argument("--json")
    g.set_defaults(fn=cmd_eval)

    g = sub.add_parser("analyze", help="per-patch token maps")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--mode", choices=("nearest", "top"), required=True)
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--out", help="directory for PNG overlays")
    g.set_defaults(fn=cmd_analyze)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    g.add_argument("--n-params", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CliError, VTokenError, TR.TrainingError, D.DatasetParseError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"vtoken {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
