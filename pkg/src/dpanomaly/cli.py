"""Command-line interface: ``dpanomaly <command> ...``.

Commands:
  dataset build   render or assemble datasets (IDX images, session text files)
  train           train one model with (DP-)SGD and save a checkpoint
  score           per-sample loss scores from a checkpoint
  detect          threshold or top-k / probability detection
  eval            AUPR / AUROC of a score file, optional curve CSVs
  accountant      privacy budget of a subsampled Gaussian mechanism
  bound           lower bound on the outlier loss gap
  experiment run  run a config-driven experiment grid
  report          print the aggregate rows of an experiment summary
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from dpanomaly import config as cfgmod
from dpanomaly.data import images as img
from dpanomaly.data import sequences as sq
from dpanomaly.dp import ContractError, DpConfig, TrainingDiverged, train
from dpanomaly.metrics import HIGHER, LOWER, aupr, auroc, confusion, confusion_stats, make_scores, threshold_detect
from dpanomaly.nn import checkpoint
from dpanomaly.nn.model import ModelArch, build_model
from dpanomaly.privacy import AccountantState, outlier_gap_bound
from dpanomaly.report import curve_csv, fmt, read_summary, render_table

log = logging.getLogger("dpanomaly")

ARCH_PRESETS = {
    "dense-autoencoder": lambda a: ModelArch("dense-autoencoder", widths=(784, 128, 32, 128, 784)),
    "conv-autoencoder": lambda a: ModelArch("conv-autoencoder", channels=(16, 8, 8), kernel_size=3),
    "classifier": lambda a: ModelArch("classifier", widths=(784, 256, 256, 128, 10)),
    "conv-classifier": lambda a: ModelArch("classifier", channels=(8, 16), kernel_size=5),
    "lstm-lm": lambda a: ModelArch("lstm-lm", vocab_size=a.vocab, history=a.history, hidden=a.hidden),
}


# -- dataset directories ---------------------------------------------------------


def save_image_dir(ds: img.ImageDataset, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    img.write_idx(ds.images, out / "images.idx")
    img.write_idx(ds.labels.astype(np.uint8), out / "labels.idx")
    img.write_idx(ds.flags.astype(np.uint8), out / "flags.idx")
    (out / "ids.txt").write_text("".join(f"{i}\n" for i in ds.ids))


def load_image_dir(path) -> img.ImageDataset:
    path = Path(path)
    if path.is_file():
        return img.load_idx(path)
    images = img.read_idx(path / "images.idx", img.IMAGES_MAGIC)
    labels = img.read_idx(path / "labels.idx", img.LABELS_MAGIC).astype(np.int64)
    flags_file = path / "flags.idx"
    flags = img.read_idx(flags_file).astype(np.int8) if flags_file.exists() else np.zeros(len(images), np.int8)
    ids_file = path / "ids.txt"
    ids = np.array(ids_file.read_text().split()) if ids_file.exists() else np.array([f"{path.name}:{i}" for i in range(len(images))])
    return img.ImageDataset(images, labels, flags, ids, {"source": str(path)})


def _cmd_dataset_build(a) -> int:
    what = a.what
    if what in ("digits", "glyphs"):
        render = img.render_digits if what == "digits" else img.render_glyphs
        ds = render(a.n, a.seed, a.split)
        save_image_dir(ds, a.out)
    elif what == "mix":
        normal, outliers = load_image_dir(a.normal), load_image_dir(a.outliers)
        total = a.total or len(normal)
        save_image_dir(img.build_outlier_mix(normal, outliers, a.ratio, total, a.seed), a.out)
    elif what == "nd-test":
        save_image_dir(img.build_nd_test(load_image_dir(a.normal), load_image_dir(a.outliers)), a.out)
    elif what == "poison":
        save_image_dir(img.poison(load_image_dir(a.source), a.ratio, img.PoisonSpec(), a.seed, stratify=a.stratify), a.out)
    elif what == "sessions":
        corpus = sq.gen_sessions(sq.hdfs_like_model(), a.normal_count, a.abnormal_count, a.seed, n_patterns=a.patterns)
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        sq.write_sequences(corpus, out / "sessions.txt", out / "labels.txt")
    print(f"wrote {what} to {a.out}")
    return 0


# -- train / score / detect / eval ---------------------------------------------------


def _arch_from_args(a) -> ModelArch:
    if a.arch_json:
        return ModelArch.from_dict(json.loads(a.arch_json))
    return ARCH_PRESETS[a.arch](a)


def _training_arrays(arch: ModelArch, a):
    if arch.kind == "lstm-lm":
        corpus = sq.load_sequences(a.data, vocab_size=arch.vocab_size)
        x, y, _ = sq.window_sequences(corpus, arch.history, pad=a.pad, start_token=arch.vocab_size)
        return x, y
    ds = load_image_dir(a.data)
    return ds.pixels, (ds.labels if arch.loss_kind == "cross-entropy" else None)


def _cmd_train(a) -> int:
    arch = _arch_from_args(a)
    x, y = _training_arrays(arch, a)
    model = build_model(arch, a.seed)
    dpc = DpConfig(clip=a.clip, sigma=a.sigma, lr=a.lr, batch_size=a.batch_size, epochs=a.epochs, seed=a.seed, sampling=a.sampling, delta=a.delta)
    try:
        rep = train(model, x, y, dpc)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    digest = checkpoint.save(model, a.out)
    if a.log:
        Path(a.log).write_text(rep.jsonl())
    print(f"final loss {rep.epoch_losses[-1] if rep.epoch_losses else float('nan'):.6f}  epsilon {rep.epsilon:.4g}  sha256 {digest}")
    return 0


def _write_scores(path, ids, scores, truth, direction) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "score", "truth", "direction"])
        for i, s, t in zip(ids, scores, truth):
            w.writerow([i, repr(float(s)), int(t), direction])


def _read_scores(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no scores")
    directions = {r["direction"] for r in rows}
    if len(directions) != 1:
        raise ValueError(f"{path}: mixed score directions")
    return make_scores([float(r["score"]) for r in rows], [r["truth"] == "1" for r in rows], [r["id"] for r in rows], directions.pop())


def _cmd_score(a) -> int:
    model = checkpoint.load(a.model)
    if model.arch.kind == "lstm-lm":
        from dpanomaly.experiments import sequence_scores

        corpus = sq.load_sequences(a.data, a.labels, vocab_size=model.arch.vocab_size)
        _, lowest_p = sequence_scores(model, corpus, a.pad)
        ids = [str(i) for i in range(len(corpus))]
        _write_scores(a.out, ids, lowest_p, corpus.labels == sq.ABNORMAL, LOWER)
    else:
        ds = load_image_dir(a.data)
        y = ds.labels if model.arch.loss_kind == "cross-entropy" else None
        _write_scores(a.out, ds.ids, model.losses(ds.pixels, y), ds.positives, HIGHER)
    print(f"wrote scores to {a.out}")
    return 0


def _print_stats(c, as_json: bool) -> None:
    st = confusion_stats(c)
    rec = {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn, **st}
    if as_json:
        print(json.dumps({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in rec.items()}))
    else:
        print("  ".join(f"{k}={fmt(v)}" for k, v in rec.items()))


def _cmd_detect(a) -> int:
    if a.scores:
        if a.tau is None:
            print("error: --scores needs --tau", file=sys.stderr)
            return 2
        _print_stats(threshold_detect(_read_scores(a.scores), a.tau), a.json)
        return 0
    if not (a.model and a.sequences) or (a.k is None) == (a.tp is None):
        print("error: give --scores with --tau, or --model and --sequences with exactly one of --k / --tp", file=sys.stderr)
        return 2
    from dpanomaly.experiments import sequence_scores

    model = checkpoint.load(a.model)
    corpus = sq.load_sequences(a.sequences, a.labels, vocab_size=model.arch.vocab_size)
    worst_rank, lowest_p = sequence_scores(model, corpus, a.pad)
    flagged = worst_rank >= a.k if a.k is not None else lowest_p < a.tp
    if a.verdicts:
        Path(a.verdicts).write_text("".join(f"{int(f)}\n" for f in flagged))
    _print_stats(confusion(flagged, corpus.labels == sq.ABNORMAL), a.json)
    return 0


def _cmd_eval(a) -> int:
    s = _read_scores(a.scores)
    pr, roc = aupr(s), auroc(s)
    if a.curves:
        out = Path(a.curves)
        out.mkdir(parents=True, exist_ok=True)
        (out / "pr.csv").write_text(curve_csv("recall", "precision", pr.x, pr.y))
        (out / "roc.csv").write_text(curve_csv("fpr", "tpr", roc.x, roc.y))
    if a.json:
        print(json.dumps({"aupr": pr.area, "auroc": roc.area, "n": len(s), "positives": int(s.truth.sum())}))
    else:
        print(f"AUPR {pr.area:.6f}  AUROC {roc.area:.6f}  ({int(s.truth.sum())} positives of {len(s)})")
    return 0


# -- privacy calculators -----------------------------------------------------------


def _cmd_accountant(a) -> int:
    state = AccountantState(q=a.q, sigma=a.sigma, delta=a.delta)
    state.step(a.steps)
    eps = state.epsilon()
    if a.json:
        print(json.dumps({"q": a.q, "sigma": a.sigma, "steps": a.steps, "delta": a.delta, "epsilon": eps}))
    else:
        print(f"epsilon = {eps:.6g}  (q={a.q:g}, sigma={a.sigma:g}, steps={a.steps}, delta={a.delta:g})")
    return 0


def _cmd_bound(a) -> int:
    value = outlier_gap_bound(a.T, a.xi, a.n, a.epsilon, a.delta, a.c, a.gamma)
    if a.json:
        print(json.dumps({"bound": value}))
    else:
        print(f"{value:.6g}")
    return 0


# -- experiments ------------------------------------------------------------------


def _cmd_experiment_run(a) -> int:
    from dpanomaly.experiments import run_experiment

    cfg = cfgmod.load_config(a.config)
    if a.seeds:
        cfg = cfgmod.ExperimentConfig.from_dict({**cfg.to_dict(), "seeds": a.seeds})
    out = a.out or cfg.output_dir
    result = run_experiment(cfg, out)
    print(f"{cfg.kind} experiment {cfg.config_id}: {len(result.runs)} runs, results in {out}")
    if result.failures:
        for r in result.failures:
            print(f"  FAILED {r.run_id}: {r.status} {r.error or ''}", file=sys.stderr)
        return 1
    return 0


def _cmd_report(a) -> int:
    path = Path(a.run_dir)
    rows = read_summary(path / "summary.csv" if path.is_dir() else path)
    if not a.all:
        rows = [r for r in rows if r["seed"] == "mean"]
    if a.task:
        rows = [r for r in rows if r["task"] == a.task]
    if a.json:
        print(json.dumps(rows, indent=1))
        return 0
    columns = [c for c in rows[0] if c != "config_id" and any(r[c] not in ("", "nan") for r in rows)] if rows else []
    print(render_table(rows, columns))
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpanomaly", description="DP-SGD training and loss-based anomaly detection")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset construction").add_subparsers(dest="action", required=True)
    b = ds.add_parser("build", help="render or assemble a dataset")
    b.add_argument("what", choices=["digits", "glyphs", "mix", "nd-test", "poison", "sessions"])
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--n", type=int, default=6000, help="image count for digits/glyphs")
    b.add_argument("--split", choices=["train", "test"], default="train")
    b.add_argument("--normal", help="normal image dir (mix, nd-test)")
    b.add_argument("--outliers", help="outlier image dir (mix, nd-test)")
    b.add_argument("--source", help="image dir to poison")
    b.add_argument("--ratio", type=float, default=0.05, help="outlier or poisoning ratio")
    b.add_argument("--total", type=int, help="mix size (default: size of the normal set)")
    b.add_argument("--stratify", action="store_true", help="poison: spread victims across classes by class size")
    b.add_argument("--normal-count", type=int, default=2000)
    b.add_argument("--abnormal-count", type=int, default=200)
    b.add_argument("--patterns", type=int, default=8, help="recurring fault patterns (0: every anomaly random)")
    b.set_defaults(func=_cmd_dataset_build)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True, help="image dir or session text file")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--arch", choices=sorted(ARCH_PRESETS), default="dense-autoencoder")
    t.add_argument("--arch-json", help="full architecture as JSON (overrides --arch)")
    t.add_argument("--vocab", type=int, default=29)
    t.add_argument("--history", type=int, default=10)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--pad", choices=["none", "short", "full"], default="full")
    t.add_argument("--clip", type=float)
    t.add_argument("--sigma", type=float)
    t.add_argument("--lr", type=float, default=0.15)
    t.add_argument("--batch-size", type=int, default=200)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--sampling", choices=["shuffle", "poisson"], default="shuffle")
    t.add_argument("--delta", type=float, default=1e-5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log", help="per-epoch JSONL output")
    t.set_defaults(func=_cmd_train)

    s = sub.add_parser("score", help="per-sample scores from a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="image dir or session text file")
    s.add_argument("--labels", help="session label file")
    s.add_argument("--pad", choices=["none", "short", "full"], default="full")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_score)

    d = sub.add_parser("detect", help="threshold, top-k or probability detection")
    d.add_argument("--scores", help="score CSV from `score`")
    d.add_argument("--tau", type=float)
    d.add_argument("--model")
    d.add_argument("--sequences")
    d.add_argument("--labels")
    d.add_argument("--pad", choices=["none", "short", "full"], default="full")
    d.add_argument("--k", type=int)
    d.add_argument("--tp", type=float)
    d.add_argument("--verdicts", help="write one 0/1 session verdict per line")
    d.add_argument("--json", action="store_true")
    d.set_defaults(func=_cmd_detect)

    e = sub.add_parser("eval", help="AUPR and AUROC of a score file")
    e.add_argument("--scores", required=True)
    e.add_argument("--curves", help="directory for pr.csv and roc.csv")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=_cmd_eval)

    ac = sub.add_parser("accountant", help="epsilon of the subsampled Gaussian mechanism")
    ac.add_argument("--q", type=float, required=True, help="sampling rate B/N")
    ac.add_argument("--sigma", type=float, required=True)
    ac.add_argument("--steps", type=int, required=True)
    ac.add_argument("--delta", type=float, default=1e-5)
    ac.add_argument("--json", action="store_true")
    ac.set_defaults(func=_cmd_accountant)

    bd = sub.add_parser("bound", help="lower bound on the outlier loss gap")
    bd.add_argument("--T", type=float, required=True, help="outlier loss margin")
    bd.add_argument("--xi", type=float, default=0.0)
    bd.add_argument("--n", type=int, default=1)
    bd.add_argument("--epsilon", type=float, default=0.0)
    bd.add_argument("--delta", type=float, default=0.0)
    bd.add_argument("--c", type=int, default=0, help="group size")
    bd.add_argument("--gamma", type=float, default=0.05)
    bd.add_argument("--json", action="store_true")
    bd.set_defaults(func=_cmd_bound)

    ex = sub.add_parser("experiment", help="config-driven experiment grids").add_subparsers(dest="action", required=True)
    r = ex.add_parser("run", help="run a config or re-run a manifest")
    r.add_argument("config", help="YAML/JSON config or manifest.json")
    r.add_argument("--out", help="output directory (default: the config's output_dir)")
    r.add_argument("--seeds", type=int, nargs="+")
    r.set_defaults(func=_cmd_experiment_run)

    rp = sub.add_parser("report", help="print an experiment summary")
    rp.add_argument("run_dir", help="experiment output directory or summary.csv")
    rp.add_argument("--task")
    rp.add_argument("--all", action="store_true", help="include per-seed rows")
    rp.add_argument("--json", action="store_true")
    rp.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except (ContractError, cfgmod.ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
