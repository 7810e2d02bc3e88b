"""The four experiment families, driven by an :class:`ExperimentConfig`.

Each runner trains one model per (grid cell, grid parameter, seed), scores it
and returns summary rows. Non-finite training is recorded as a ``diverged``
row and the grid continues.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from dpanomaly.config import Cell, ExperimentConfig
from dpanomaly.data import images as img
from dpanomaly.data import sequences as sq
from dpanomaly.dp import DpConfig, TrainingDiverged, train
from dpanomaly.metrics import (
    HIGHER,
    LOWER,
    aupr,
    auroc,
    confusion,
    confusion_stats,
    make_scores,
    session_max,
    token_ranks,
)
from dpanomaly.nn import checkpoint
from dpanomaly.nn.layers import softmax
from dpanomaly.nn.model import Model, build_model
from dpanomaly.report import Row, RunWriter, aggregate_rows, curve_csv, sha256_array, to_csv

log = logging.getLogger(__name__)

METRICS = ("FP", "FN", "precision", "recall", "F", "AUPR", "AUROC", "epsilon")
EXTRA_COLUMNS = {
    "outlier": (),
    "backdoor": ("benign_accuracy", "success_rate"),
    "sequence": (),
    "uaerm": ("gap", "mean_test_loss"),
}


@dataclass
class RunResult:
    run_id: str
    cell: str
    param: str
    seed: int
    status: str
    epsilon: float
    epoch_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0
    checkpoint: str | None = None
    error: str | None = None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[Row]
    runs: list[RunResult]
    extra: dict = field(default_factory=dict)

    @property
    def failures(self) -> list[RunResult]:
        return [r for r in self.runs if r.status != "ok"]

    def summary_csv(self) -> str:
        kind = self.config.kind
        numeric = METRICS + EXTRA_COLUMNS[kind]
        return to_csv(self.rows + aggregate_rows(self.rows, numeric), self.config.config_id, EXTRA_COLUMNS[kind])


# -- shared helpers ------------------------------------------------------------------


def _dp_config(cfg: ExperimentConfig, cell: Cell, seed: int) -> DpConfig:
    t = cfg.train
    return DpConfig(
        clip=cell.clip,
        sigma=cell.sigma,
        lr=float(t.get("lr", 0.15)),
        batch_size=int(t.get("batch_size", 200)),
        epochs=int(t.get("epochs", 20)),
        seed=seed,
        sampling=t.get("sampling", "shuffle"),
        delta=float(t.get("delta", 1e-5)),
    )


def _fit(cfg: ExperimentConfig, cell: Cell, seed: int, x, y, run_id: str, writer: RunWriter | None, batch_size: int | None = None):
    """Build and train one model; returns (model or None, RunResult)."""
    model = build_model(cfg.arch(), seed)
    dpc = _dp_config(cfg, cell, seed)
    if batch_size is not None:
        dpc = replace(dpc, batch_size=batch_size)

    def on_epoch(epoch, loss, eps, secs):
        if writer is not None:
            writer.append_jsonl("epochs.jsonl", {"run": run_id, "epoch": epoch, "mean_loss": loss, "epsilon": eps, "seconds": secs})

    t0 = time.perf_counter()
    try:
        rep = train(model, x, y, dpc, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        log.warning("%s diverged: %s", run_id, exc)
        return None, RunResult(run_id, cell.label, "", seed, "diverged", math.nan, exc.epoch_losses, time.perf_counter() - t0, error=str(exc))
    res = RunResult(run_id, cell.label, "", seed, "ok", rep.epsilon, rep.epoch_losses, rep.wall_time)
    if writer is not None and cfg.checkpoints:
        path = writer.dir / "checkpoints" / f"{_slug(run_id)}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        res.checkpoint = checkpoint.save(model, path)
    return model, res


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s)


def _detection_values(scores, truth, direction: str = HIGHER, flagged=None) -> dict:
    """FP/FN/precision/recall/F at a decision rule plus AUPR/AUROC.

    Without an explicit ``flagged`` mask the rule flags the ``m`` most
    anomalous samples, ``m`` being the number of true positives.
    """
    truth = np.asarray(truth, dtype=bool)
    s = make_scores(scores, truth, direction=direction)
    if flagged is None:
        m = int(truth.sum())
        order = np.argsort(-s.oriented, kind="stable")
        flagged = np.zeros(len(truth), dtype=bool)
        flagged[order[:m]] = True
    c = confusion(flagged, truth)
    st = confusion_stats(c)
    out = {"FP": c.fp, "FN": c.fn, "precision": st["precision"], "recall": st["recall"], "F": st["f_measure"]}
    if 0 < truth.sum() < len(truth):
        out["AUPR"] = aupr(s).area
        out["AUROC"] = auroc(s).area
    else:
        out["AUPR"] = out["AUROC"] = math.nan
    return out


def _write_curves(writer: RunWriter | None, run_id: str, task: str, scores, truth, direction=HIGHER) -> None:
    truth = np.asarray(truth, dtype=bool)
    if writer is None or not 0 < truth.sum() < len(truth):
        return
    s = make_scores(scores, truth, direction=direction)
    pr, roc = aupr(s), auroc(s)
    stem = f"curves/{_slug(run_id)}_{task}"
    writer.write_text(f"{stem}_pr.csv", curve_csv("recall", "precision", pr.x, pr.y))
    writer.write_text(f"{stem}_roc.csv", curve_csv("fpr", "tpr", roc.x, roc.y))


def _failed_row(cell: Cell, param: str, seed: int, task: str, status: str) -> Row:
    return Row(cell.label, param, seed, task, status, {k: math.nan for k in METRICS})


# -- data sources -----------------------------------------------------------------


def image_source(spec, n: int, seed: int, split: str) -> img.ImageDataset:
    """Synthetic source name, ``{"source": name, "style": {...}}`` or IDX paths.

    IDX specs use ``images``/``labels`` for training and
    ``test_images``/``test_labels`` for the test split.
    """
    if isinstance(spec, str):
        spec = {"source": spec}
    spec = dict(spec)
    source = spec.get("source")
    style = {k: tuple(v) if isinstance(v, list) else v for k, v in spec.get("style", {}).items()}
    if source == "synthetic-digits":
        return img.render_digits(n, seed, split, img.DigitStyle(**style))
    if source == "synthetic-glyphs":
        return img.render_glyphs(n, seed, split, img.GlyphStyle(**style))
    prefix = "" if split == "train" else "test_"
    if f"{prefix}images" not in spec:
        raise ValueError(f"image source needs a synthetic name or '{prefix}images' path, got {spec}")
    ds = img.load_idx(spec[f"{prefix}images"], spec.get(f"{prefix}labels"), source=spec.get("name"))
    return img.stratified_subsample(ds, min(n, len(ds)), seed)


# -- outlier / novelty detection ------------------------------------------------------


def run_outlier_experiment(cfg: ExperimentConfig, writer: RunWriter | None = None) -> ExperimentResult:
    d = cfg.data
    rows: list[Row] = []
    runs: list[RunResult] = []
    hashes: dict[str, str] = {}
    for ratio in d["ratios"]:
        param = f"r_o={ratio:g}"
        for seed in cfg.seeds:
            n_out = img.ratio_count(d["n_train"], ratio)
            normal = image_source(d["normal"], d["n_train"], seed, "train")
            outliers = image_source(d["outliers"], max(n_out, 1), seed, "train")
            mix = img.build_outlier_mix(normal, outliers, ratio, d["n_train"], seed)
            test = img.build_nd_test(
                image_source(d["normal"], d["n_test"], seed, "test"),
                image_source(d["outliers"], d["n_test_outliers"], seed, "test"),
                train_ids=mix.ids,
            )
            hashes[f"{param}/seed={seed}/train"] = sha256_array(mix.images)
            hashes[f"{param}/seed={seed}/test"] = sha256_array(test.images)
            x, xt = mix.pixels, test.pixels
            for cell in cfg.cells():
                run_id = f"{cell.label}/{param}/seed={seed}"
                log.info("training %s", run_id)
                model, res = _fit(cfg, cell, seed, x, None, run_id, writer)
                res.param = param
                runs.append(res)
                if model is None:
                    rows += [_failed_row(cell, param, seed, t, res.status) for t in ("OD", "ND")]
                    continue
                for task, data, truth in (("OD", x, mix.positives), ("ND", xt, test.positives)):
                    losses = model.losses(data)
                    vals = _detection_values(losses, truth)
                    vals["epsilon"] = res.epsilon
                    rows.append(Row(cell.label, param, seed, task, "ok", vals))
                    _write_curves(writer, run_id, task, losses, truth)
                    for tau in cfg.detect.get("taus", []):
                        v = _detection_values(losses, truth, flagged=losses >= tau)
                        v["epsilon"] = res.epsilon
                        rows.append(Row(cell.label, param, seed, f"{task}@tau={tau:g}", "ok", v))
    return ExperimentResult(cfg, rows, runs, {"datasets": hashes})


# -- backdoor poisoning ---------------------------------------------------------------


def run_backdoor_experiment(cfg: ExperimentConfig, writer: RunWriter | None = None) -> ExperimentResult:
    d = cfg.data
    spec = img.PoisonSpec(**{k: tuple(map(tuple, v)) if k == "coords" else v for k, v in d.get("trigger", {}).items()})
    rows: list[Row] = []
    runs: list[RunResult] = []
    hashes: dict[str, str] = {}
    for ratio in d["ratios"]:
        param = f"r_p={ratio:g}"
        for seed in cfg.seeds:
            clean = image_source(d["normal"], d["n_train"], seed, "train")
            poisoned = img.poison(clean, ratio, spec, seed, stratify=bool(d.get("stratify", False)))
            test = image_source(d["normal"], d["n_test"], seed, "test")
            triggered = img.poison(test, 1.0, spec, seed)
            hashes[f"{param}/seed={seed}/train"] = sha256_array(poisoned.images)
            x, y = poisoned.pixels, poisoned.labels
            for cell in cfg.cells():
                run_id = f"{cell.label}/{param}/seed={seed}"
                log.info("training %s", run_id)
                model, res = _fit(cfg, cell, seed, x, y, run_id, writer)
                res.param = param
                runs.append(res)
                if model is None:
                    rows.append(_failed_row(cell, param, seed, "detection", res.status))
                    continue
                benign = float(np.mean(model.output(test.pixels).argmax(axis=1) == test.labels))
                success = float(np.mean(model.output(triggered.pixels).argmax(axis=1) == triggered.labels))
                losses = model.losses(x, y)
                vals = _detection_values(losses, poisoned.positives)
                vals.update(epsilon=res.epsilon, benign_accuracy=100 * benign, success_rate=100 * success)
                rows.append(Row(cell.label, param, seed, "detection", "ok", vals))
                _write_curves(writer, run_id, "detection", losses, poisoned.positives)
    return ExperimentResult(cfg, rows, runs, {"datasets": hashes})


# -- log-sequence anomaly detection -------------------------------------------------------


def sequence_split(cfg: ExperimentConfig, seed: int) -> tuple[sq.SequenceCorpus, sq.SequenceCorpus]:
    """Training corpus (normal sessions plus a few abnormal ones) and test corpus."""
    d = cfg.data
    if d.get("source", "synthetic-hdfs") != "synthetic-hdfs":
        vocab = cfg.model.get("vocab_size")
        train_c = sq.load_sequences(d["train"], d.get("train_labels"), vocab)
        test_c = sq.load_sequences(d["test"], d.get("test_labels"), vocab)
        return train_c, test_c
    corpus = sq.gen_sessions(sq.hdfs_like_model(), d["n_normal"], d["n_abnormal"], seed, n_patterns=d.get("n_patterns"))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 61]))
    normal = rng.permutation(np.flatnonzero(corpus.labels == sq.NORMAL))
    abnormal = rng.permutation(np.flatnonzero(corpus.labels == sq.ABNORMAL))
    tn, ta = d["train_normal"], d["train_abnormal"]
    train_idx = np.sort(np.r_[normal[:tn], abnormal[:ta]])
    test_idx = np.sort(np.r_[normal[tn:], abnormal[ta:]])
    return corpus.subset(train_idx), corpus.subset(test_idx)


def sequence_scores(model: Model, test: sq.SequenceCorpus, pad: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-session worst top-k rank and lowest next-key probability."""
    h = model.arch.history
    xt, yt, owner = sq.window_sequences(test, h, pad=pad, start_token=model.arch.vocab_size)
    probs = np.concatenate([softmax(model.output(xt[i : i + 2000])) for i in range(0, len(xt), 2000)])
    ranks = token_ranks(probs, yt)
    p_actual = probs[np.arange(len(yt)), yt]
    n = len(test)
    worst_rank = session_max(ranks, owner, n, fill=-1.0)
    lowest_p = -session_max(-p_actual, owner, n, fill=-np.inf)
    return worst_rank, lowest_p


def run_sequence_experiment(cfg: ExperimentConfig, writer: RunWriter | None = None) -> ExperimentResult:
    arch = cfg.arch()
    pad = cfg.data.get("window_pad", "full")
    rows: list[Row] = []
    runs: list[RunResult] = []
    hashes: dict[str, str] = {}
    for seed in cfg.seeds:
        train_c, test_c = sequence_split(cfg, seed)
        hashes[f"seed={seed}/train"] = sha256_array(np.array([" ".join(map(str, s)) for s in train_c.sessions]))
        hashes[f"seed={seed}/test"] = sha256_array(np.array([" ".join(map(str, s)) for s in test_c.sessions]))
        x, y, _ = sq.window_sequences(train_c, arch.history, pad=pad, start_token=arch.vocab_size)
        truth = test_c.labels == sq.ABNORMAL
        param = f"h={arch.history}"
        for cell in cfg.cells():
            run_id = f"{cell.label}/seed={seed}"
            log.info("training %s", run_id)
            model, res = _fit(cfg, cell, seed, x, y, run_id, writer)
            res.param = param
            runs.append(res)
            tasks = [f"top-k={k}" for k in cfg.detect.get("ks", [])] + [f"prob<{t:g}" for t in cfg.detect.get("tps", [])] + ["score"]
            if model is None:
                rows += [_failed_row(cell, param, seed, t, res.status) for t in tasks]
                continue
            worst_rank, lowest_p = sequence_scores(model, test_c, pad)
            for k in cfg.detect.get("ks", []):
                vals = _detection_values(worst_rank, truth, flagged=worst_rank >= k)
                vals.update(AUPR=math.nan, AUROC=math.nan, epsilon=res.epsilon)
                rows.append(Row(cell.label, param, seed, f"top-k={k}", "ok", vals))
            for tp in cfg.detect.get("tps", []):
                vals = _detection_values(lowest_p, truth, LOWER, flagged=lowest_p < tp)
                vals.update(AUPR=math.nan, AUROC=math.nan, epsilon=res.epsilon)
                rows.append(Row(cell.label, param, seed, f"prob<{tp:g}", "ok", vals))
            vals = _detection_values(lowest_p, truth, LOWER)
            vals["epsilon"] = res.epsilon
            rows.append(Row(cell.label, param, seed, "score", "ok", vals))
            _write_curves(writer, run_id, "score", lowest_p, truth, LOWER)
    return ExperimentResult(cfg, rows, runs, {"datasets": hashes})


# -- uniform convergence (UAERM) validation ------------------------------------------------


def _spearman_slices(gaps: dict[tuple[float, int], float], axis: int) -> float:
    """Mean Spearman coefficient of the gap along one axis, taken within each slice of the other."""
    sigmas = sorted({k[0] for k in gaps})
    sizes = sorted({k[1] for k in gaps})
    outer, inner = (sigmas, sizes) if axis == 1 else (sizes, sigmas)
    coefs = []
    for o in outer:
        xs, ys = [], []
        for i in inner:
            key = (o, i) if axis == 1 else (i, o)
            if key in gaps and not math.isnan(gaps[key]):
                xs.append(i)
                ys.append(gaps[key])
        if len(xs) >= 2 and len(set(ys)) > 1:
            coefs.append(float(stats.spearmanr(xs, ys)[0]))
    return float(np.mean(coefs)) if coefs else math.nan


def _nanmean(xs: list[float]) -> float:
    finite = [x for x in xs if not math.isnan(x)]
    return float(np.mean(finite)) if finite else math.nan


def run_uaerm_experiment(cfg: ExperimentConfig, writer: RunWriter | None = None) -> ExperimentResult:
    from dpanomaly.privacy import uaerm_gap

    d, u = cfg.data, cfg.uaerm
    sizes = sorted(int(n) for n in u["sizes"])
    pool_size = int(u.get("oracle_size", max(sizes)))
    rows: list[Row] = []
    runs: list[RunResult] = []
    trend: dict[str, dict] = {}
    for seed in cfg.seeds:
        pool = image_source(d["normal"], pool_size, seed, "train")
        test = img.build_nd_test(
            image_source(d["normal"], d["n_test"], seed, "test"),
            image_source(d["outliers"], d["n_test_outliers"], seed, "test"),
        )
        xt = test.pixels
        oracle_id = f"oracle/seed={seed}"
        oracle, res = _fit(cfg, Cell(None, None), seed, pool.pixels, None, oracle_id, writer)
        res.param = f"n={pool_size}"
        runs.append(res)
        if oracle is None:
            raise RuntimeError("oracle training diverged; the gap is undefined")
        oracle_losses = oracle.losses(xt)
        gaps: dict[tuple[float, int], float] = {}
        for cell in cfg.cells():
            if cell.clip is None:
                continue
            for n in sizes:
                param = f"n={n}"
                # a fixed sampling rate keeps steps and epsilon equal across n, so sigma alone sets the privacy level
                batch = max(1, round(float(u["sampling_rate"]) * n)) if u.get("sampling_rate") else None
                per_model, eps, status = [], math.nan, "ok"
                for j in range(u["subsets"]):
                    pick = np.random.default_rng(np.random.SeedSequence([seed, 71, n, j])).choice(pool_size, size=n, replace=False)
                    x = pool.pixels[np.sort(pick)]
                    for r in range(u["repeats"]):
                        model_seed = seed * 1000 + j * u["repeats"] + r
                        run_id = f"{cell.label}/{param}/seed={seed}/subset={j}/repeat={r}"
                        model, res = _fit(cfg, cell, model_seed, x, None, run_id, writer, batch_size=batch)
                        res.param = param
                        runs.append(res)
                        if model is None:
                            status = "diverged"
                            continue
                        eps = res.epsilon
                        per_model.append(model.losses(xt))
                if status != "ok" or not per_model:
                    rows.append(Row(cell.label, param, seed, "uaerm", status, {"gap": math.nan}))
                    gaps[(cell.sigma, n)] = math.nan
                    continue
                gap = uaerm_gap(np.mean(per_model, axis=0), oracle_losses)
                gaps[(cell.sigma, n)] = gap
                rows.append(
                    Row(cell.label, param, seed, "uaerm", "ok", {"gap": gap, "mean_test_loss": float(np.mean(per_model)), "epsilon": eps})
                )
        trend[f"seed={seed}"] = {"rho_size": _spearman_slices(gaps, axis=1), "rho_sigma": _spearman_slices(gaps, axis=0)}
    rho_n = [v["rho_size"] for v in trend.values()]
    rho_s = [v["rho_sigma"] for v in trend.values()]
    trend["mean"] = {"rho_size": _nanmean(rho_n), "rho_sigma": _nanmean(rho_s)}
    return ExperimentResult(cfg, rows, runs, {"trend": trend})


RUNNERS = {
    "outlier": run_outlier_experiment,
    "backdoor": run_backdoor_experiment,
    "sequence": run_sequence_experiment,
    "uaerm": run_uaerm_experiment,
}


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Run ``cfg`` and persist summary.csv, curves, JSONL logs, checkpoints and manifest.json."""
    out = Path(out_dir or cfg.output_dir)
    writer = RunWriter(out)
    result = RUNNERS[cfg.kind](cfg, writer)
    writer.write_text("summary.csv", result.summary_csv())
    if cfg.kind == "uaerm":
        lines = ["seed,rho_size,rho_sigma"] + [f"{k},{v['rho_size']:.6f},{v['rho_sigma']:.6f}" for k, v in result.extra["trend"].items()]
        writer.write_text("trend.csv", "\n".join(lines) + "\n")
    for r in result.runs:
        writer.append_jsonl(
            "runs.jsonl",
            {
                "run": r.run_id,
                "cell": r.cell,
                "param": r.param,
                "seed": r.seed,
                "status": r.status,
                "epsilon": r.epsilon,
                "epoch_losses": r.epoch_losses,
                "seconds": r.seconds,
                "checkpoint": r.checkpoint,
                "error": r.error,
            },
        )
    extra = dict(result.extra)
    extra["checkpoints"] = {r.run_id: r.checkpoint for r in result.runs if r.checkpoint}
    extra["failures"] = [{"run": r.run_id, "status": r.status, "error": r.error} for r in result.failures]
    writer.manifest(cfg.to_dict(), cfg.config_id, cfg.seeds, extra)
    return result
