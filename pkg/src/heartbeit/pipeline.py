"""Pipeline stages over on-disk artifacts, driven by a :class:`PipelineConfig`.

Artifact layout under ``paths.output_dir``::

    split.json
    codebook.hbcb
    pretrain/checkpoint.hbck, pretrain/pretrain-epochNNNN.hbck
    finetune/<init>-s<seed>/frac-<f>/{best.hbck, scores.csv, report.json, run.csv, run.json}
    evaluation/{reports.csv, table.txt}
    saliency/<init>-s<seed>-frac-<f>/{*.png, saliency.json}
    wasserstein.json
    runs/<stage>.{csv,json}

Images are cached under ``paths.cache_dir`` as ``images-<hash>.hbrt`` with a
``.sources.csv`` sidecar holding each record's waveform digest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import PipelineConfig
from .errors import DependencyError, IngestError, LabelError, SaliencyError
from .evaluation.distance import cohort_distance
from .evaluation.metrics import EvalReport, ScoredSet, evaluate, read_scored_csv, write_reports_csv, write_scored_csv
from .evaluation.saliency import region_contrast, saliency, save_overlay_png
from .ingest import (
    SplitPlan,
    DatasetManifest,
    group_shuffle_split,
    load_labels,
    parse_ecg_xml,
    read_annotations,
    read_manifest,
    st_windows,
    ST_LEADS,
    SYNTH_RATE_HZ,
    synthesize_corpus,
)
from .model.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .raster import RasterImage, iter_cache, read_cache_hash, render, resize_to, sample_span_mask, write_cache
from .signal import preprocess
from .tokenizer import load_codebook, sample_patches, save_codebook, train_codebook
from .training import RunRecord, finetune_sweep, pretrain

log = logging.getLogger(__name__)


def _check_hash(path: Path, found: str, expected: str, force: bool) -> None:
    if found != expected:
        msg = f"{path} was produced under config hash {found or '<none>'}, current config expects {expected}"
        if not force:
            raise DependencyError(msg + " (rerun the producing stage or pass --force)")
        log.warning("%s; continuing because of --force", msg)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing prerequisite {path} (run `{producer}` first)")
    return path


def _stage_record(cfg: PipelineConfig, stage: str, seed: int, stage_hash: str, summary: dict, t0: float) -> RunRecord:
    record = RunRecord(seed, stage_hash)
    record.log(0, stage, seconds=time.perf_counter() - t0)
    record.summary = {"config_hash": cfg.config_hash(), **summary}
    runs = cfg.path("output_dir") / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    record.write(runs / stage)
    return record


def fraction_tag(f: float) -> str:
    return f"frac-{f:g}"


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def run_synthesize(cfg: PipelineConfig) -> DatasetManifest:
    t0 = time.perf_counter()
    s = cfg["synthesize"]
    out = cfg.path("data_dir")
    manifest = synthesize_corpus(int(s["n_records"]), float(s["positive_rate"]), int(s["seed"]), out, float(s["noise_mv"]))
    _stage_record(cfg, "synthesize", int(s["seed"]), cfg.config_hash(),
                  {"n_records": len(manifest), "n_positive": sum(manifest.labels().values()), "data_dir": str(out)}, t0)
    return manifest


def load_manifest(cfg: PipelineConfig) -> DatasetManifest:
    """Manifest with labels from the labels file merged in (the labels file wins)."""
    path = _require(cfg.path("manifest"), "synthesize")
    manifest = read_manifest(path)
    labels_path = cfg.path("labels")
    if labels_path.exists():
        labels = load_labels(labels_path)
        for e in manifest.entries:
            if e.label is not None and e.record_id in labels and labels[e.record_id] != e.label:
                raise LabelError(f"{labels_path}: label for {e.record_id} disagrees with {path}")
        manifest = DatasetManifest(
            [type(e)(e.record_id, e.patient_id, e.waveform_path, labels.get(e.record_id, e.label)) for e in manifest.entries],
            manifest.source_tag,
            manifest.root,
        )
    return manifest


def run_validate(cfg: PipelineConfig) -> dict:
    """Check that every manifest record parses, preprocesses and carries a label."""
    t0 = time.perf_counter()
    manifest = load_manifest(cfg)
    spec = cfg.filter_spec()
    unlabeled = [e.record_id for e in manifest.entries if e.label is None]
    if unlabeled:
        raise LabelError(f"{len(unlabeled)} records lack a label, e.g. {unlabeled[:3]}")
    for e in manifest.entries:
        path = manifest.resolve(e)
        rec = parse_ecg_xml(path)
        if rec.record_id != e.record_id:
            raise IngestError(f"{path}: record_id {rec.record_id!r} does not match manifest id {e.record_id!r}")
        try:
            preprocess(rec, spec, cfg["raster"]["target_samples"])
        except Exception as exc:
            raise IngestError(f"{path}: {exc}") from exc
    plan = make_split(cfg, manifest)
    summary = {"n_records": len(manifest), "n_patients": len({e.patient_id for e in manifest.entries}),
               "n_positive": sum(manifest.labels().values()), "n_test": len(plan.test_ids)}
    _stage_record(cfg, "validate", cfg["split"]["seed"], cfg.config_hash(), summary, t0)
    return summary


def make_split(cfg: PipelineConfig, manifest: Optional[DatasetManifest] = None) -> SplitPlan:
    manifest = manifest or load_manifest(cfg)
    sp = cfg["split"]
    fractions = sorted(set(sp["fractions"]) | set(cfg["finetune"]["fractions"]) | {1.0})
    return group_shuffle_split(manifest, int(sp["seed"]), float(sp["test_fraction"]), fractions)


def cache_path(cfg: PipelineConfig) -> Path:
    return cfg.path("cache_dir") / f"images-{cfg.stage_hash('images')}.hbrt"


def _sources_path(cache: Path) -> Path:
    return cache.with_suffix(".sources.csv")


def _read_sources(path: Path) -> Dict[str, str]:
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        return {row["record_id"]: row["sha256"] for row in csv.DictReader(fh)}


def render_record(path, cfg: PipelineConfig) -> RasterImage:
    rec = preprocess(parse_ecg_xml(path), cfg.filter_spec(), cfg["raster"]["target_samples"])
    return resize_to(render(rec, cfg["raster"]["canvas"]), cfg["raster"]["side"])


@dataclass
class PrepareResult:
    cache: Path
    rendered: int
    reused: int


def run_prepare(cfg: PipelineConfig) -> PrepareResult:
    """Render every manifest record into the image cache, reusing unchanged entries."""
    t0 = time.perf_counter()
    manifest = load_manifest(cfg)
    cache = cache_path(cfg)
    cache.parent.mkdir(parents=True, exist_ok=True)
    digests = {}
    for e in manifest.entries:
        path = manifest.resolve(e)
        if not path.is_file():
            raise IngestError(f"{path}: waveform file not found")
        digests[e.record_id] = hashlib.sha256(path.read_bytes()).hexdigest()

    cached: Dict[str, RasterImage] = {}
    if cache.exists() and read_cache_hash(cache) == cfg.stage_hash("images"):
        known = _read_sources(_sources_path(cache))
        cached = {img.source_record_id: img for img in iter_cache(cache)
                  if known.get(img.source_record_id) == digests.get(img.source_record_id)}

    images, rendered = [], 0
    for e in manifest.entries:
        img = cached.get(e.record_id)
        if img is None:
            img = render_record(manifest.resolve(e), cfg)
            rendered += 1
        images.append(img)
    if rendered or len(cached) != len(images):
        write_cache(cache, images, cfg.stage_hash("images"))
        with open(_sources_path(cache), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["record_id", "sha256"])
            w.writerows((e.record_id, digests[e.record_id]) for e in manifest.entries)
    result = PrepareResult(cache, rendered, len(images) - rendered)
    _stage_record(cfg, "prepare", 0, cfg.stage_hash("images"),
                  {"cache": cache.name, "n_images": len(images), "rendered": rendered, "reused": result.reused}, t0)
    return result


def load_images(cfg: PipelineConfig, force: bool = False) -> Dict[str, np.ndarray]:
    """record_id -> (side, side) float32 pixels from the image cache."""
    cache = cache_path(cfg)
    if not cache.exists():
        candidates = sorted(cfg.path("cache_dir").glob("images-*.hbrt"))
        if not (force and candidates):
            raise DependencyError(f"missing prerequisite {cache} (run `prepare` first)")
        cache = candidates[-1]
    _check_hash(cache, read_cache_hash(cache), cfg.stage_hash("images"), force)
    return {img.source_record_id: img.pixels for img in iter_cache(cache)}


def _stack(images: Dict[str, np.ndarray], ids: Sequence[str]) -> np.ndarray:
    missing = [i for i in ids if i not in images]
    if missing:
        raise DependencyError(f"image cache lacks {len(missing)} records, e.g. {missing[:3]} (rerun `prepare`)")
    return np.stack([images[i] for i in ids])


def training_pool(plan: SplitPlan) -> List[str]:
    return list(plan.train_ids_by_fraction[max(plan.fractions)])


# --------------------------------------------------------------------------
# tokenizer and pre-training
# --------------------------------------------------------------------------


def codebook_path(cfg: PipelineConfig) -> Path:
    return cfg.path("output_dir") / "codebook.hbcb"


def run_tokenizer(cfg: PipelineConfig, force: bool = False):
    t0 = time.perf_counter()
    out = cfg.path("output_dir")
    out.mkdir(parents=True, exist_ok=True)
    plan = make_split(cfg)
    (out / "split.json").write_text(json.dumps(plan.to_dict(), sort_keys=True) + "\n")
    images = load_images(cfg, force)
    pool = training_pool(plan)
    tk = cfg["tokenizer"]
    mc = cfg.model_config()
    patches = sample_patches(_stack(images, pool), mc.patch_size, int(tk["max_patches"]), int(tk["seed"]), mc.channels)
    cb = train_codebook(patches, int(tk["vocab_size"]), int(tk["seed"]), int(tk["max_iters"]),
                        trained_on=f"train-pool:{len(pool)}")
    save_codebook(cb, codebook_path(cfg), cfg.stage_hash("tokenizer"))
    _stage_record(cfg, "tokenizer", int(tk["seed"]), cfg.stage_hash("tokenizer"),
                  {"vocab_size": cb.vocab_size, "n_patches": int(patches.shape[0]), "n_images": len(pool)}, t0)
    return cb


def pretrain_path(cfg: PipelineConfig) -> Path:
    return cfg.path("output_dir") / "pretrain" / "checkpoint.hbck"


def run_pretrain(cfg: PipelineConfig, force: bool = False):
    out = cfg.path("output_dir") / "pretrain"
    out.mkdir(parents=True, exist_ok=True)
    cb_path = _require(codebook_path(cfg), "tokenizer")
    cb, found = load_codebook(cb_path)
    _check_hash(cb_path, found, cfg.stage_hash("tokenizer"), force)
    images = load_images(cfg, force)
    pool = training_pool(make_split(cfg))
    p = cfg["pretrain"]
    h = cfg.stage_hash("pretrain")
    res = pretrain(
        _stack(images, pool),
        cb,
        cfg.model_config(),
        epochs=int(p["epochs"]),
        seed=int(p["seed"]),
        mask_ratio=float(p["mask_ratio"]),
        batch_size=int(p["batch_size"]),
        lr=float(p["lr"]),
        weight_decay=float(p["weight_decay"]),
        config_hash=h,
        checkpoint_dir=out,
        checkpoint_every=int(p["checkpoint_every"]),
    )
    meta = {"stage": "pretrain", "epoch": int(p["epochs"]), "optimizer": res.optimizer.hyper()}
    save_checkpoint(Checkpoint(cfg.model_config(), res.params, res.optimizer.arrays(), meta, h), pretrain_path(cfg))
    res.record.summary["config_hash"] = cfg.config_hash()
    res.record.write(out / "run")
    return res


# --------------------------------------------------------------------------
# fine-tuning and evaluation
# --------------------------------------------------------------------------


def variant_name(init: str, seed: int) -> str:
    return f"{init}-s{seed}"


def finetune_dir(cfg: PipelineConfig, init: str, seed: int, fraction: float) -> Path:
    return cfg.path("output_dir") / "finetune" / variant_name(init, seed) / fraction_tag(fraction)


def run_finetune(cfg: PipelineConfig, init: str = "pretrained", seed: Optional[int] = None,
                 fractions: Optional[Sequence[float]] = None, force: bool = False):
    if init not in ("pretrained", "random"):
        raise DependencyError(f"unknown init {init!r}")
    ft = cfg["finetune"]
    seed = int(ft["seed"] if seed is None else seed)
    fractions = [float(f) for f in (fractions or ft["fractions"])]
    pretrained = None
    if init == "pretrained":
        ck_path = _require(pretrain_path(cfg), "pretrain")
        ck = load_checkpoint(ck_path)
        _check_hash(ck_path, ck.config_hash, cfg.stage_hash("pretrain"), force)
        pretrained = ck.params
    images = load_images(cfg, force)
    manifest = load_manifest(cfg)
    plan = make_split(cfg, manifest)
    h = cfg.finetune_hash(init)
    sweep = finetune_sweep(
        images,
        manifest.labels(),
        plan,
        cfg.model_config(),
        seed,
        pretrained,
        fractions=fractions,
        epochs=int(ft["epochs"]),
        n_bootstrap=int(cfg["eval"]["n_bootstrap"]),
        batch_size=int(ft["batch_size"]),
        base_lr=float(ft["base_lr"]),
        max_lr=float(ft["max_lr"]),
        head_only=bool(ft["head_only"]),
        config_hash=h,
    )
    for f, entry in sweep.items():
        d = finetune_dir(cfg, init, seed, f)
        d.mkdir(parents=True, exist_ok=True)
        res = entry.result
        meta = {"stage": "finetune", "init": init, "seed": seed, "fraction": f, "best_epoch": res.best_epoch}
        save_checkpoint(Checkpoint(cfg.model_config(), res.best_params, {}, meta, h), d / "best.hbck")
        write_scored_csv(ScoredSet(res.best_scores, [manifest.labels()[i] for i in entry.test_ids], entry.test_ids),
                         d / "scores.csv")
        doc = {"config_hash": h, "variant": variant_name(init, seed), "init": init, "seed": seed,
               "report": entry.report.to_dict()}
        (d / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        res.record.summary["config_hash"] = cfg.config_hash()
        res.record.write(d / "run")
    return sweep


def format_table(reports: Dict[str, Dict[float, EvalReport]]) -> str:
    """Rows are model variants, columns are training fractions; cells hold AUROC and AUPRC with CIs."""
    fractions = sorted({f for row in reports.values() for f in row})
    header = ["variant"] + [fraction_tag(f) for f in fractions]
    rows = [header]
    for variant in sorted(reports):
        row = [variant]
        for f in fractions:
            r = reports[variant].get(f)
            row.append("-" if r is None else
                       f"AUROC {r.auroc:.3f} [{r.auroc_ci[0]:.3f}, {r.auroc_ci[1]:.3f}] "
                       f"AUPRC {r.auprc:.3f} [{r.auprc_ci[0]:.3f}, {r.auprc_ci[1]:.3f}]")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def collect_reports(cfg: PipelineConfig, force: bool = False) -> Dict[str, Dict[float, EvalReport]]:
    root = cfg.path("output_dir") / "finetune"
    found: Dict[str, Dict[float, EvalReport]] = {}
    for path in sorted(root.glob("*/frac-*/report.json")):
        doc = json.loads(path.read_text())
        _check_hash(path, doc.get("config_hash", ""), cfg.finetune_hash(doc["init"]), force)
        rep = EvalReport.from_dict(doc["report"])
        found.setdefault(doc["variant"], {})[rep.fraction] = rep
    if not found:
        raise DependencyError(f"no fine-tuning reports under {root} (run `finetune` first)")
    return found


def run_evaluate(cfg: PipelineConfig, scores: Optional[Path] = None, force: bool = False) -> str:
    """Render the variant x fraction table, or a single report for a standalone scored CSV."""
    t0 = time.perf_counter()
    ev = cfg["eval"]
    if scores is not None:
        report = evaluate(read_scored_csv(_require(Path(scores), "a scored CSV")), int(ev["n_bootstrap"]), int(ev["seed"]))
        table = format_table({Path(scores).stem: {report.fraction: report}})
        return table
    reports = collect_reports(cfg, force)
    out = cfg.path("output_dir") / "evaluation"
    out.mkdir(parents=True, exist_ok=True)
    flat = [reports[v][f] for v in sorted(reports) for f in sorted(reports[v])]
    write_reports_csv(flat, out / "reports.csv")
    table = format_table(reports)
    (out / "table.txt").write_text(table)
    _stage_record(cfg, "evaluate", int(ev["seed"]), cfg.config_hash(),
                  {"variants": sorted(reports), "n_reports": len(flat)}, t0)
    return table


# --------------------------------------------------------------------------
# saliency and distances
# --------------------------------------------------------------------------


def st_region(r_peaks: np.ndarray, rate_hz: int, n_samples: int, side: int, canvas: int) -> np.ndarray:
    """Pixels covering the injected ST windows of the ST leads (after resize)."""
    region = np.zeros((side, side), dtype=bool)
    for start, stop in st_windows(r_peaks, rate_hz):
        for lead in ST_LEADS:
            region |= sample_span_mask(lead, start, stop, n_samples, side, canvas)
    return region


def run_saliency(cfg: PipelineConfig, init: str = "pretrained", seed: Optional[int] = None,
                 fraction: float = 1.0, force: bool = False) -> dict:
    """Grad-CAM over correctly classified positives, with ST-window localization when annotated."""
    t0 = time.perf_counter()
    seed = int(cfg["finetune"]["seed"] if seed is None else seed)
    d = finetune_dir(cfg, init, seed, fraction)
    ck_path = _require(d / "best.hbck", "finetune")
    ck = load_checkpoint(ck_path)
    _check_hash(ck_path, ck.config_hash, cfg.finetune_hash(init), force)
    scored = read_scored_csv(_require(d / "scores.csv", "finetune"))
    images = load_images(cfg, force)
    ann_path = cfg.path("data_dir") / "annotations.csv"
    annotations = read_annotations(ann_path) if ann_path.exists() else {}
    ev, rs = cfg["eval"], cfg["raster"]
    hits = [rid for rid, s, y in zip(scored.record_ids, scored.scores, scored.labels) if y == 1 and s >= 0.5]

    out = cfg.path("output_dir") / "saliency" / f"{variant_name(init, seed)}-{fraction_tag(fraction)}"
    out.mkdir(parents=True, exist_ok=True)
    rows, localized = [], 0
    for k, rid in enumerate(hits):
        smap = saliency(ck.params, ck.config, images[rid], target_class=1, method=ev["saliency_method"])
        if k < int(ev["saliency_count"]):
            save_overlay_png(images[rid], smap, out / f"{rid}.png")
        if rid in annotations:
            region = st_region(annotations[rid], SYNTH_RATE_HZ, rs["target_samples"], rs["side"], rs["canvas"])
            inside, outside = region_contrast(smap.overlay, region)
            localized += inside > outside
            rows.append({"record_id": rid, "inside": inside, "outside": outside})
    summary = {"variant": variant_name(init, seed), "fraction": fraction, "n_correct_positive": len(hits),
               "n_annotated": len(rows), "n_localized": localized,
               "localized_fraction": localized / len(rows) if rows else None, "method": ev["saliency_method"]}
    (out / "saliency.json").write_text(json.dumps({"summary": summary, "records": rows}, sort_keys=True, indent=2) + "\n")
    if not hits:
        raise SaliencyError(f"no correctly classified positives in {d / 'scores.csv'}")
    _stage_record(cfg, "saliency", seed, ck.config_hash, summary, t0)
    return summary


def run_wasserstein(cfg: PipelineConfig, force: bool = False) -> dict:
    """Mean pairwise W1 within ECG images, ECG vs uniform noise, and within noise."""
    t0 = time.perf_counter()
    images = load_images(cfg, force)
    ev = cfg["eval"]
    n, seed = int(ev["sample_n"]), int(ev["seed"])
    ecg = [images[k] for k in sorted(images)]
    side = cfg["raster"]["side"]
    noise = list(np.random.default_rng(seed).random((min(n, len(ecg)), side, side), dtype=np.float32))
    result = {
        "ecg_ecg": cohort_distance(ecg, sample_n=n, seed=seed),
        "ecg_noise": cohort_distance(ecg, noise, sample_n=n, seed=seed),
        "noise_noise": cohort_distance(noise, sample_n=n, seed=seed),
        "sample_n": n,
    }
    out = cfg.path("output_dir")
    out.mkdir(parents=True, exist_ok=True)
    (out / "wasserstein.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    _stage_record(cfg, "wasserstein", seed, cfg.stage_hash("images"), result, t0)
    return result
