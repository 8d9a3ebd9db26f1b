"""Pipeline configuration, artifact bookkeeping and the five stages.

Every stage writes into ``<out_dir>/<stage>/`` together with a ``stage.json``
recording a cumulative hash: the hash of the stage's own config section
chained onto its predecessor's hash. Editing any upstream section therefore
invalidates every downstream artifact.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import detector as det
from . import metrics, pseudolabel, synthdata
from . import ssl as selfsup
from .detector import DetectorConfig
from .ssl import SSLConfig
from .synthdata import DatasetConfig
from .boxes import iou
from .model import load_model, save_model
from .numerics import log_softmax, softmax

log = logging.getLogger(__name__)

STAGES = ("synth", "ssl", "extract", "detector", "eval")


class ConfigInvalid(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


class StaleArtifact(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


class ExtractConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta_range: tuple[float, float] = (0.7, 0.9)
    min_confidence: float = 0.0
    multi: bool = False

    @model_validator(mode="after")
    def _range(self):
        lo, hi = self.beta_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"beta_range {self.beta_range} must satisfy 0 <= lo <= hi <= 1")
        return self


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    thresholds: tuple[float, ...] = (0.3, 0.5)
    kshot_m: tuple[int, ...] = (1, 10)
    ciou_thresh: float = Field(0.3, ge=0, le=1)

    @model_validator(mode="after")
    def _valid(self):
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds):
            raise ValueError("IoU thresholds must lie in [0, 1]")
        if any(m < 1 for m in self.kshot_m):
            raise ValueError("k-shot m must be at least 1")
        return self


class PipelineConfig(BaseModel):
    """All stage settings. ``seed`` drives every stage, including data generation."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    out_dir: str = "runs/default"
    data: DatasetConfig = DatasetConfig()
    ssl: SSLConfig = SSLConfig()
    extract: ExtractConfig = ExtractConfig()
    detector: DetectorConfig = DetectorConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _consistent(self):
        if "seed" in self.data.model_fields_set and self.data.seed != self.seed:
            raise ValueError("data.seed differs from seed; set only the top-level seed")
        if "K" in self.detector.model_fields_set and self.detector.K != self.ssl.K:
            raise ValueError("detector.K must equal ssl.K (the detector learns the clusters)")
        self.data = self.data.model_copy(update={"seed": self.seed})
        self.detector = self.detector.model_copy(update={"K": self.ssl.K})
        return self

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None) -> "PipelineConfig":
        raw = self.to_dict()
        if seed is not None:
            raw["seed"] = seed
            raw["data"].pop("seed", None)
        if out_dir is not None:
            raw["out_dir"] = str(out_dir)
        return parse_config(raw)

    def to_dict(self) -> dict:
        return json.loads(self.model_dump_json())


def parse_config(raw: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigInvalid(str(e)) from e


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read TOML (or JSON for ``.json`` files); ``None`` gives the defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file {path} does not exist")
    text = path.read_text()
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomli.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as e:
        raise ConfigInvalid(f"cannot parse {path}: {e}") from e
    return parse_config(raw)


def emit_config(config: PipelineConfig) -> str:
    """TOML text; ``data.seed`` is omitted because it always follows ``seed``."""
    raw = config.to_dict()
    raw["data"].pop("seed", None)
    return tomli_w.dumps(raw)


def _digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def stage_hashes(config: PipelineConfig) -> dict[str, str]:
    """Cumulative per-stage config hashes."""
    d = config.to_dict()
    sections = {
        "synth": {"seed": d["seed"], "data": d["data"]},
        "ssl": d["ssl"],
        "extract": d["extract"],
        "detector": d["detector"],
        "eval": d["eval"],
    }
    out, prev = {}, ""
    for stage in STAGES:
        prev = _digest({"prev": prev, "section": sections[stage]})
        out[stage] = prev
    return out


# ---------------------------------------------------------------------------
# artifacts


def _write_json(path: Path, obj, indent: int | None = 1) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=indent, sort_keys=True) + "\n")
    return path


def _write_jsonl(path: Path, records) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return path


class Run:
    """Locations and stage bookkeeping for one output directory."""

    def __init__(self, config: PipelineConfig, workers: int = 1):
        self.config = config
        self.workers = max(1, int(workers))
        self.root = Path(config.out_dir)
        self.hashes = stage_hashes(config)

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def record(self, stage: str) -> dict | None:
        p = self.dir(stage) / "stage.json"
        return json.loads(p.read_text()) if p.exists() else None

    def is_current(self, stage: str) -> bool:
        rec = self.record(stage)
        return rec is not None and rec.get("hash") == self.hashes[stage]

    def require(self, stage: str) -> dict:
        """The predecessor's record, provided it exists and matches the config."""
        rec = self.record(stage)
        if rec is None:
            raise MissingArtifact(f"stage '{stage}' has not been run in {self.root}")
        if rec.get("hash") != self.hashes[stage]:
            raise StaleArtifact(f"stage '{stage}' in {self.root} was produced by a different config; re-run it")
        for p in rec.get("outputs", {}).values():
            if not (self.root / p).exists():
                raise MissingArtifact(f"artifact {self.root / p} is missing")
        return rec

    def complete(self, stage: str, outputs: dict[str, Path], summary: dict | None = None):
        rec = {
            "stage": stage,
            "hash": self.hashes[stage],
            "outputs": {k: str(Path(v).relative_to(self.root)) for k, v in outputs.items()},
            "summary": summary or {},
        }
        _write_json(self.dir(stage) / "stage.json", rec)
        self.write_manifest()
        return rec

    def write_manifest(self, timings: dict | None = None) -> Path:
        path = self.root / "manifest.json"
        old = json.loads(path.read_text()) if path.exists() else {}
        stages = {}
        for s in STAGES:
            rec = self.record(s)
            stages[s] = {
                "done": rec is not None and rec.get("hash") == self.hashes[s],
                "hash": self.hashes[s],
                "outputs": rec.get("outputs", {}) if rec else {},
            }
        eval_rec = self.record("eval")
        manifest = {
            "config_hash": self.hashes["eval"],
            "stages": stages,
            "metrics": eval_rec.get("summary", {}) if eval_rec and stages["eval"]["done"] else {},
            "timings_s": {**old.get("timings_s", {}), **(timings or {})},
        }
        return _write_json(path, manifest)


# ---------------------------------------------------------------------------
# stage helpers


def _load_dataset(run: Run) -> synthdata.Dataset:
    rec = run.require("synth")
    return synthdata.read_dataset(run.root / rec["outputs"]["dataset"])


def _load_ssl(run: Run):
    rec = run.require("ssl")
    model, _ = load_model(run.root / rec["outputs"]["checkpoint"])
    labels = [json.loads(l) for l in (run.root / rec["outputs"]["labels"]).read_text().splitlines() if l]
    return model, labels


def _posteriors(model, scenes) -> np.ndarray:
    images = np.stack([s.image for s in scenes])
    audio = np.stack([s.audio for s in scenes])
    lv, la = selfsup.predict_logits(model, images, audio)
    return softmax(log_softmax(lv, axis=1) + log_softmax(la, axis=1), axis=1)


def _infer_parallel(images: np.ndarray, model: det.DetectorModel, workers: int, chunk: int = 128):
    parts = [images[i:i + chunk] for i in range(0, len(images), chunk)]
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda p: det.infer_batch(p, model, chunk=chunk), parts))
    else:
        results = [det.infer_batch(p, model, chunk=chunk) for p in parts]
    return [d for r in results for d in r]


# ---------------------------------------------------------------------------
# stages


def stage_synth(run: Run) -> dict:
    ds = synthdata.generate_dataset(run.config.data, workers=run.workers)
    root = synthdata.write_dataset(ds, run.dir("synth") / "dataset")
    return run.complete("synth", {"dataset": root}, ds.checks)


def stage_ssl(run: Run) -> dict:
    ds = _load_dataset(run)
    out = run.dir("ssl")
    history = []
    result = selfsup.train(ds.train, run.config.ssl, seed=run.config.seed, on_epoch=history.append)
    ckpt = save_model(result.model, out / "model.ckpt", {"ssl": run.config.ssl.model_dump()})
    post = _posteriors(result.model, ds.train)
    labels = result.labels
    strength = post[np.arange(len(labels)), labels]
    lab_path = _write_jsonl(out / "labels.jsonl", (
        {"scene_id": s.scene_id, "label": int(l), "strength": float(st)}
        for s, l, st in zip(ds.train, labels, strength)))
    log_path = _write_jsonl(out / "train_log.jsonl", history)
    summary = {
        "final_loss_nc": history[-1]["loss_nc"] if history else None,
        "marginal_error": result.assignment.marginal_error,
        "label_entropy": selfsup.label_entropy(labels, run.config.ssl.K),
    }
    return run.complete("ssl", {"checkpoint": ckpt, "labels": lab_path, "log": log_path}, summary)


def stage_extract(run: Run) -> dict:
    ds = _load_dataset(run)
    model, _ = _load_ssl(run)
    cfg = run.config.extract
    anns = pseudolabel.extract_annotations(ds.train, model, cfg.beta_range, cfg.min_confidence,
                                           cfg.multi, seed=run.config.seed)
    path = pseudolabel.write_annotations(anns, run.dir("extract") / "annotations.jsonl")
    return run.complete("extract", {"annotations": path}, {"n_annotations": len(anns)})


def stage_detector(run: Run) -> dict:
    ds = _load_dataset(run)
    rec = run.require("extract")
    anns = pseudolabel.read_annotations(run.root / rec["outputs"]["annotations"])
    history = []
    model = det.train_detector(anns, ds.train, run.config.detector, seed=run.config.seed,
                               on_epoch=history.append)
    ckpt = det.save_detector(model, run.dir("detector") / "detector.ckpt")
    log_path = _write_jsonl(run.dir("detector") / "train_log.jsonl", history)
    return run.complete("detector", {"checkpoint": ckpt, "log": log_path},
                        {"final_loss": history[-1]["loss"] if history else None})


def evaluate(config: PipelineConfig, ds: synthdata.Dataset, ssl_model, ssl_labels: list[dict],
             detector: det.DetectorModel, workers: int = 1) -> tuple[dict, dict]:
    """Metric report plus PR curves ``{(class, thresh): (recall, precision)}``."""
    K = config.ssl.K
    K_true = config.data.K_true
    ev = config.eval
    H, W = config.data.H, config.data.W
    by_id = {s.scene_id: s for s in ds.train}

    # cluster to class alignment, from stage-1 clusters on train scenes
    clusters = np.array([r["label"] for r in ssl_labels])
    strengths = np.array([r["strength"] for r in ssl_labels])
    truth = np.array([by_id[r["scene_id"]].sounding.class_id for r in ssl_labels])
    table = metrics.contingency_table(clusters, truth, K, K_true)
    hung = metrics.hungarian_match(table)
    argm = metrics.argmax_match(table)

    test = ds.test
    dets = _infer_parallel(np.stack([s.image for s in test]), detector, workers)
    dets = {s.scene_id: d for s, d in zip(test, dets)}
    gts = {s.scene_id: [(o.class_id, o.box) for o in s.objects] for s in test}

    rep = metrics.mean_ap(metrics.relabel_detections(dets, hung), gts, ev.thresholds)
    argmax_map = metrics.mean_ap(metrics.relabel_detections(dets, argm), gts, (0.5,))["map50"]
    kshot = {}
    for m in ev.kshot_m:
        km = metrics.kshot_match(clusters, strengths, truth, m)
        kshot[str(m)] = {
            "accuracy": metrics.matched_accuracy(clusters, truth, km),
            "map50": metrics.mean_ap(metrics.relabel_detections(dets, km), gts, (0.5,))["map50"],
            "matching": {str(k): v for k, v in sorted(km.items())},
        }

    # localization maps against every object in the scene
    cious = [metrics.binarized_ciou(dets[s.scene_id], detector.config.score_thresh,
                                    [o.box for o in s.objects], (H, W)) for s in test]

    # self-boxes on the test split, for comparison with the detector
    self_anns = pseudolabel.extract_annotations(test, ssl_model, config.extract.beta_range, 0.0,
                                                config.extract.multi, seed=config.seed)
    self_dets = {s.scene_id: [] for s in test}
    for a in self_anns:
        self_dets[a.scene_id].append(det.Detection(a.box, a.label, a.confidence))
    single = [s for s in test if len(s.objects) == 1]
    sb_iou = [max((iou(d.box, s.objects[0].box) for d in self_dets[s.scene_id]), default=0.0)
              for s in single]
    det_agn = metrics.mean_ap(*metrics.class_agnostic(dets, gts), (0.5,))["map50"]
    sb_agn = metrics.mean_ap(*metrics.class_agnostic(self_dets, gts), (0.5,))["map50"]

    silent = {s.scene_id: [o.box for o in s.objects if not o.sounding] for s in test}
    sounding = {s.scene_id: [o.box for o in s.objects if o.sounding] for s in test}

    report = {
        "per_class_ap": {str(c): v for c, v in rep["per_class_ap"].items()},
        "map": rep["map"],
        "map30": rep["map30"],
        "map50": rep["map50"],
        "map_coco": rep["map_coco"],
        "ciou30_rate": float(np.mean([c >= ev.ciou_thresh for c in cious])) if cious else 0.0,
        "auc": metrics.localization_auc(cious),
        "ciou_protocol": "class-agnostic union of detections with score >= score_thresh vs union "
                         "of all object boxes; pixel-centre rasterization",
        "purity": metrics.purity(table),
        "cluster_accuracy": metrics.matched_accuracy(clusters, truth, hung),
        "matching": {str(k): v for k, v in sorted(hung.items())},
        "argmax_matching": {str(k): v for k, v in sorted(argm.items())},
        "argmax_map50": argmax_map,
        "kshot": kshot,
        "contingency": table.tolist(),
        "detector_agnostic_ap50": det_agn,
        "selfbox_agnostic_ap50": sb_agn,
        "selfbox_iou30_rate_single": float(np.mean([v >= 0.3 for v in sb_iou])) if sb_iou else 0.0,
        "recall50_silent": metrics.recall_at(dets, silent, 0.5),
        "recall50_sounding": metrics.recall_at(dets, sounding, 0.5),
        "n_test_scenes": len(test),
        "n_detections": sum(len(d) for d in dets.values()),
    }
    curves = {}
    det_c, gt_c = metrics.split_by_class(metrics.relabel_detections(dets, hung), gts)
    for c in sorted(gt_c):
        for t in ev.thresholds:
            tp, n_gt = metrics.match_detections(det_c.get(c, []), gt_c[c], t)
            curves[(c, t)] = metrics.pr_curve(tp, n_gt)
    return report, {"detections": dets, "curves": curves}


def format_table(report: dict) -> str:
    """Plain-text summary laid out as method | mAP30 | mAP50 | mAP, then per class."""
    lines = [f"{'method':<24}{'mAP30':>8}{'mAP50':>8}{'mAP':>8}",
             f"{'detector (hungarian)':<24}{report['map30']:>8.3f}{report['map50']:>8.3f}"
             f"{report['map_coco']:>8.3f}", "",
             f"{'class':<8}" + "".join(f"{'AP' + t[2:]:>8}" for t in ("0.30", "0.50"))]
    for c, aps in report["per_class_ap"].items():
        lines.append(f"{c:<8}" + "".join(f"{aps.get(t, float('nan')):>8.3f}" for t in ("0.30", "0.50")))
    lines += ["",
              f"{'cluster accuracy':<18}{report['cluster_accuracy']:.3f}   purity {report['purity']:.3f}",
              f"{'argmax mAP50':<18}{report['argmax_map50']:.3f}",
              *(f"{m + '-shot mAP50':<18}{v['map50']:.3f}   accuracy {v['accuracy']:.3f}"
                for m, v in report["kshot"].items()),
              f"{'cIoU>=0.3 rate':<18}{report['ciou30_rate']:.3f}   AUC {report['auc']:.3f}",
              f"{'agnostic AP50':<18}detector {report['detector_agnostic_ap50']:.3f}   "
              f"self-boxes {report['selfbox_agnostic_ap50']:.3f}",
              f"{'recall@0.5':<18}silent {report['recall50_silent']:.3f}   "
              f"sounding {report['recall50_sounding']:.3f}"]
    return "\n".join(lines) + "\n"


def stage_eval(run: Run) -> dict:
    ds = _load_dataset(run)
    model, labels = _load_ssl(run)
    rec = run.require("detector")
    detector, _ = det.load_detector(run.root / rec["outputs"]["checkpoint"])
    report, extra = evaluate(run.config, ds, model, labels, detector, run.workers)
    out = run.dir("eval")
    rep_path = _write_json(out / "report.json", report)
    txt_path = out / "report.txt"
    txt_path.write_text(format_table(report))
    det_path = _write_jsonl(out / "detections.jsonl", (
        {"scene_id": sid, "box": d.box.as_list(), "label": d.label, "score": d.score}
        for sid, ds_ in extra["detections"].items() for d in ds_))
    pr_dir = out / "pr"
    pr_dir.mkdir(parents=True, exist_ok=True)
    for (c, t), (rec_, prec) in extra["curves"].items():
        rows = "".join(f"{r:.6f}\t{p:.6f}\n" for r, p in zip(rec_, prec))
        (pr_dir / f"class{c}_iou{t:.2f}.tsv").write_text("recall\tprecision\n" + rows)
    summary = {k: report[k] for k in ("map30", "map50", "map_coco", "ciou30_rate", "auc", "purity",
                                      "cluster_accuracy")}
    return run.complete("eval", {"report": rep_path, "table": txt_path, "detections": det_path,
                                 "pr_curves": pr_dir}, summary)


STAGE_FUNCS = {
    "synth": stage_synth,
    "ssl": stage_ssl,
    "extract": stage_extract,
    "detector": stage_detector,
    "eval": stage_eval,
}


def run_stage(run: Run, stage: str, force: bool = False) -> bool:
    """Run one stage unless it is already current; True if it ran."""
    idx = STAGES.index(stage)
    for prev in STAGES[:idx]:
        run.require(prev)
    if not force and run.is_current(stage):
        log.info("stage %s is up to date; skipping", stage)
        return False
    t0 = time.perf_counter()
    log.info("running stage %s", stage)
    STAGE_FUNCS[stage](run)
    run.write_manifest({stage: round(time.perf_counter() - t0, 3)})
    return True


def run_all(run: Run, force: bool = False) -> dict[str, bool]:
    """Run every stage in order; a stage re-runs if it or anything before it changed."""
    ran = {}
    upstream_changed = False
    for stage in STAGES:
        need = force or upstream_changed or not run.is_current(stage)
        if need:
            t0 = time.perf_counter()
            log.info("running stage %s", stage)
            STAGE_FUNCS[stage](run)
            run.write_manifest({stage: round(time.perf_counter() - t0, 3)})
        else:
            log.info("stage %s is up to date; skipping", stage)
        ran[stage] = need
        upstream_changed |= need
    return ran
