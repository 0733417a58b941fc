"""Experiment orchestration: model zoo, defense pipeline, sweeps and reports.

Every artifact lands under the experiment's output directory. Trained models
are cached in a zoo whose manifest records a cache key per entry; an entry
is reused only when its key and checkpoint hash both match.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .amplify import amplify
from .attacks import BackdoorSpec, TargetImage, train_backdoor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, state_hash
from .data import make_target, make_trigger, read_dataset, synth_dataset
from .denoiser import clone_model, make_denoiser
from .detection import DetectionConfig, detect, sim_score, threshold_from_stats
from .diffusion import TrainConfig, train_clean
from .inversion import InversionConfig, InversionDiverged, invert_trigger
from .metrics import asr, calibrate_tau, detection_metrics, l2d
from .schedule import desk_schedule, make_linear_schedule
from .shift import ShiftProfile, graybox_profile, lambda_whitebox, profiled_timesteps

log = logging.getLogger(__name__)

CODE_VERSION = "1"
NO_RESULTS = "NO_RESULTS"


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ExperimentConfig:
    experiment_id: str = "desk"
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic-shapes", "n": 2048, "size": 16, "seed": 0})
    T: int = 200
    schedule: dict | None = None
    architecture: dict = field(default_factory=lambda: {"name": "TinyUNet", "base": 16, "emb_dim": 32})
    clean_train: dict = field(default_factory=lambda: {"steps": 3000, "lr": 2e-3, "batch_size": 32})
    backdoor_train: dict = field(default_factory=lambda: {"steps": 4000, "lr": 2e-3, "batch_size": 32})
    clean_models: list = field(default_factory=lambda: [{"id": f"clean{i}", "seed": i} for i in range(5)])
    backdoors: list = field(default_factory=list)
    profile: dict = field(default_factory=lambda: {"kind": "whitebox", "method": "BadDiffusion"})
    inversion: dict = field(default_factory=dict)
    detection: dict = field(default_factory=dict)
    kl_calibration: str = "leave-one-out"
    evaluation: dict = field(default_factory=lambda: {"n_asr": 64, "n_tau_refs": 256, "seed": 7})
    amplify: dict = field(default_factory=lambda: {"budgets": [400, 4000], "n_mds": 30, "trigger": "box",
                                                   "target": "diamond", "base": "clean0", "refine_dc": None})
    poison_rates: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    poison_sweep: dict = field(default_factory=lambda: {"trigger": "box", "target": "diamond", "base": "clean0"})
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs/desk"
    zoo_dir: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        ids = [m["id"] for m in self.clean_models] + [b["id"] for b in self.backdoors]
        if len(ids) != len(set(ids)):
            raise ValueError("model ids must be unique")
        known = {m["id"] for m in self.clean_models}
        for b in self.backdoors:
            if b.get("base", "clean0") not in known:
                raise ValueError(f"backdoor {b['id']} refers to unknown base model")
        if self.kl_calibration not in ("leave-one-out", "all"):
            raise ValueError("kl_calibration must be 'leave-one-out' or 'all'")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    # derived objects -----------------------------------------------------
    def make_schedule(self):
        if self.schedule:
            return make_linear_schedule(self.T, **self.schedule)
        return desk_schedule(self.T)

    def load_dataset(self) -> np.ndarray:
        kind = self.dataset.get("kind", "synthetic-shapes")
        if kind == "synthetic-shapes":
            images, _ = synth_dataset(int(self.dataset["n"]), int(self.dataset.get("size", 16)),
                                      int(self.dataset.get("seed", 0)))
            return images
        if kind == "directory":
            return read_dataset(self.dataset["path"])[0]
        raise ValueError(f"unknown dataset kind {kind!r}")

    @property
    def image_size(self) -> int:
        return int(self.dataset.get("size", 16))

    def arch(self) -> dict:
        return {**self.architecture, "image_size": self.image_size}

    def inversion_config(self) -> InversionConfig:
        return InversionConfig(**self.inversion)

    def detection_config(self) -> DetectionConfig:
        return DetectionConfig(**self.detection)

    def zoo_path(self) -> Path:
        return Path(self.zoo_dir) if self.zoo_dir else Path(self.output_dir) / "zoo"


def build_spec(entry: dict, size: int = 16) -> BackdoorSpec:
    """BackdoorSpec from a config entry; ``target`` may be a name or a list of names."""
    tgt = entry.get("target", "diamond")
    if isinstance(tgt, (list, tuple)):
        target = TargetImage(torch.stack([make_target(n, size).image for n in tgt]), "+".join(tgt))
    else:
        target = make_target(tgt, size)
    return BackdoorSpec(entry.get("method", "BadDiffusion"), make_trigger(entry.get("trigger", "box"), size),
                        target, float(entry.get("poison_rate", 0.3)), gamma=entry.get("gamma"))


@dataclass
class ZooEntry:
    path: str
    role: str
    cache_key: str
    spec_hash: str | None = None
    metrics: dict = field(default_factory=dict)


class ZooManifest:
    """``{model id -> ZooEntry}`` persisted as ``manifest.json`` in the zoo directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        self.entries: dict[str, ZooEntry] = {}
        if self.path.exists():
            doc = json.loads(self.path.read_text())
            self.entries = {k: ZooEntry(**v) for k, v in doc["entries"].items()}

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        doc = {"entries": {k: asdict(v) for k, v in sorted(self.entries.items())}}
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
        tmp.replace(self.path)

    def lookup(self, model_id: str, cache_key: str):
        """Loaded model if the entry exists with this key and its hash verifies, else ``None``."""
        e = self.entries.get(model_id)
        if e is None or e.cache_key != cache_key:
            return None
        try:
            model, _, _ = load_checkpoint(self.root / e.path)
        except (CheckpointError, FileNotFoundError) as err:
            log.warning("zoo entry %s unusable: %s", model_id, err)
            return None
        return model

    def record(self, model_id: str, entry: ZooEntry) -> None:
        self.entries[model_id] = entry
        self.save()


class Zoo:
    """Builds or reuses the clean and backdoored models named in a config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.sched = cfg.make_schedule()
        self.manifest = ZooManifest(cfg.zoo_path())
        self._data = None
        self.trained: list[str] = []
        self._cache: dict[str, nn.Module] = {}

    @property
    def data(self) -> np.ndarray:
        if self._data is None:
            self._data = self.cfg.load_dataset()
        return self._data

    def _base_key(self) -> dict:
        return {"version": CODE_VERSION, "dataset": self.cfg.dataset, "T": self.cfg.T,
                "schedule": self.cfg.schedule, "arch": self.cfg.arch()}

    def clean_key(self, entry: dict) -> str:
        return _digest({**self._base_key(), "train": self.cfg.clean_train, "seed": entry["seed"]})

    def backdoor_key(self, entry: dict, steps: int | None = None) -> str:
        base = self._clean_entry(entry.get("base", "clean0"))
        train = {**self.cfg.backdoor_train, **({"steps": steps} if steps is not None else {})}
        return _digest({**self._base_key(), "base": self.clean_key(base), "train": train,
                        "spec": {k: entry.get(k) for k in ("method", "trigger", "target", "poison_rate", "gamma")},
                        "seed": entry.get("seed", 0)})

    def _clean_entry(self, model_id: str) -> dict:
        for m in self.cfg.clean_models:
            if m["id"] == model_id:
                return m
        raise KeyError(model_id)

    def clean(self, model_id: str) -> nn.Module:
        if model_id in self._cache:
            return self._cache[model_id]
        entry = self._clean_entry(model_id)
        key = self.clean_key(entry)
        model = self.manifest.lookup(model_id, key)
        if model is None:
            log.info("training clean model %s", model_id)
            model = make_denoiser(self.cfg.arch(), int(entry["seed"]))
            tc = TrainConfig(**{**self.cfg.clean_train, "seed": int(entry["seed"])})
            train_clean(model, self.data, self.sched, tc)
            save_checkpoint(model, self.manifest.root / model_id, self.sched, seed=tc.seed,
                            role="clean", cache_key=key)
            self.manifest.record(model_id, ZooEntry(model_id, "clean", key))
            self.trained.append(model_id)
        model.eval()
        self._cache[model_id] = model
        return model

    def backdoored(self, entry: dict, *, steps: int | None = None, model_id: str | None = None):
        """Returns ``(model, spec)``; ``steps`` overrides the backdoor training budget."""
        model_id = model_id or entry["id"]
        spec = build_spec(entry, self.cfg.image_size)
        if model_id in self._cache:
            return self._cache[model_id], spec
        key = self.backdoor_key(entry, steps)
        model = self.manifest.lookup(model_id, key)
        if model is None:
            base = self.clean(entry.get("base", "clean0"))
            log.info("training backdoored model %s", model_id)
            tc = TrainConfig(**{**self.cfg.backdoor_train, **({"steps": steps} if steps is not None else {}),
                                "seed": int(entry.get("seed", 0))})
            model = train_backdoor(clone_model(base), self.data, spec, self.sched, tc)
            save_checkpoint(model, self.manifest.root / model_id, self.sched, seed=tc.seed,
                            role="backdoored", cache_key=key)
            self.manifest.record(model_id, ZooEntry(model_id, "backdoored", key, _digest(entry)))
            self.trained.append(model_id)
        model.eval()
        self._cache[model_id] = model
        return model, spec

    def all_models(self):
        """Yields ``(model_id, role, model_or_exception, spec)``; failures are yielded, not raised."""
        for m in self.cfg.clean_models:
            try:
                yield m["id"], "clean", self.clean(m["id"]), None
            except Exception as err:  # noqa: BLE001 - crash isolation
                yield m["id"], "clean", err, None
        for b in self.cfg.backdoors:
            try:
                model, spec = self.backdoored(b)
                yield b["id"], "backdoored", model, spec
            except Exception as err:  # noqa: BLE001
                yield b["id"], "backdoored", err, None


def defender_profile(cfg: ExperimentConfig, zoo: Zoo, model: nn.Module | None = None) -> ShiftProfile:
    """Trigger-shift profile used by the defender (white-box or gray-box)."""
    p = cfg.profile
    inv = cfg.inversion_config()
    if p.get("kind", "whitebox") == "whitebox":
        return lambda_whitebox(p.get("method", "BadDiffusion"), zoo.sched, gamma=p.get("gamma"))
    if model is None:
        raise ValueError("gray-box profiling needs the suspicious model")
    surrogate = build_spec({"method": "BadDiffusion", "trigger": p.get("surrogate", "stripe"),
                            "target": p.get("surrogate_target", "ring"), "poison_rate": 0.3},
                           cfg.image_size)
    tc = TrainConfig(**{**cfg.backdoor_train, "steps": int(p.get("steps", cfg.backdoor_train["steps"])),
                        "seed": int(p.get("seed", 0))})
    ts = profiled_timesteps(zoo.sched, inv.max_chain)
    return graybox_profile(model, surrogate, zoo.data, zoo.sched, tc, ts, seed=int(p.get("seed", 0)))


def tau_for(cfg: ExperimentConfig, zoo: Zoo, spec: BackdoorSpec) -> float:
    n = int(cfg.evaluation.get("n_tau_refs", 256))
    return calibrate_tau(spec.target, zoo.data[:n], seed=0)


class Pipeline:
    """profile -> invert -> detect -> metrics, with per-model crash isolation."""

    def __init__(self, cfg: ExperimentConfig, out=None):
        self.cfg = cfg
        self.out = Path(out or cfg.output_dir)
        self.zoo = Zoo(cfg)
        self.errors: list[dict] = []

    def _inversion_dir(self, model_id: str, seed: int) -> Path:
        return self.out / "inversions" / f"{model_id}_s{seed}"

    def invert(self, model_id: str, model: nn.Module, seed: int, profile: ShiftProfile):
        inv_cfg = self.cfg.inversion_config()
        t0 = time.perf_counter()
        try:
            res = invert_trigger(model, profile, inv_cfg, self.zoo.sched, seed)
            status = "ok"
        except InversionDiverged as err:
            res, status = err.partial, "diverged"
        res.save(self._inversion_dir(model_id, seed))
        return res, status, time.perf_counter() - t0

    def run(self) -> dict:
        cfg, zoo = self.cfg, self.zoo
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        det_cfg = cfg.detection_config()
        ev = cfg.evaluation
        whitebox = cfg.profile.get("kind", "whitebox") == "whitebox"
        shared_profile = defender_profile(cfg, zoo) if whitebox else None
        if shared_profile is not None:
            shared_profile.to_json(self.out / "profile.json")

        records = []
        for model_id, role, model, spec in zoo.all_models():
            if isinstance(model, Exception):
                self._error(model_id, role, None, model)
                continue
            for seed in cfg.seeds:
                try:
                    profile = shared_profile or defender_profile(cfg, zoo, model)
                    if not whitebox:
                        profile.to_json(self.out / f"profile_{model_id}_s{seed}.json")
                    res, status, secs = self.invert(model_id, model, seed, profile)
                    verdict = detect(model, res.trigger, DetectionConfig(**{**asdict(det_cfg), "seed": seed}),
                                     zoo.sched, model_id)
                    rec = {"model_id": model_id, "role": role, "seed": seed, "status": status,
                           "inversion_s": round(secs, 3), **verdict.to_row()}
                    if spec is not None:
                        tau = tau_for(cfg, zoo, spec)
                        n, es = int(ev.get("n_asr", 64)), int(ev.get("seed", 7))
                        rec.update(tau=tau, asr_truth=asr(model, spec.trigger, spec.target, n, tau, zoo.sched, es),
                                   asr_inverted=asr(model, res.trigger, spec.target, n, tau, zoo.sched, es),
                                   l2d=l2d(res.trigger, spec.trigger),
                                   sim_truth=sim_score(model, spec.trigger, det_cfg.K, seed, zoo.sched, det_cfg.norm))
                    records.append(rec)
                except Exception as err:  # noqa: BLE001 - crash isolation
                    self._error(model_id, role, seed, err)
        self._apply_kl_rule(records, det_cfg)
        return self._write(records)

    def _error(self, model_id, role, seed, err):
        log.error("model %s failed: %s", model_id, err)
        self.errors.append({"model_id": model_id, "role": role, "seed": seed,
                            "error": f"{type(err).__name__}: {err}",
                            "trace": traceback.format_exc(limit=3)})

    def _apply_kl_rule(self, records: list[dict], det_cfg: DetectionConfig):
        """Fill ``trigger_flag`` using thresholds fitted on the clean models' statistics.

        With leave-one-out calibration a clean model is judged against a
        threshold computed without its own statistic.
        """
        if np.isfinite(det_cfg.kl_threshold):
            for r in records:
                r["kl_threshold"] = det_cfg.kl_threshold
                r["trigger_flag"] = r["kl_stat"] > det_cfg.kl_threshold
                r["combined_flag"] = r["generation_flag"] or r["trigger_flag"]
            return
        clean = [r for r in records if r["role"] == "clean"]
        for r in records:
            pool = [c["kl_stat"] for c in clean
                    if not (self.cfg.kl_calibration == "leave-one-out" and c["model_id"] == r["model_id"])]
            try:
                thr = threshold_from_stats(pool)
            except ValueError:
                thr = float("inf")
            r["kl_threshold"] = thr
            r["trigger_flag"] = bool(r["kl_stat"] > thr)
            r["combined_flag"] = bool(r["generation_flag"] or r["trigger_flag"])

    def _write(self, records: list[dict]) -> dict:
        cols = ["model_id", "role", "seed", "status", "sim_clean", "sim_trigger", "kl_stat", "kl_threshold",
                "generation_flag", "trigger_flag", "combined_flag", "tau", "asr_truth", "asr_inverted", "l2d",
                "sim_truth"]
        write_csv(self.out / "verdicts.csv", records, cols)
        with open(self.out / "verdicts.jsonl", "w") as fh:
            for r in records:
                fh.write(json.dumps({k: r.get(k) for k in cols}, sort_keys=True) + "\n")
        timing = [{k: r[k] for k in ("model_id", "seed", "inversion_s")} for r in records]
        write_csv(self.out / "timings.csv", timing, ["model_id", "seed", "inversion_s"])
        summary = {"n_records": len(records), "n_errors": len(self.errors)}
        if records:
            rep = detection_metrics([r["combined_flag"] for r in records], [r["role"] == "backdoored" for r in records])
            gen = detection_metrics([r["generation_flag"] for r in records], [r["role"] == "backdoored" for r in records])
            rows = [{"detector": "combined", "ACC": rep.acc, "TPR": rep.tpr, "TNR": rep.tnr, "n": rep.n},
                    {"detector": "generation", "ACC": gen.acc, "TPR": gen.tpr, "TNR": gen.tnr, "n": gen.n}]
            write_csv(self.out / "detection_metrics.csv", rows, ["detector", "ACC", "TPR", "TNR", "n"])
            summary.update(acc=rep.acc, tpr=rep.tpr, tnr=rep.tnr)
        if self.errors:
            write_csv(self.out / "errors.csv", self.errors, ["model_id", "role", "seed", "error"])
        (self.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        summary["records"] = records
        return summary


def run_pipeline(cfg: ExperimentConfig, out=None) -> dict:
    """Run detection over the zoo; returns a summary with ``records`` and ``n_errors``."""
    return Pipeline(cfg, out).run()


def run_amplify_sweep(cfg: ExperimentConfig, out=None) -> Path:
    """Reinforce the attacker's trigger at each backdoor training budget."""
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    zoo = Zoo(cfg)
    a = cfg.amplify
    entry = {"id": "amp", "method": a.get("method", "BadDiffusion"), "trigger": a.get("trigger", "box"),
             "target": a.get("target", "diamond"), "poison_rate": a.get("poison_rate", 0.3),
             "base": a.get("base", "clean0"), "seed": a.get("seed", 0)}
    profile = lambda_whitebox(entry["method"], zoo.sched)
    inv_cfg = cfg.inversion_config()
    rows = []
    for budget in a.get("budgets", []):
        t0 = time.perf_counter()
        model, spec = zoo.backdoored(entry, steps=int(budget), model_id=f"amp_{entry['trigger']}_{budget}")
        train_s = time.perf_counter() - t0
        tau = tau_for(cfg, zoo, spec)
        res = amplify(None, spec, zoo.sched, int(a.get("n_mds", 30)), profile, a.get("refine_dc"),
                      tau=tau, n_eval=int(cfg.evaluation.get("n_asr", 64)), seed=int(cfg.evaluation.get("seed", 7)),
                      cfg=inv_cfg, backdoored=model)
        np.save(out / f"reinforced_{budget}.npy", res.reinforced.pattern.numpy())
        rows.append({"epochs": int(budget), "asr_original": res.asr_before, "asr_reinforced": res.asr_after,
                     "train_s": round(train_s, 3), "amplify_s": round(res.timings["reinforce_s"], 3)})
    write_csv(out / "amplify.csv", rows, ["epochs", "asr_original", "asr_reinforced"])
    write_csv(out / "amplify_timings.csv", rows, ["epochs", "train_s", "amplify_s"])
    return out


def run_poison_sweep(cfg: ExperimentConfig, out=None) -> Path:
    """Backdoor at each poisoning rate, invert, detect; one CSV row per rate."""
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    zoo = Zoo(cfg)
    base = cfg.poison_sweep
    profile = defender_profile(cfg, zoo) if cfg.profile.get("kind", "whitebox") == "whitebox" else None
    det_cfg = cfg.detection_config()
    ev = cfg.evaluation
    rows = []
    for rate in cfg.poison_rates:
        entry = {"id": f"poison_{rate}", "method": "BadDiffusion", "trigger": base.get("trigger", "box"),
                 "target": base.get("target", "diamond"), "poison_rate": float(rate),
                 "base": base.get("base", "clean0"), "seed": base.get("seed", 0)}
        model, spec = zoo.backdoored(entry)
        prof = profile or defender_profile(cfg, zoo, model)
        seed = cfg.seeds[0]
        try:
            res = invert_trigger(model, prof, cfg.inversion_config(), zoo.sched, seed)
        except InversionDiverged as err:
            res = err.partial
        v = detect(model, res.trigger, det_cfg, zoo.sched, entry["id"])
        tau = tau_for(cfg, zoo, spec)
        n, es = int(ev.get("n_asr", 64)), int(ev.get("seed", 7))
        rows.append({"poison_rate": float(rate),
                     "asr_truth": asr(model, spec.trigger, spec.target, n, tau, zoo.sched, es),
                     "asr_inverted": asr(model, res.trigger, spec.target, n, tau, zoo.sched, es),
                     "l2d": l2d(res.trigger, spec.trigger), "generation_flag": v.generation_flag,
                     "sim_ratio": v.sim_clean / v.sim_trigger if v.sim_trigger > 0 else float("inf")})
    write_csv(out / "poison_sweep.csv", rows,
              ["poison_rate", "asr_truth", "asr_inverted", "l2d", "generation_flag", "sim_ratio"])
    return out


def run_ablation(cfg: ExperimentConfig, out=None, modes=None) -> Path:
    """Invert every backdoored model under each inversion mode; one CSV row per (mode, model, seed)."""
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    zoo = Zoo(cfg)
    modes = list(modes or ("two-stage", "mds-only", "dc-only", "single-step-baseline"))
    profile = lambda_whitebox(cfg.profile.get("method", "BadDiffusion"), zoo.sched, gamma=cfg.profile.get("gamma"))
    det_cfg = cfg.detection_config()
    ev = cfg.evaluation
    n, es = int(ev.get("n_asr", 64)), int(ev.get("seed", 7))
    rows = []
    for b in cfg.backdoors:
        model, spec = zoo.backdoored(b)
        tau = tau_for(cfg, zoo, spec)
        for mode in modes:
            inv = InversionConfig(**{**cfg.inversion, "mode": mode})
            for seed in cfg.seeds:
                try:
                    trig = invert_trigger(model, profile, inv, zoo.sched, seed).trigger
                except InversionDiverged as err:
                    trig = err.partial.trigger
                rows.append({"mode": mode, "model_id": b["id"], "seed": seed,
                             "asr": asr(model, trig, spec.target, n, tau, zoo.sched, es),
                             "l2d": l2d(trig, spec.trigger),
                             "sim": sim_score(model, trig, det_cfg.K, seed, zoo.sched, det_cfg.norm)})
    write_csv(out / "ablation.csv", rows, ["mode", "model_id", "seed", "asr", "l2d", "sim"])
    return out


def monotone_trend(values, tolerance: float = 0.0) -> bool:
    """True if the sequence never drops by more than ``tolerance``."""
    vals = list(values)
    return all(b >= a - tolerance for a, b in zip(vals, vals[1:]))


# -- reporting ---------------------------------------------------------------

def _plot(path, xs, series: dict, xlabel: str, ylabel: str, *, descending_x: bool = False):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o" if len(xs) < 30 else None, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if descending_x:
        ax.invert_xaxis()
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def emit_report(run_dir) -> tuple[int, list[Path]]:
    """Render tables and plots for whatever results exist in ``run_dir``.

    Returns ``(exit_code, written_paths)``; an empty directory produces a
    ``NO_RESULTS`` marker and exit code 1.
    """
    run_dir = Path(run_dir)
    report = run_dir / "report"
    written: list[Path] = []
    profiles = sorted(run_dir.glob("profile*.json"))
    if profiles:
        report.mkdir(parents=True, exist_ok=True)
        for p in profiles:
            prof = ShiftProfile.from_json(p)
            written.append(_plot(report / f"{p.stem}.png", prof.timesteps, {"lambda": prof.lambdas},
                                 "timestep", "trigger-shift scale", descending_x=True))
    if (run_dir / "detection_metrics.csv").exists():
        report.mkdir(parents=True, exist_ok=True)
        rows = read_csv(run_dir / "detection_metrics.csv")
        table = [{"detector": r["detector"], "ACC": 100 * float(r["ACC"]), "TPR": 100 * float(r["TPR"]),
                  "TNR": 100 * float(r["TNR"])} for r in rows]
        written.append(write_csv(report / "detection_table.csv", table, ["detector", "ACC", "TPR", "TNR"]))
    if (run_dir / "amplify.csv").exists():
        report.mkdir(parents=True, exist_ok=True)
        rows = read_csv(run_dir / "amplify.csv")
        xs = [int(r["epochs"]) for r in rows]
        written.append(_plot(report / "amplify.png", xs,
                             {"original": [float(r["asr_original"]) for r in rows],
                              "reinforced": [float(r["asr_reinforced"]) for r in rows]},
                             "backdoor training steps", "ASR"))
    if (run_dir / "poison_sweep.csv").exists():
        report.mkdir(parents=True, exist_ok=True)
        rows = read_csv(run_dir / "poison_sweep.csv")
        xs = [float(r["poison_rate"]) for r in rows]
        written.append(_plot(report / "poison_sweep.png", xs,
                             {"truth": [float(r["asr_truth"]) for r in rows],
                              "inverted": [float(r["asr_inverted"]) for r in rows]},
                             "poisoning rate", "ASR"))
    if (run_dir / "ablation.csv").exists():
        report.mkdir(parents=True, exist_ok=True)
        rows = read_csv(run_dir / "ablation.csv")
        by_mode: dict[str, list[dict]] = {}
        for r in rows:
            by_mode.setdefault(r["mode"], []).append(r)
        table = [{"mode": m, "ASR": float(np.median([float(r["asr"]) for r in rs])),
                  "L2D": float(np.median([float(r["l2d"]) for r in rs])),
                  "SIM": float(np.median([float(r["sim"]) for r in rs]))} for m, rs in by_mode.items()]
        written.append(write_csv(report / "ablation_table.csv", table, ["mode", "ASR", "L2D", "SIM"]))
    if not written:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / NO_RESULTS).write_text("no results found\n")
        return 1, []
    return 0, written
