"""Manifest-driven experiment steps behind the CLI subcommands.

Every step writes its outputs under ``cfg.out_dir`` and a run ledger in
``ledger/<step>.json``. Steps return a process exit code: 0 success,
1 partial data failure.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import convnet, dsp, handcrafted, probe, simlab, synth
from .config import ExperimentConfig
from .heatmap import render_svg
from .tensorio import (DatasetManifest, FeatureMatrix, TensorBundle, feature_from_bundle,
                       feature_to_bundle, load_manifest, read_bundle, write_bundle,
                       write_feature_csv)

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    pass


@dataclass
class RunLedger:
    out_dir: Path
    command: str
    config_hash: str
    steps: dict[str, str] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)

    def emit(self, path: Path) -> None:
        rel = str(Path(path).relative_to(self.out_dir))
        if rel not in self.artifacts:
            self.artifacts.append(rel)

    def step(self, name: str, status: str) -> None:
        self.steps[name] = status

    @property
    def failures(self) -> int:
        return sum(1 for s in self.steps.values() if s.startswith("failed"))

    def write(self) -> Path:
        d = self.out_dir / "ledger"
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"{self.command}.json"
        doc = {"command": self.command, "config_hash": self.config_hash,
               "steps": self.steps, "artifacts": sorted(self.artifacts)}
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path

    def exit_code(self) -> int:
        self.write()
        return 1 if self.failures else 0


def safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.-]+", "_", text).strip("_")


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), newline="")


# ---------------------------------------------------------------- synth


def run_synth(out_dir, n: int = 200, seed: int = 0, classes: int = 2,
              sample_rate: int = 16000) -> int:
    out = Path(out_dir)
    cfg = synth.SynthConfig(n=n, seed=seed, classes=classes, sample_rate=sample_rate)
    manifest = synth.generate(out, cfg)
    ledger = RunLedger(out, "synth", f"synth-n{n}-s{seed}-c{classes}-r{sample_rate}")
    for i in range(n):
        ledger.emit(out / f"audio/clip_{i:05d}.wav")
    ledger.emit(manifest)
    ledger.step("generate", "ok")
    return ledger.exit_code()


# ---------------------------------------------------------------- melspec


def melspec_path(out_dir, index: int) -> Path:
    return Path(out_dir) / "melspec" / f"{index:05d}.ftb"


def load_clip(man: DatasetManifest, index: int) -> dsp.AudioClip:
    rec = man.records[index]
    clip = dsp.read_wav(rec.path)
    if clip.sample_rate != man.sample_rate:
        raise DataError(f"{rec.path}: sample rate {clip.sample_rate} != manifest {man.sample_rate}")
    return dsp.fit_length(clip, man.clip_seconds)


def run_melspec(cfg: ExperimentConfig, force: bool = False) -> int:
    man = load_manifest(cfg.manifest)
    out = Path(cfg.out_dir)
    (out / "melspec").mkdir(parents=True, exist_ok=True)
    ledger = RunLedger(out, "melspec", cfg.hash())

    def one(i: int) -> str:
        path = melspec_path(out, i)
        if path.exists() and not force:
            return "skipped"
        try:
            spec = dsp.clip_to_db(load_clip(man, i))
        except Exception as e:  # noqa: BLE001 - collected per record
            log.error("record %d: %s", i, e)
            return f"failed: {e}"
        meta = {"record": str(man.records[i].path), "sample_rate": str(spec.sample_rate),
                "hop": str(spec.hop), "silent": str(spec.silent).lower()}
        write_bundle(TensorBundle.from_arrays({"melspec": spec.values}, meta), path)
        return "ok"

    for i, status in enumerate(_map(one, range(len(man.records)), cfg.effective_workers())):
        ledger.step(f"record {i}", status)
        if not status.startswith("failed"):
            ledger.emit(melspec_path(out, i))
            ledger.emit(Path(str(melspec_path(out, i)) + ".meta.json"))
    return ledger.exit_code()


def load_spectrograms(cfg: ExperimentConfig, man: DatasetManifest) -> np.ndarray:
    specs = []
    for i in range(len(man.records)):
        path = melspec_path(cfg.out_dir, i)
        if not path.exists():
            raise DataError(f"missing spectrogram {path}; run `melspec` first")
        specs.append(read_bundle(path)["melspec"].astype(np.float64))
    return np.stack(specs)


# ---------------------------------------------------------------- hand-crafted


def feature_path(out_dir, name: str) -> Path:
    return Path(out_dir) / "features" / f"{safe_name(name)}.ftb"


def run_features(cfg: ExperimentConfig, force: bool = False, write_csv: bool = True) -> int:
    man = load_manifest(cfg.manifest)
    out = Path(cfg.out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    ledger = RunLedger(out, "features", cfg.hash())
    specs = cfg.feature_specs()
    todo = [s for s in specs if force or not feature_path(out, s.name).exists()]
    spectra = load_spectrograms(cfg, man) if todo else None
    clips = None
    if any(b.needs_audio for s in todo for b in s.expand()):
        clips = [load_clip(man, i) for i in range(len(man.records))]
    for spec in specs:
        path = feature_path(out, spec.name)
        if spec in todo:
            fm = handcrafted.assemble([spec], list(spectra), clips, cfg.effective_workers())
            meta = {"feature": spec.name, "order_hash": man.order_hash()}
            write_bundle(feature_to_bundle(fm, meta=meta), path)
            if write_csv:
                write_feature_csv(fm, path.with_suffix(".csv"))
            ledger.step(spec.name, "ok")
        else:
            ledger.step(spec.name, "skipped")
        ledger.emit(path)
        ledger.emit(Path(str(path) + ".meta.json"))
        if write_csv and path.with_suffix(".csv").exists():
            ledger.emit(path.with_suffix(".csv"))
    return ledger.exit_code()


def load_feature(cfg: ExperimentConfig, name: str, man: DatasetManifest) -> FeatureMatrix:
    path = feature_path(cfg.out_dir, name)
    if not path.exists():
        raise DataError(f"missing feature file {path}; run `features` first")
    bundle = read_bundle(path)
    _check_order(bundle, man, path)
    return feature_from_bundle(bundle)


def _check_order(bundle: TensorBundle, man: DatasetManifest, path) -> None:
    tag = bundle.meta.get("order_hash")
    if tag is not None and tag != man.order_hash():
        raise DataError(f"{path}: example order {tag} does not match manifest {man.order_hash()}")


# ---------------------------------------------------------------- deep features


def deep_path(out_dir, arch: str, source: str, seed: int, tap: str) -> Path:
    return Path(out_dir) / "deep" / f"{arch}__{safe_name(source)}__s{seed}__{tap}.ftb"


def deep_label(arch: str, tap: str, source: str) -> str:
    return f"{arch}/{tap}@{source}"


def resolve_weights(cfg: ExperimentConfig, arch: convnet.ArchitectureSpec, source: str,
                    seed: int) -> tuple[TensorBundle, str]:
    for w in cfg.weights:
        if (convnet.canonical_id(w.architecture) == arch.id and int(w.seed) == seed
                and (w.source_task or source) == source):
            bundle = read_bundle(w.path)
            # the config entry declares provenance, whatever the bundle says
            bundle.meta["trained"] = str(bool(w.trained)).lower()
            return bundle, w.path
    return convnet.init_weights(arch, convnet.InitConfig(seed=seed)), ""


def run_deepfeat(cfg: ExperimentConfig, force: bool = False) -> int:
    man = load_manifest(cfg.manifest)
    out = Path(cfg.out_dir)
    (out / "deep").mkdir(parents=True, exist_ok=True)
    ledger = RunLedger(out, "deepfeat", cfg.hash())
    frames = dsp.expected_frames(int(round(man.clip_seconds * man.sample_rate)))
    spectra = None
    jobs = [(a, s, seed) for a in cfg.architectures for s in cfg.source_tasks for seed in cfg.seeds]
    for arch_id, source, seed in jobs:
        paths = {t: deep_path(out, arch_id, source, seed, t) for t in cfg.taps}
        step = f"{arch_id}/{source}/s{seed}"
        if force or not all(p.exists() for p in paths.values()):
            if spectra is None:
                spectra = load_spectrograms(cfg, man)
            arch = convnet.architecture(arch_id, frames=frames)
            weights, wpath = resolve_weights(cfg, arch, source, seed)
            try:
                acts = convnet.forward_extract(arch, weights, spectra, cfg.taps)
            except ValueError as e:
                ledger.step(step, f"failed: {e}")
                continue
            for tap, path in paths.items():
                rows = convnet.flatten_tap(tap, acts[tap])
                meta = {"architecture": arch_id, "seed": str(seed), "tap": tap,
                        "source_task": source, "trained": weights.meta.get("trained", "false"),
                        "weights": wpath, "order_hash": man.order_hash(),
                        "tap_shape": json.dumps(list(acts[tap].shape[1:]))}
                write_bundle(TensorBundle.from_arrays({"features": rows.astype(np.float32)}, meta), path)
            ledger.step(step, "ok")
        else:
            ledger.step(step, "skipped")
        for p in paths.values():
            ledger.emit(p)
            ledger.emit(Path(str(p) + ".meta.json"))
    return ledger.exit_code()


def load_deep(cfg: ExperimentConfig, man: DatasetManifest, arch: str, source: str,
              seed: int, tap: str) -> FeatureMatrix:
    path = deep_path(cfg.out_dir, arch, source, seed, tap)
    if not path.exists():
        raise DataError(f"missing deep features {path}; run `deepfeat` first")
    bundle = read_bundle(path)
    _check_order(bundle, man, path)
    return FeatureMatrix(bundle["features"].astype(np.float64))


# ---------------------------------------------------------------- similarity


def _split_rows(man: DatasetManifest, split: str) -> np.ndarray:
    if split == "all":
        return np.arange(len(man.records))
    return man.split_indices(split)


def similarity_grids(cfg: ExperimentConfig, man: DatasetManifest, measure: str):
    """Per-seed grids (deep sets x hand-crafted sets) and their mean."""
    rows_idx = _split_rows(man, cfg.similarity_split)
    hand = {s.name: load_feature(cfg, s.name, man).values[rows_idx] for s in cfg.feature_specs()}
    grids = []
    for seed in cfg.seeds:
        deep = {}
        for arch in cfg.architectures:
            for source in cfg.source_tasks:
                for tap in cfg.taps:
                    fm = load_deep(cfg, man, arch, source, seed, tap)
                    deep[deep_label(arch, tap, source)] = fm.values[rows_idx]
        grid = simlab.similarity_grid(
            deep, hand, measure,
            noise_seed=cfg.noise_seed if cfg.noise_baseline else None,
            workers=cfg.effective_workers(),
        )
        grid.provenance.update(seed=seed, split=cfg.similarity_split)
        grids.append(grid)
    return grids, simlab.average_grids(grids)


def run_similarity(cfg: ExperimentConfig) -> int:
    man = load_manifest(cfg.manifest)
    out = Path(cfg.out_dir)
    d = out / "similarity"
    d.mkdir(parents=True, exist_ok=True)
    ledger = RunLedger(out, "similarity", cfg.hash())
    for measure in cfg.measures:
        grids, mean = similarity_grids(cfg, man, measure)
        for seed, g in zip(cfg.seeds, grids):
            p = d / f"{measure}__s{seed}.csv"
            p.write_text(g.to_csv(), newline="")
            ledger.emit(p)
        p = d / f"{measure}__mean.csv"
        p.write_text(mean.to_csv(), newline="")
        ledger.emit(p)
        svg = d / f"{measure}__mean.svg"
        svg.write_text(render_svg(mean.values, mean.row_labels, mean.col_labels,
                                  f"{measure} (mean over {len(grids)} seeds)"))
        ledger.emit(svg)
        ledger.step(measure, "ok")
    return ledger.exit_code()


# ---------------------------------------------------------------- decoding


RUN_HEADER = ["feature", "task", "seed", "metric", "value"]
AGG_HEADER = ["feature", "task", "metric", "runs", "mean", "std", "baseline", "formatted"]


def _fmt(v: float) -> str:
    return repr(float(v))


def _decode_deep(cfg, man, arch, source, tap, task, kind, tr, te, extra=None):
    """One DecodeReport over init seeds for a deep feature set (optionally
    concatenated with a hand-crafted block)."""
    y = man.labels(task)
    values, seeds, cm, base = [], [], None, None
    for seed in cfg.seeds:
        blocks = [load_deep(cfg, man, arch, source, seed, tap)]
        if extra is not None:
            blocks.append(extra[1])
        # one logistic-regression init shared across network inits
        r = probe.concat_decode(blocks, y, kind, tr, te, seeds=[0], cfg=cfg.logreg, task=task)
        values += r.values
        seeds.append(seed)
        base = r.baseline
        if r.confusion is not None:
            cm = r.confusion if cm is None else cm + r.confusion
    label = deep_label(arch, tap, source)
    if extra is not None:
        label += f"+{extra[0]}"
    return probe.DecodeReport(task, "accuracy" if kind == "classification" else "rmse",
                              values, seeds, base, cm, label)


def decode_reports(cfg: ExperimentConfig, man: DatasetManifest) -> list[probe.DecodeReport]:
    tasks = cfg.tasks or list(man.tasks)
    tr, te = man.split_indices("train"), man.split_indices("test")
    reports = []
    for spec in cfg.feature_specs():
        fm = load_feature(cfg, spec.name, man)
        for task in tasks:
            reports.append(probe.decode(fm, man.labels(task), man.tasks[task], tr, te,
                                        seeds=cfg.seeds, cfg=cfg.logreg, task=task, feature=spec.name))
    for arch in cfg.architectures:
        for source in cfg.source_tasks:
            for tap in cfg.taps:
                for task in tasks:
                    reports.append(_decode_deep(cfg, man, arch, source, tap, task,
                                                man.tasks[task], tr, te))
                    for hname in cfg.concat_with:
                        extra = (hname, load_feature(cfg, hname, man))
                        reports.append(_decode_deep(cfg, man, arch, source, tap, task,
                                                    man.tasks[task], tr, te, extra))
    return reports


def cross_task_reports(cfg: ExperimentConfig, man: DatasetManifest) -> list[tuple[str, probe.DecodeReport]]:
    """Every target task decoded from deep features nominally built for every source task."""
    tasks = cfg.tasks or list(man.tasks)
    tr, te = man.split_indices("train"), man.split_indices("test")
    out = []
    for arch in cfg.architectures:
        for tap in cfg.taps:
            for source in cfg.source_tasks:
                for target in tasks:
                    r = _decode_deep(cfg, man, arch, source, tap, target, man.tasks[target], tr, te)
                    out.append((source, r))
    return out


def run_decode(cfg: ExperimentConfig) -> int:
    man = load_manifest(cfg.manifest)
    out = Path(cfg.out_dir)
    d = out / "decode"
    d.mkdir(parents=True, exist_ok=True)
    ledger = RunLedger(out, "decode", cfg.hash())
    reports = decode_reports(cfg, man)
    runs, agg = [], []
    for r in reports:
        seeds = r.seeds or [""] * len(r.values)
        for s, v in zip(seeds, r.values):
            runs.append([r.feature, r.task, s, r.metric, _fmt(v)])
        agg.append([r.feature, r.task, r.metric, len(r.values), _fmt(r.mean), _fmt(r.std),
                    _fmt(r.baseline), r.formatted()])
        if r.confusion is not None:
            cdir = d / "confusion"
            cdir.mkdir(exist_ok=True)
            p = cdir / f"{safe_name(r.feature)}__{safe_name(r.task)}.csv"
            k = r.confusion.shape[0]
            _write_csv(p, ["true\\pred"] + list(range(k)),
                       [[i] + list(map(int, row)) for i, row in enumerate(r.confusion)])
            ledger.emit(p)
    _write_csv(d / "runs.csv", RUN_HEADER, runs)
    _write_csv(d / "aggregate.csv", AGG_HEADER, agg)
    ledger.emit(d / "runs.csv")
    ledger.emit(d / "aggregate.csv")
    ledger.step("decode", "ok")
    if cfg.cross_task:
        rows = []
        for source, r in cross_task_reports(cfg, man):
            arch_tap = r.feature.split("@")[0]
            rows.append([arch_tap, source, r.task, r.metric, len(r.values), _fmt(r.mean),
                         _fmt(r.std), _fmt(r.baseline), r.formatted()])
        _write_csv(d / "cross_task.csv",
                   ["features", "source_task", "target_task", "metric", "runs", "mean", "std",
                    "baseline", "formatted"], rows)
        ledger.emit(d / "cross_task.csv")
        ledger.step("cross_task", "ok")
    return ledger.exit_code()


# ---------------------------------------------------------------- report


def _read_csv(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def run_report(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    ledger = RunLedger(out, "report", cfg.hash())
    lines = ["# Feature analysis report", "", f"config hash `{cfg.hash()}`", ""]
    agg = out / "decode" / "aggregate.csv"
    if agg.exists():
        rows = _read_csv(agg)
        lines += ["## Decoding (test split)", "", "| features | task | result | baseline |",
                  "|---|---|---|---|"]
        for feat, task, metric, _, _, _, base, formatted in rows[1:]:
            b = f"{100 * float(base):.2f}%" if metric == "accuracy" else f"{float(base):.4f}"
            lines.append(f"| {feat} | {task} | {formatted} | {b} |")
        lines.append("")
        ledger.step("decode", "ok")
    else:
        ledger.step("decode", "absent")
    cross = out / "decode" / "cross_task.csv"
    if cross.exists():
        rows = _read_csv(cross)
        lines += ["## Cross-task decoding", "", "| features | source | target | result |",
                  "|---|---|---|---|"]
        for r in rows[1:]:
            lines.append(f"| {r[0]} | {r[1]} | {r[2]} | {r[8]} |")
        lines.append("")
    for measure in cfg.measures:
        p = out / "similarity" / f"{measure}__mean.csv"
        if not p.exists():
            ledger.step(f"similarity {measure}", "absent")
            continue
        rows = _read_csv(p)
        lines += [f"## Similarity: {measure} (mean over seeds)", "",
                  "| | " + " | ".join(rows[0][1:]) + " |",
                  "|---" * len(rows[0]) + "|"]
        for r in rows[1:]:
            lines.append(f"| {r[0]} | " + " | ".join(f"{float(v):.3f}" for v in r[1:]) + " |")
        lines.append("")
        ledger.step(f"similarity {measure}", "ok")
    path = out / "report.md"
    path.write_text("\n".join(lines))
    ledger.emit(path)
    return ledger.exit_code()
