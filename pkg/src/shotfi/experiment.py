"""Experiment runner and report tables.

A run directory looks like::

    <out>/spec.json
    <out>/<method>/seed_<s>/report.json      metrics + scenario/method/seed
    <out>/<method>/seed_<s>/epochs.jsonl     per-epoch loss terms and probe metrics
    <out>/<method>/seed_<s>/per_class.csv
    <out>/<method>/seed_<s>/adapted.pt       adaptation methods only
    <out>/seed_<s>/source.pt                 shared source checkpoint
    <out>/<method>/seed_<s>/error.txt        written instead of report.json on failure
"""

from __future__ import annotations

import json
import logging
import math
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import LabeledArrays, load_dataset, stack_samples
from .nets import load_checkpoint, multiuser_arch, save_checkpoint, singleuser_arch
from .synth import BenchmarkConfig, build_benchmark
from .train import (MU_ADAPT, MU_SOURCE, SU_ADAPT, SU_SOURCE, TrainConfig, adapt_multiuser,
                    adapt_singleuser, evaluate, pretrain_cpc, train_source)

log = logging.getLogger(__name__)

MU_METHODS = ("source_only", "shot_im", "shot_pp", "mu_shot_fi", "mu_shot_fi_cpc")
SU_METHODS = ("source_only", "shot_im", "shot_pp", "su_shot_fi")
SCENARIOS = ("cross_room", "cross_frequency", "combined", "su_cross_room", "su_cross_torso",
             "su_cross_face")
METRIC_COLUMNS = {
    "multiuser": ("slot_acc", "activity_f1_macro", "exact_match", "occ_mae", "occ_exact"),
    "singleuser": ("accuracy", "macro_f1"),
}
LOWER_IS_BETTER = {"occ_mae"}


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    scenario: str
    methods: list
    seeds: list
    setting: str = "multiuser"                     # or "singleuser"
    benchmark: dict = field(default_factory=dict)  # BenchmarkConfig keys, used without [data]
    data: dict = field(default_factory=dict)       # manifest paths: source, target, holdout
    model: dict = field(default_factory=dict)      # same_padding (MU) / width (SU)
    source: dict = field(default_factory=dict)     # TrainConfig overrides
    adapt: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)     # per-method TrainConfig overrides

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        for key in ("scenario", "methods", "seeds"):
            if key not in d:
                raise SpecError(f"missing required key: {key}")
        spec = cls(**d)
        spec.validate()
        return spec

    def validate(self):
        if self.setting not in ("multiuser", "singleuser"):
            raise SpecError("setting: must be 'multiuser' or 'singleuser'")
        if not (self.scenario in SCENARIOS or self.scenario.startswith("synthetic_")):
            raise SpecError(f"scenario: must be one of {SCENARIOS} or synthetic_*")
        allowed = MU_METHODS if self.setting == "multiuser" else SU_METHODS
        if not self.methods:
            raise SpecError("methods: at least one method required")
        for m in self.methods:
            if m not in allowed:
                raise SpecError(f"methods: {m!r} is not available for {self.setting} data (allowed: {allowed})")
        if self.scenario.startswith("su_") and self.setting != "singleuser":
            raise SpecError(f"scenario {self.scenario!r} needs setting = 'singleuser'")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise SpecError("seeds: must be a non-empty list of integers")
        if not self.data and not self.benchmark:
            raise SpecError("give either [data] manifests or a [benchmark] generator section")
        if self.data and "source" not in self.data or self.data and "target" not in self.data:
            raise SpecError("data: needs 'source' and 'target' manifest paths")
        try:
            for d in (self.source, self.adapt, *self.overrides.values()):
                TrainConfig().replace(**d)
            if self.benchmark:
                BenchmarkConfig.from_dict(self.benchmark)
        except ValueError as exc:
            raise SpecError(str(exc)) from exc


def method_config(method: str, setting: str, base: TrainConfig) -> tuple[TrainConfig, bool, bool]:
    """(config, uses_cpc, pseudo_labels) for a named method."""
    if method == "shot_im":
        return base.replace(lambda_rot=0.0, lambda_cpc=0.0, lambda_cls=0.0, gent="standard"), False, False
    if method == "shot_pp":
        # pseudo-labelling stays off for multi-user baselines
        cls = 0.0 if setting == "multiuser" else base.lambda_cls
        return base.replace(lambda_cpc=0.0, lambda_cls=cls, gent="standard"), False, setting == "singleuser"
    if method == "mu_shot_fi":
        return base.replace(lambda_cpc=0.0, lambda_cls=0.0, gent="occupancy"), False, False
    if method == "mu_shot_fi_cpc":
        return base.replace(lambda_cpc=base.lambda_cpc or 0.3, lambda_cls=0.0, gent="occupancy"), True, False
    if method == "su_shot_fi":
        return base.replace(gent="standard"), True, True
    raise SpecError(f"unknown method {method!r}")


@dataclass
class SplitData:
    source: LabeledArrays
    target: LabeledArrays
    holdout: Optional[LabeledArrays] = None


def load_splits(spec: ExperimentSpec, seed: int, base_dir: Path) -> SplitData:
    single = spec.setting == "singleuser"
    if spec.data:
        def get(key):
            p = Path(spec.data[key])
            return stack_samples(load_dataset(p if p.is_absolute() else base_dir / p), single)
        return SplitData(get("source"), get("target"), get("holdout") if "holdout" in spec.data else None)
    cfg = BenchmarkConfig.from_dict({**spec.benchmark, "seed": seed})
    splits = build_benchmark(cfg, keep_raw=False)
    hold = stack_samples(splits["holdout"], single) if splits["holdout"] else None
    return SplitData(stack_samples(splits["source"], single), stack_samples(splits["target"], single), hold)


def _arch(spec: ExperimentSpec, data: SplitData) -> dict:
    F = data.source.x.shape[2]
    if spec.setting == "multiuser":
        M = data.source.y.shape[1]
        return multiuser_arch(F, M, data.source.num_classes, spec.model.get("same_padding", True))
    return singleuser_arch(F, data.source.num_classes, spec.model.get("width", 64))


def _write_jsonl(path: Path, rows: list) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def run_seed(spec: ExperimentSpec, seed: int, out: Path, base_dir: Path = Path(".")) -> dict:
    """Source-train once, then evaluate every method. Returns {method: report dict}."""
    mu = spec.setting == "multiuser"
    data = load_splits(spec, seed, base_dir)
    src_cfg = (MU_SOURCE if mu else SU_SOURCE).replace(**{**spec.source, "seed": seed})
    ckpt = out / f"seed_{seed}" / "source.pt"
    if ckpt.exists():
        model, payload = load_checkpoint(ckpt)
        source_losses = payload["extra"].get("losses", [])
    else:
        res = train_source(data.source, _arch(spec, data), src_cfg)
        model, source_losses = res.model, res.losses
        save_checkpoint(ckpt, model, seed, extra={"losses": source_losses})
    adapt_base = (MU_ADAPT if mu else SU_ADAPT).replace(**{**spec.adapt, "seed": seed})
    results = {}
    cpc = None
    for method in spec.methods:
        mdir = out / method / f"seed_{seed}"
        mdir.mkdir(parents=True, exist_ok=True)
        try:
            rows = []
            if method == "source_only":
                report = evaluate(model, data.target)
                rows = [{"epoch": i, "source_loss": l} for i, l in enumerate(source_losses)]
                extra = {}
            else:
                cfg, uses_cpc, pl = method_config(method, spec.setting, adapt_base)
                cfg = cfg.replace(**spec.overrides.get(method, {}))
                cpc_curve = []
                if uses_cpc and cfg.lambda_cpc > 0 and cpc is None:
                    cres = pretrain_cpc(data.target.unlabeled(), cfg)
                    cpc, cpc_curve = cres.cpc, cres.losses
                    if cres.skipped:
                        log.warning("%s seed %d: %d samples too short for CPC", method, seed, cres.skipped)
                view = data.target.unlabeled()
                use = cpc if uses_cpc else None
                if mu:
                    adapted, rep = adapt_multiuser(model, view, cfg, probe=data.target, cpc=use)
                else:
                    adapted, rep = adapt_singleuser(model, view, cfg, probe=data.target, cpc=use, pseudo_labels=pl)
                save_checkpoint(mdir / "adapted.pt", adapted, seed)
                report = evaluate(adapted, data.target)
                rows = [{"epoch": i, **h, "probe": p} for i, (h, p) in enumerate(zip(rep.history, rep.probe[1:]))]
                extra = {"rotation_pretrain": rep.rotation_pretrain, "cpc_pretrain": cpc_curve,
                         "classifier_hash_before": rep.classifier_hash_before,
                         "classifier_hash_after": rep.classifier_hash_after,
                         "label_access_count": rep.label_access_count, "config": asdict(cfg)}
            _write_jsonl(mdir / "epochs.jsonl", rows)
            report.per_class_csv(mdir / "per_class.csv")
            record = {"scenario": spec.scenario, "method": method, "seed": seed, "setting": spec.setting,
                      "metrics": report.to_dict(), **extra}
            if data.holdout is not None and method == "source_only":
                record["source_holdout"] = evaluate(model, data.holdout).to_dict()
            (mdir / "report.json").write_text(json.dumps(record, indent=2))
            results[method] = record
        except Exception as exc:        # halt this seed; other seeds still run
            (mdir / "error.txt").write_text(traceback.format_exc())
            log.error("%s seed %d failed: %s", method, seed, exc)
            results[method] = {"error": str(exc)}
            break
    return results


def run_experiment(spec: ExperimentSpec, out, base_dir: Path = Path(".")) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2))
    summary = {}
    for seed in spec.seeds:
        try:
            summary[seed] = run_seed(spec, seed, out, base_dir)
        except Exception as exc:
            err = out / f"seed_{seed}"
            err.mkdir(parents=True, exist_ok=True)
            (err / "error.txt").write_text(traceback.format_exc())
            log.error("seed %d failed: %s", seed, exc)
            summary[seed] = {"error": str(exc)}
    return summary


def failures(summary: dict) -> int:
    n = 0
    for res in summary.values():
        if "error" in res:
            n += 1
        else:
            n += sum("error" in r for r in res.values())
    return n


# ---------------------------------------------------------------- reporting

def collect_reports(run_dirs) -> tuple[list[dict], list[str]]:
    records, missing = [], []
    for d in run_dirs:
        d = Path(d)
        if not d.is_dir():
            missing.append(f"{d}: not a directory")
            continue
        found = sorted(d.glob("*/seed_*/report.json"))
        for p in found:
            records.append(json.loads(p.read_text()))
        for e in sorted(d.glob("**/error.txt")):
            missing.append(f"{e.parent}: failed run")
        if not found:
            missing.append(f"{d}: no report.json files")
    return records, missing


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def aggregate(records: list[dict]) -> dict:
    """{(scenario, setting): {method: {metric: (mean, std, n)}}}"""
    groups: dict = {}
    for r in records:
        key = (r["scenario"], r.get("setting", r["metrics"].get("kind", "multiuser")))
        groups.setdefault(key, {}).setdefault(r["method"], []).append(r["metrics"])
    table = {}
    for key, methods in groups.items():
        cols = METRIC_COLUMNS[key[1]]
        table[key] = {}
        for m, ms in methods.items():
            table[key][m] = {c: (*mean_std([x[c] for x in ms]), len(ms)) for c in cols}
    return table


def _order(methods):
    known = list(MU_METHODS) + [m for m in SU_METHODS if m not in MU_METHODS]
    return sorted(methods, key=lambda m: (known.index(m) if m in known else len(known), m))


def _best(rows: dict, col: str) -> set:
    """Every method tied for the best mean in ``col``."""
    pick = min if col in LOWER_IS_BETTER else max
    top = pick(r[col][0] for r in rows.values())
    return {m for m, r in rows.items() if r[col][0] == top}


def _fmt(mean, std, col) -> str:
    scale = 1.0 if col == "occ_mae" else 100.0
    return f"{mean * scale:.2f}±{std * scale:.2f}"


def render_markdown(table: dict) -> str:
    out = []
    for (scenario, setting), rows in sorted(table.items()):
        cols = METRIC_COLUMNS[setting]
        head = list(cols) + [f"Δ {cols[0]}"]
        out.append(f"### {scenario} ({setting})\n")
        out.append("| method | n | " + " | ".join(head) + " |")
        out.append("|" + "---|" * (len(head) + 2))
        best = {c: _best(rows, c) for c in cols}
        base = rows.get("source_only")
        for m in _order(rows):
            cells = []
            for c in cols:
                s = _fmt(rows[m][c][0], rows[m][c][1], c)
                cells.append(f"**{s}**" if m in best[c] and len(best[c]) < len(rows) else s)
            delta = "" if base is None or m == "source_only" else \
                f"{(rows[m][cols[0]][0] - base[cols[0]][0]) * 100:+.2f}"
            out.append(f"| {m} | {rows[m][cols[0]][2]} | " + " | ".join(cells) + f" | {delta} |")
        out.append("")
    return "\n".join(out)


def render_csv(table: dict) -> str:
    lines = ["scenario,setting,method,metric,mean,std,n,delta_vs_source_only"]
    for (scenario, setting), rows in sorted(table.items()):
        base = rows.get("source_only")
        for m in _order(rows):
            for c in METRIC_COLUMNS[setting]:
                mean, std, n = rows[m][c]
                delta = "" if base is None or m == "source_only" else f"{mean - base[c][0]:.6f}"
                lines.append(f"{scenario},{setting},{m},{c},{mean:.6f},{std:.6f},{n},{delta}")
    return "\n".join(lines) + "\n"


def write_plots(run_dirs, records: list[dict], out_dir) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for d in run_dirs:
        for p in sorted(Path(d).glob("*/seed_*/epochs.jsonl")):
            rows = [json.loads(l) for l in p.read_text().splitlines() if l.strip()]
            if rows and "total" in rows[0]:
                ax.plot([r["total"] for r in rows], label=f"{p.parent.parent.name}/{p.parent.name}")
    if ax.lines:
        ax.set_xlabel("epoch")
        ax.set_ylabel("adaptation loss")
        ax.legend(fontsize=6)
        fig.tight_layout()
        written.append(out_dir / "loss_curves.png")
        fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    table = aggregate(records)
    for (scenario, setting), rows in sorted(table.items()):
        col = METRIC_COLUMNS[setting][0]
        methods = _order(rows)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar(methods, [rows[m][col][0] for m in methods], yerr=[rows[m][col][1] for m in methods])
        ax.set_ylabel(col)
        ax.set_title(scenario)
        ax.tick_params(axis="x", labelrotation=30)
        fig.tight_layout()
        written.append(out_dir / f"{scenario}_{col}.png")
        fig.savefig(written[-1], dpi=120)
        plt.close(fig)
    return written


def median_over_seeds(records: list[dict], method: str, metric: str) -> float:
    vals = [r["metrics"][metric] for r in records if r["method"] == method]
    return float(np.median(vals)) if vals else math.nan
