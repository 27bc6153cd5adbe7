"""Run aggregation and report serialization, including cross-attack correlations."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

import numpy as np

from riskprobe.access import ALL_THREAT_MODELS, Attack, ThreatModel, attacks_applicable
from riskprobe.errors import ZeroVariance
from riskprobe.metrics import overfitting_level, pearson_correlation

# headline metric per attack, used for correlations and bar charts
PRIMARY_METRIC = {
    Attack.MEMINF: "acc",
    Attack.ATTRINF: "acc",
    Attack.MODSTEAL: "agreement",
}


def primary_metric(attack: Attack, tm: ThreatModel) -> str:
    if attack is Attack.MODINV:
        return "mse" if tm.auxiliary.value == "none" else "acc"
    return PRIMARY_METRIC[attack]


@dataclass
class AttackResult:
    attack_id: Attack
    threat_model: ThreatModel
    metrics: dict[str, tuple[float, float, int]]
    artifacts: dict[str, str] = field(default_factory=dict)
    target: str = "target"

    def __post_init__(self):
        self.attack_id = Attack(self.attack_id)
        for name, (_, std, n) in self.metrics.items():
            if n < 1:
                raise ValueError(f"metric {name} has no runs")
            if n == 1 and std != 0:
                raise ValueError(f"metric {name} has a single run but non-zero std")

    def mean(self, name: str) -> float:
        return self.metrics[name][0]

    def to_dict(self) -> dict:
        return {
            "attack": self.attack_id.value,
            "threat_model": self.threat_model.name,
            "target": self.target,
            "metrics": {k: {"mean": m, "std": s, "n_runs": n} for k, (m, s, n) in sorted(self.metrics.items())},
            "artifacts": dict(sorted(self.artifacts.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackResult":
        return cls(
            Attack(d["attack"]),
            ThreatModel.parse(d["threat_model"]),
            {k: (v["mean"], v["std"], v["n_runs"]) for k, v in d["metrics"].items()},
            d.get("artifacts", {}),
            d.get("target", "target"),
        )


def aggregate_runs(runs: list[dict[str, float]]) -> dict[str, tuple[float, float, int]]:
    """Mean and population std of each scalar metric over repeated runs."""
    if not runs:
        raise ValueError("no runs to aggregate")
    out = {}
    for name in sorted(set().union(*runs)):
        values = [r[name] for r in runs if name in r and isinstance(r[name], (int, float))]
        if not values:
            continue
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std()) if len(arr) > 1 else 0.0
        out[name] = (float(arr.mean()), std, len(arr))
    return out


def correlation_pairs() -> list[tuple[ThreatModel, Attack, Attack]]:
    """Every pair of attacks that share a threat model."""
    order = list(Attack)
    pairs = []
    for tm in ALL_THREAT_MODELS:
        attacks = sorted(attacks_applicable(tm), key=order.index)
        pairs.extend((tm, a, b) for a, b in itertools.combinations(attacks, 2))
    return pairs


def correlation_table(results: list[AttackResult]) -> list[dict]:
    """Pearson r across targets for each attack pair under a shared threat model."""
    by_key = {(r.target, r.attack_id, r.threat_model): r for r in results}
    targets = sorted({r.target for r in results})
    rows = []
    for tm, a, b in correlation_pairs():
        ma, mb = primary_metric(a, tm), primary_metric(b, tm)
        xs, ys = [], []
        for t in targets:
            ra, rb = by_key.get((t, a, tm)), by_key.get((t, b, tm))
            if ra and rb and ma in ra.metrics and mb in rb.metrics:
                xs.append(ra.mean(ma))
                ys.append(rb.mean(mb))
        row = {"threat_model": tm.name, "attack_a": a.value, "attack_b": b.value, "n_targets": len(xs), "r": None}
        if len(xs) >= 2:
            try:
                row["r"] = pearson_correlation(xs, ys)
            except ZeroVariance:
                row["note"] = "zero variance"
        else:
            row["note"] = "needs at least two evaluated targets"
        if len(xs) or row.get("note") == "zero variance":
            rows.append(row)
    return rows


@dataclass
class RiskReport:
    targets: list[dict]
    results: list[AttackResult]
    defense: dict = field(default_factory=dict)
    correlations: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        order = list(Attack)
        results = sorted(
            self.results, key=lambda r: (r.target, order.index(r.attack_id), r.threat_model.name)
        )
        return {
            "targets": self.targets,
            "defense": self.defense,
            "results": [r.to_dict() for r in results],
            "correlations": self.correlations,
            "provenance": self.provenance,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RiskReport":
        return cls(
            d["targets"],
            [AttackResult.from_dict(r) for r in d["results"]],
            d.get("defense", {}),
            d.get("correlations", []),
            d.get("provenance", {}),
            d.get("metadata", {}),
        )


def build_report(
    results: list[AttackResult],
    targets: list[dict],
    defense: dict | None = None,
    provenance: dict | None = None,
    metadata: dict | None = None,
) -> RiskReport:
    """Assemble a report; each target dict needs ``id``, ``train_acc``, ``test_acc``."""
    if not results:
        raise ValueError("a report needs at least one attack result")
    targets = [
        {**t, "overfitting_level": overfitting_level(t["train_acc"], t["test_acc"])} for t in targets
    ]
    return RiskReport(targets, list(results), defense or {}, correlation_table(results), provenance or {}, metadata or {})


# ---------------------------------------------------------------------------
# serialization


def _round(x):
    if isinstance(x, bool) or x is None or isinstance(x, (str, int)):
        return x
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return float(Decimal(repr(x)).quantize(Decimal("1e-6"), rounding=ROUND_HALF_EVEN))
    if isinstance(x, dict):
        return {str(k): _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    if isinstance(x, np.generic):
        return _round(x.item())
    return x


def dumps(report: RiskReport) -> str:
    """Stable JSON: sorted keys, floats at 6 decimals (half-even)."""
    return json.dumps(_round(report.to_dict()), sort_keys=True, indent=2) + "\n"


def write_report(report: RiskReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(dumps(report))
    (out_dir / "metrics.csv").write_text(metrics_csv(report))
    return path


def load_report(path) -> RiskReport:
    return RiskReport.from_dict(json.loads(Path(path).read_text()))


def metrics_csv(report: RiskReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "attack", "threat_model", "metric", "mean", "std", "n_runs"])
    for r in report.to_dict()["results"]:
        for name, m in r["metrics"].items():
            w.writerow([r["target"], r["attack"], r["threat_model"], name, *(_round(m[k]) for k in ("mean", "std", "n_runs"))])
    return buf.getvalue()


def write_roc(path, fpr, tpr) -> None:
    lines = ["fpr,tpr"] + [f"{_round(float(a))},{_round(float(b))}" for a, b in zip(fpr, tpr)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_roc(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]


# ---------------------------------------------------------------------------
# figures


def plot_report(report: RiskReport, out_dir, base_dir=None) -> list[Path]:
    """Bar chart of each attack's headline metric plus one ROC figure per ROC file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_dir = Path(base_dir) if base_dir else out_dir
    written = []

    d = report.to_dict()["results"]
    labels, means, stds = [], [], []
    for r in d:
        tm = ThreatModel.parse(r["threat_model"])
        name = primary_metric(Attack(r["attack"]), tm)
        if name in r["metrics"]:
            labels.append(f"{r['attack']}\n{r['threat_model']}\n({name})")
            means.append(r["metrics"][name]["mean"])
            stds.append(r["metrics"][name]["std"])
    fig, ax = plt.subplots(figsize=(max(4, 1.3 * len(labels)), 3.5))
    ax.bar(range(len(labels)), means, yerr=stds, capsize=3, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("score")
    ax.grid(axis="y", linestyle=":")
    fig.tight_layout()
    path = out_dir / "attacks_bar.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    for r in d:
        roc_files = [v for k, v in r["artifacts"].items() if k.startswith("roc")]
        if not roc_files:
            continue
        fig, ax = plt.subplots(figsize=(3.5, 3.5))
        for f in roc_files:
            fpr, tpr = read_roc(base_dir / f)
            ax.plot(fpr, tpr, lw=1)
        ax.plot([0, 1], [0, 1], "k:", lw=0.8)
        ax.set_xlabel("FPR")
        ax.set_ylabel("TPR")
        ax.set_title(f"{r['attack']} {r['threat_model']}", fontsize=9)
        fig.tight_layout()
        path = out_dir / f"roc_{r['target']}_{r['attack']}_{r['threat_model']}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
