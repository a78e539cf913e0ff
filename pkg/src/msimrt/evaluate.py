"""Plan-quality metrics over simulated traces.

Conventions: coverage counts doses ``>= T-``; hotspots count doses
``> 1.1 T+``; the DVH counts doses ``> d``.  Flags switch each to the other
reading.  K-intervals are ``mean -/+ 1.645 s`` with the Bessel-corrected
standard deviation and are never clipped in tables.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .simulate import EvaluationBank, SimulationTrace

Z90 = 1.645
HOTSPOT_FACTOR = 1.1


def _nonempty(doses, what="tissue"):
    d = np.asarray(doses, dtype=float).ravel()
    if d.size == 0:
        raise ValueError(f"empty {what}")
    return d


def coverage(doses, t_minus, inclusive: bool = True) -> float:
    """Fraction of tumour voxels reaching the minimum prescription."""
    d = _nonempty(doses, "tumour")
    hit = d >= t_minus if inclusive else d > t_minus
    return float(np.count_nonzero(hit)) / d.size


def hotspot(doses, t_plus, strict: bool = True) -> float:
    """Percentage of voxels above 110% of the maximum prescription."""
    d = _nonempty(doses)
    lim = HOTSPOT_FACTOR * np.asarray(t_plus, dtype=float)
    hot = d > lim if strict else d >= lim
    return 100.0 * float(np.count_nonzero(hot)) / d.size


def dvh(doses, d_grid, strict: bool = True) -> np.ndarray:
    """Percentage of voxels receiving more than each grid dose."""
    d = np.sort(_nonempty(doses, "dose vector"))
    grid = np.asarray(d_grid, dtype=float)
    if (np.diff(grid) < 0).any():
        raise ValueError("d_grid must be sorted ascending")
    side = "right" if strict else "left"
    return 100.0 * (d.size - np.searchsorted(d, grid, side=side)) / d.size


def k_interval(samples) -> tuple[float, float]:
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < 2:
        raise ValueError("a K-interval needs at least two samples")
    m, sd = float(s.mean()), float(s.std(ddof=1))
    return m - Z90 * sd, m + Z90 * sd


def penalties(z, r_plus, r_minus=None, t_plus=None, t_minus=None) -> dict[str, float]:
    """Average per-fraction (theta) and end-of-course (gamma) over/underdose of one tissue.

    ``z`` is (F, n_voxels); the underdose terms are only reported when
    ``r_minus``/``t_minus`` are given (tumours).
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = z.shape[1]
    if n == 0:
        raise ValueError("empty tissue")
    total = z.sum(axis=0)
    out = {"theta_plus": float(np.maximum(z - r_plus, 0.0).sum() / n)}
    if t_plus is not None:
        out["gamma_plus"] = float(np.maximum(total - t_plus, 0.0).sum() / n)
    if r_minus is not None:
        out["theta_minus"] = float(np.maximum(r_minus - z, 0.0).sum() / n)
    if t_minus is not None:
        out["gamma_minus"] = float(np.maximum(t_minus - total, 0.0).sum() / n)
    return out


@dataclass
class EvaluationReport:
    case_id: str
    model_id: str
    n_runs: int
    seed: int
    intervals: dict[str, dict[str, tuple[float, float, float]]]  # tissue -> metric -> (lo, mean, hi)
    dvh_grid: np.ndarray
    dvh_bands: dict[str, np.ndarray]  # tissue -> (len(grid), 3) lo/mean/hi
    provenance: dict = field(default_factory=dict)

    def metric(self, tissue: str, name: str) -> tuple[float, float, float]:
        return self.intervals[tissue][name]

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "model_id": self.model_id,
            "n_runs": self.n_runs,
            "seed": self.seed,
            "intervals": {t: {m: list(v) for m, v in ms.items()} for t, ms in self.intervals.items()},
            "dvh_grid": self.dvh_grid.tolist(),
            "dvh_bands": {t: b.tolist() for t, b in self.dvh_bands.items()},
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvaluationReport":
        return cls(doc["case_id"], doc["model_id"], int(doc["n_runs"]), int(doc["seed"]),
                   {t: {m: tuple(v) for m, v in ms.items()} for t, ms in doc["intervals"].items()},
                   np.asarray(doc["dvh_grid"]), {t: np.asarray(b) for t, b in doc["dvh_bands"].items()},
                   dict(doc.get("provenance", {})))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EvaluationReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def table(self) -> str:
        lines = [f"# case={self.case_id} model={self.model_id} runs={self.n_runs} seed={self.seed}",
                 f"{'tissue':<14}{'metric':<16}{'lo':>14}{'mean':>14}{'hi':>14}"]
        for tissue, ms in self.intervals.items():
            for name, (lo, m, hi) in ms.items():
                lines.append(f"{tissue:<14}{ROW_LABELS.get(name, name):<16}{lo:>14.6f}{m:>14.6f}{hi:>14.6f}")
        return "\n".join(lines) + "\n"

    def write_dvh(self, directory) -> list[str]:
        written = []
        for tissue, band in self.dvh_bands.items():
            path = f"{directory}/dvh_{tissue}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["d", "lo", "mean", "hi"])
                for d, (lo, m, hi) in zip(self.dvh_grid, band):
                    w.writerow([f"{d:.6f}", f"{lo:.6f}", f"{m:.6f}", f"{hi:.6f}"])
            written.append(path)
        return written


ROW_LABELS = {
    "coverage": "K(Coverage)",
    "min_dose": "K(min D)",
    "max_dose": "K(max D)",
    "hotspot": "K(H)",
    "theta_plus": "K(Theta+)",
    "theta_minus": "K(Theta-)",
    "gamma_plus": "K(Gamma+)",
    "gamma_minus": "K(Gamma-)",
}


def _band(samples) -> tuple[float, float, float]:
    lo, hi = k_interval(samples)
    return lo, float(np.mean(samples)), hi


def default_dvh_grid(bank: EvaluationBank, traces: list[SimulationTrace], step: float = 1.0) -> np.ndarray:
    top = max(float(t.cumulative.max()) for t in traces) if traces else 0.0
    hi = max(step, np.ceil(top / step) * step)
    return np.arange(0.0, hi + step / 2, step)


def evaluate(traces: list[SimulationTrace], bank: EvaluationBank, case_id: str = "case", model_id: str = "model",
             seed: int = 0, d_grid=None) -> EvaluationReport:
    if len(traces) < 2:
        raise ValueError("evaluation needs at least two traces")
    F = traces[0].F
    grid = default_dvh_grid(bank, traces) if d_grid is None else np.asarray(d_grid, dtype=float)
    intervals: dict[str, dict] = {}
    bands = {}
    for t in bank.tissues:
        doses = [tr.cumulative[t.index] for tr in traces]
        curves = np.stack([dvh(d, grid) for d in doses])
        sd = curves.std(axis=0, ddof=1)
        mean = curves.mean(axis=0)
        bands[t.name] = np.stack([mean - Z90 * sd, mean, mean + Z90 * sd], axis=1)
        if t.kind == "zone":
            continue
        ms: dict[str, tuple] = {}
        if t.kind == "tumor":
            ms["coverage"] = _band([coverage(d, t.t_min) for d in doses])
        ms["min_dose"] = _band([float(d.min()) for d in doses])
        ms["max_dose"] = _band([float(d.max()) for d in doses])
        ms["hotspot"] = _band([hotspot(d, t.t_max) for d in doses])
        pens = []
        for tr in traces:
            z = tr.z[:, t.index]
            if t.kind == "tumor":
                pens.append(penalties(z, t.t_max / F, t.t_min / F, t.t_max, t.t_min))
            else:
                pens.append(penalties(z, t.t_max / F, None, t.t_max, None))
        for key in ("theta_plus", "theta_minus", "gamma_plus", "gamma_minus"):
            if key in pens[0]:
                ms[key] = _band([p[key] for p in pens])
        intervals[t.name] = ms
    return EvaluationReport(case_id, model_id, len(traces), int(seed), intervals, grid, bands,
                            {"fractions": F})


def mean_band_width(report: EvaluationReport, tissue: str) -> float:
    """Average hi - lo of the DVH band over the dose grid."""
    band = report.dvh_bands[tissue]
    return float((band[:, 2] - band[:, 0]).mean())


def compare(a: EvaluationReport, b: EvaluationReport) -> list[dict]:
    """Side-by-side intervals and width ratios (``b`` width over ``a`` width)."""
    if a.case_id != b.case_id:
        raise ValueError(f"reports belong to different cases: {a.case_id!r} vs {b.case_id!r}")
    rows = []
    for tissue, ms in a.intervals.items():
        if tissue not in b.intervals:
            continue
        for name, (lo_a, m_a, hi_a) in ms.items():
            if name not in b.intervals[tissue]:
                continue
            lo_b, m_b, hi_b = b.intervals[tissue][name]
            wa, wb = hi_a - lo_a, hi_b - lo_b
            ratio = 1.0 if wa == wb else (wb / wa if wa != 0 else float("inf"))
            rows.append({"tissue": tissue, "metric": name, "a": (lo_a, hi_a), "b": (lo_b, hi_b),
                         "width_a": wa, "width_b": wb, "width_ratio": ratio})
    return rows


def comparison_table(a: EvaluationReport, b: EvaluationReport) -> str:
    rows = compare(a, b)
    lines = [f"# case={a.case_id}: {a.model_id} vs {b.model_id}",
             f"{'tissue':<14}{'metric':<16}{a.model_id:>28}{b.model_id:>28}{'width ratio':>14}"]
    for r in rows:
        ka = f"[{r['a'][0]:.4f}, {r['a'][1]:.4f}]"
        kb = f"[{r['b'][0]:.4f}, {r['b'][1]:.4f}]"
        lines.append(f"{r['tissue']:<14}{ROW_LABELS.get(r['metric'], r['metric']):<16}{ka:>28}{kb:>28}"
                     f"{r['width_ratio']:>14.4f}")
    return "\n".join(lines) + "\n"
