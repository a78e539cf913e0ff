"""On-disk formats: YAML configuration, dense dose binaries, scenario sidecars."""
from __future__ import annotations

import struct
from dataclasses import asdict, fields

import numpy as np
import yaml

from .phantom import CaseSpec, KernelParams
from .scenario import ScenarioSet

DOSE_MAGIC = b"DOSE"


def write_dose(path, matrix) -> None:
    """Little-endian header (magic, u32 rows, u32 cols) then row-major float64."""
    m = np.ascontiguousarray(np.atleast_2d(np.asarray(matrix, dtype="<f8")))
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(DOSE_MAGIC + struct.pack("<II", rows, cols))
        fh.write(m.tobytes(order="C"))


def read_dose(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12 or head[:4] != DOSE_MAGIC:
            raise ValueError(f"{path}: not a dose file")
        rows, cols = struct.unpack("<II", head[4:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {data.size}")
    return data.reshape(rows, cols).astype(float)


def case_to_dict(spec: CaseSpec) -> dict:
    d = asdict(spec)
    d["dims"] = list(spec.dims)
    d["spacing_mm"] = list(spec.spacing_mm)
    return d


def case_from_dict(doc: dict) -> CaseSpec:
    known = {f.name for f in fields(CaseSpec)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown case keys: {sorted(unknown)}")
    doc = dict(doc)
    if "kernel" in doc and isinstance(doc["kernel"], dict):
        doc["kernel"] = KernelParams(**doc["kernel"])
    return CaseSpec(**doc)


def load_yaml(path) -> dict:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return doc


def dump_yaml(doc: dict, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True, default_flow_style=None)


def write_scenarios(scen: ScenarioSet, stem, matrices=None) -> None:
    """Sidecar ``<stem>.yaml`` plus ``<stem>_p<k>.dose`` per realisation when matrices are given."""
    doc = {"displacements_mm": scen.displacements.tolist(), "probabilities": scen.probabilities.tolist(),
           "seed": scen.seed, "sigma_mm": scen.sigma_mm}
    dump_yaml(doc, f"{stem}.yaml")
    for k, m in enumerate(matrices or []):
        write_dose(f"{stem}_p{k}.dose", m)


def read_scenarios(stem) -> ScenarioSet:
    doc = load_yaml(f"{stem}.yaml")
    return ScenarioSet(np.asarray(doc["displacements_mm"]), np.asarray(doc["probabilities"]),
                       doc.get("seed"), float(doc.get("sigma_mm", 0.0)))
