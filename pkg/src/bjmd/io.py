"""On-disk formats: headerless CSV matrices, YAML manifests and synth specs, JSON reports."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .core import BJMDError, Hyperparams, ModelState, MultiViewData, SolverConfig
from .datagen import SynthSpec

FLOAT_FMT = "%.17g"


class FormatError(BJMDError, ValueError):
    pass


def write_matrix(path, A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    np.savetxt(path, A, fmt=FLOAT_FMT, delimiter=",")


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    rows = []
    try:
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from None
                if len(rows[-1]) != len(rows[0]):
                    raise FormatError(f"{path}:{lineno}: expected {len(rows[0])} values, found {len(rows[-1])}")
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    if not rows:
        raise FormatError(f"{path}: empty matrix file")
    return np.array(rows, dtype=float)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _load_yaml(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f":{mark.line + 1}" if mark is not None else ""
        raise FormatError(f"{path}{where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a mapping at top level")
    return doc


# -- synthetic spec -----------------------------------------------------------

def load_synth_spec(path) -> SynthSpec:
    doc = _load_yaml(path)
    known = set(SynthSpec.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise FormatError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return SynthSpec(**doc)
    except TypeError as exc:
        raise FormatError(f"{path}: {exc}") from None


def dump_synth_spec(spec: SynthSpec, path):
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))


# -- manifest -----------------------------------------------------------------

@dataclass
class SourceEntry:
    name: str
    matrix: str
    labels: str | None = None


@dataclass
class Manifest:
    sources: list
    K: int
    hyper: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    seed: int = 0
    base_dir: Path = field(default=Path("."), repr=False)

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def hyperparams(self) -> Hyperparams:
        h = dict(self.hyper)
        alpha0 = h.pop("alpha0", 1.1)
        lam = h.pop("lambda", h.pop("lam", 1.0))
        if np.isscalar(alpha0):
            alpha0 = np.full(self.K, float(alpha0))
        return Hyperparams(lam=float(lam), alpha0=np.asarray(alpha0, dtype=float), a0=float(h.pop("a0", 1.0)),
                           b0=float(h.pop("b0", 1.0)))

    @property
    def engine(self) -> str:
        return self.solver.get("engine", "map")

    def solver_config(self, engine=None) -> SolverConfig:
        engine = engine or self.engine
        opts = {k: v for k, v in self.solver.items() if k != "engine"}
        if engine == "advi":
            return SolverConfig.advi_defaults(**opts)
        return SolverConfig(**opts)

    def load_data(self) -> MultiViewData:
        return MultiViewData([read_matrix(self.resolve(s.matrix)) for s in self.sources])

    def load_labels(self):
        out = []
        for s in self.sources:
            if s.labels is None:
                raise FormatError(f"source {s.name!r} has no labels file")
            out.append(read_matrix(self.resolve(s.labels)).astype(int))
        return out

    def to_dict(self):
        return {
            "sources": [{k: v for k, v in asdict(s).items() if v is not None} for s in self.sources],
            "K": self.K,
            "hyper": self.hyper,
            "solver": self.solver,
            "seed": self.seed,
        }

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def load_manifest(path, check_files=True) -> Manifest:
    path = Path(path)
    doc = _load_yaml(path)
    try:
        raw_sources = doc["sources"]
        K = int(doc["K"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: missing or invalid field {exc}") from None
    if not raw_sources:
        raise FormatError(f"{path}: at least one source is required")
    if K < 1:
        raise FormatError(f"{path}: K must be >= 1")
    sources = []
    for i, s in enumerate(raw_sources):
        if not isinstance(s, dict) or "matrix" not in s:
            raise FormatError(f"{path}: source {i} needs a 'matrix' entry")
        sources.append(SourceEntry(str(s.get("name", f"source_{i + 1}")), str(s["matrix"]), s.get("labels")))
    m = Manifest(sources, K, dict(doc.get("hyper") or {}), dict(doc.get("solver") or {}), int(doc.get("seed", 0)),
                 path.parent)
    if check_files:
        for s in sources:
            for rel in (s.matrix, s.labels):
                if rel is not None and not m.resolve(rel).exists():
                    raise FormatError(f"{path}: referenced file {rel} does not exist")
    return m


# -- fit outputs --------------------------------------------------------------

def write_state(out_dir, state: ModelState, names=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "W.csv", state.W)
    for c, h in enumerate(state.H):
        write_matrix(out / f"H_{c + 1}.csv", h)
    names = names or [f"source_{c + 1}" for c in range(len(state.H))]
    write_json(out / "sigma2.json", {
        "sources": list(names),
        "sigma2": [float(v) for v in state.sigma2],
        "sigma": [float(np.sqrt(v)) for v in state.sigma2],
    })


def read_fit(fit_dir, C=None):
    """Return ``(W, H list, sigma2)`` written by :func:`write_state`."""
    d = Path(fit_dir)
    s = json.loads((d / "sigma2.json").read_text())
    sigma2 = np.array(s["sigma2"], dtype=float)
    C = C or sigma2.size
    H = [read_matrix(d / f"H_{c + 1}.csv") for c in range(C)]
    return read_matrix(d / "W.csv"), H, sigma2


def write_trace(path, trace, times):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "elapsed"])
        for i, (f, t) in enumerate(zip(trace, times)):
            w.writerow([i, FLOAT_FMT % f, "%.6f" % t])


def write_rows(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})
