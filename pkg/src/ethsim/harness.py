"""Scenario files, ensemble runs and their serialized outputs.

A scenario is a JSON document validated against ``schema/scenario.schema.json``
plus semantic checks (dimensions, partitions, unitarity). Running it samples
``trials`` collapse trajectories and writes

* ``trajectories.jsonl``: one record per collapse step, the source of truth;
* ``report.json``: aggregate statistics recomputed from those records;
* CSV summaries for the regimes that define them.

Trajectory ``t`` always draws from ``trajectory_rng(seed, t)``, so a run is
reproducible bit for bit regardless of how many worker processes are used.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Iterator

import jsonschema
import numpy as np

from . import __version__
from .collapse import MIXTURE_TOL, collapse_from_pre, trajectory_rng
from .errors import EthsimError, InvariantError, ScenarioError, ValidationError
from .evolve import (
    CONVENTIONS,
    FieldSequence,
    SliceObservable,
    TruncatedChain,
    heisenberg_expectation,
    oracle_cap,
    step_pre_collapse,
)
from .histories import EffectiveState, check_consistency, enumerate_tree, history_probability_oracle
from .kraus import KrausFamily, kraus_from_unitary
from .matcore import (
    DEFAULT_CLUSTER_TOL,
    DEFAULT_TOL,
    as_density,
    as_unitary,
    dagger,
    kron,
    matrix_power,
    operator_norm,
    partial_trace_first,
    random_unitary,
)
from .models import (
    ClassicalChain,
    DetectorScenario,
    MeasurementModel,
    ThermalEnvironment,
    classical_transition,
    classify_rank_one,
    detector_scenario,
    double_sum_step,
    sample_field_block,
    standard_partition,
    strong_coupling_model,
    thermal_average_step,
    thermal_environment,
    thermal_g_matrix,
    weak_coupling_model,
)

DEFAULT_PRUNE = 1e-9
CLICK_THRESHOLD = 0.5
LOG_MODES = ("full", "summaryOnly")


def _load_schema() -> dict:
    text = resources.files("ethsim").joinpath("schema/scenario.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


SCHEMA = _load_schema()


# complex matrices <-> JSON -----------------------------------------------------


def matrix_to_json(a) -> list:
    """Row-major nested ``[re, im]`` pairs."""
    a = np.asarray(a, dtype=np.complex128)
    return [[[float(z.real), float(z.imag)] for z in row] for row in a]


def matrix_from_json(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValidationError("matrix must be a rectangular array of [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


def _shape_of(x) -> tuple[int, int] | None:
    """Shape of a JSON matrix, or ``None`` if the rows are ragged."""
    rows = len(x)
    cols = {len(r) for r in x}
    return (rows, cols.pop()) if len(cols) == 1 else None


# scenario ----------------------------------------------------------------------


@dataclass(frozen=True)
class Tolerances:
    cluster: float = DEFAULT_CLUSTER_TOL
    mixture: float = MIXTURE_TOL
    unitarity: float = DEFAULT_TOL
    prune: float = DEFAULT_PRUNE


@dataclass(frozen=True)
class OutputSpec:
    dir: str | None = None
    log: str = "full"


@dataclass(frozen=True)
class Scenario:
    """A validated scenario. Sub-specs are kept as canonical JSON dictionaries."""

    name: str
    N: int
    M: int
    model: dict
    steps: int
    trials: int
    seed: int
    L: int | None = None
    V: dict = field(default_factory=lambda: {"type": "identity"})
    initial_state: dict = field(default_factory=lambda: {"type": "basis", "index": 0})
    field_spec: dict = field(default_factory=lambda: {"type": "vacuum"})
    tolerances: Tolerances = Tolerances()
    output: OutputSpec = OutputSpec()
    description: str = ""

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"name": self.name}
        if self.description:
            out["description"] = self.description
        out["N"] = self.N
        out["M"] = self.M
        if self.L is not None:
            out["L"] = self.L
        out["model"] = self.model
        if self.model["type"] != "detector":  # the detector builds its own V
            out["V"] = self.V
        out["initial_state"] = self.initial_state
        out["field"] = self.field_spec
        out["steps"] = self.steps
        out["trials"] = self.trials
        out["seed"] = self.seed
        t = self.tolerances
        out["tolerances"] = {"cluster": t.cluster, "mixture": t.mixture, "unitarity": t.unitarity, "prune": t.prune}
        o = {"log": self.output.log}
        if self.output.dir is not None:
            o["dir"] = self.output.dir
        out["output"] = o
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def with_overrides(self, seed: int | None = None, trials: int | None = None) -> "Scenario":
        s = self
        if seed is not None:
            s = replace(s, seed=int(seed))
        if trials is not None:
            if trials < 1:
                raise ScenarioError(["trials: must be at least 1"])
            s = replace(s, trials=int(trials))
        return s


def _fmt_path(path: Iterable) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _schema_errors(doc: Any) -> list[str]:
    """Every schema violation, with ``oneOf`` failures narrowed to the branch named by ``type``."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    out: list[str] = []

    def type_rejected(subs) -> bool:
        return any(s.validator in ("const", "enum") and list(s.relative_path) == ["type"] for s in subs)

    def branches(err) -> list[list]:
        """Error groups of the ``oneOf`` branches whose ``type`` matched."""
        groups: dict[int, list] = {}
        for sub in err.context:
            groups.setdefault(sub.schema_path[0], []).append(sub)
        found = []
        for subs in groups.values():
            if type_rejected(subs):
                continue
            if len(subs) == 1 and subs[0].validator == "oneOf" and not subs[0].relative_path:
                found.extend(branches(subs[0]))
            else:
                found.append(subs)
        return found

    def explain(err) -> None:
        if err.validator == "oneOf" and err.context and isinstance(err.instance, dict) and "type" in err.instance:
            chosen = branches(err)
            if len(chosen) == 1:
                for sub in chosen[0]:
                    explain(sub)
                return
            if not chosen:
                out.append(f"{_fmt_path(list(err.absolute_path) + ['type'])}: unknown type {err.instance['type']!r}")
                return
        out.append(f"{_fmt_path(err.absolute_path)}: {err.message}")

    for err in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path))):
        explain(err)
    return out


def _check_matrix(errors, path, x, shape) -> bool:
    s = _shape_of(x)
    if s != shape:
        errors.append(f"{path}: expected a {shape[0]}x{shape[1]} matrix, got {'ragged' if s is None else f'{s[0]}x{s[1]}'}")
        return False
    return True


def _check_blocks(errors, path, blocks, m) -> None:
    flat = [i for b in blocks for i in b]
    if sorted(flat) != list(range(m)):
        errors.append(f"{path}: blocks must partition 0..{m - 1} (each index exactly once)")


def _check_coupling(errors, path, spec, n, m) -> int | None:
    """Semantic checks of a coupling spec; returns its number of projections L."""
    kind = spec["type"]
    if kind == "measurement":
        for i, t in enumerate(spec["T"]):
            _check_matrix(errors, f"{path}.T[{i}]", t, (n, n))
        for i, q in enumerate(spec["Q"]):
            _check_matrix(errors, f"{path}.Q[{i}]", q, (m, m))
        if len(spec["T"]) != len(spec["Q"]):
            errors.append(f"{path}: {len(spec['T'])} field unitaries T for {len(spec['Q'])} projections Q")
        return len(spec["Q"])
    if kind == "weak":
        blocks = spec.get("blocks", [[i] for i in range(m)])
        _check_blocks(errors, f"{path}.blocks", blocks, m)
        if "tau" in spec:
            if len(spec["tau"]) != len(blocks):
                errors.append(f"{path}.tau: {len(spec['tau'])} generators for {len(blocks)} blocks")
            for i, t in enumerate(spec["tau"]):
                _check_matrix(errors, f"{path}.tau[{i}]", t, (n, n))
        return len(blocks)
    if kind == "strong":
        if n < m:
            errors.append(f"{path}: strong coupling needs N >= M (N={n}, M={m})")
        return m
    return None


def _semantic_errors(doc: dict) -> list[str]:
    errors: list[str] = []
    n, m = doc["N"], doc["M"]
    model = doc["model"]
    kind = model["type"]
    n_out: int | None = None
    if kind == "unitary":
        _check_matrix(errors, "model.U", model["U"], (n * m, n * m))
    elif kind == "detector":
        wd = model["weak_dim"]
        if wd >= m:
            errors.append(f"model.weak_dim: must be < M={m} so that the strong subspace is non-empty")
        elif model["J"] > wd:
            errors.append(f"model.J: split J={model['J']} exceeds weak_dim={wd}")
        elif n < m - wd + 1:
            errors.append(f"N: detector needs N >= {m - wd + 1}")
        else:
            n_out = model["J"] + m - wd
        if "V" in doc:
            errors.append("V: the detector model generates its own V; remove this field")
    elif kind == "thermal":
        w, r = model["weights"], model["ranks"]
        if len(w) != len(r):
            errors.append(f"model.ranks: {len(r)} ranks for {len(w)} weights")
        if sum(r) > n:
            errors.append(f"model.ranks: total rank {sum(r)} exceeds N={n}")
        if any(w[i] <= w[i + 1] for i in range(len(w) - 1)):
            errors.append("model.weights: must be strictly decreasing")
        if abs(sum(w) - 1.0) > 1e-12:
            errors.append(f"model.weights: must sum to 1 (sum {sum(w)!r})")
        n_out = _check_coupling(errors, "model.coupling", model["coupling"], n, m)
    else:
        n_out = _check_coupling(errors, "model", model, n, m)
    if "L" in doc:
        if n_out is None and kind in ("identity", "unitary"):
            pass
        elif n_out is not None and doc["L"] != n_out:
            errors.append(f"L: declared L={doc['L']} but the model has {n_out} projections")
        if doc["L"] > m:
            errors.append(f"L: L={doc['L']} exceeds M={m}")

    v = doc.get("V", {"type": "identity"})
    if v["type"] == "explicit":
        _check_matrix(errors, "V.matrix", v["matrix"], (m, m))

    st = doc.get("initial_state", {"type": "basis", "index": 0})
    if st["type"] == "basis" and st["index"] >= m:
        errors.append(f"initial_state.index: {st['index']} out of range 0..{m - 1}")
    if st["type"] == "diagonal":
        if len(st["weights"]) != m:
            errors.append(f"initial_state.weights: expected {m} weights, got {len(st['weights'])}")
        if abs(sum(st["weights"]) - 1.0) > 1e-12:
            errors.append("initial_state.weights: must sum to 1")
    if st["type"] == "explicit":
        _check_matrix(errors, "initial_state.matrix", st["matrix"], (m, m))

    fs = doc.get("field")
    if fs is not None:
        if fs["type"] == "thermal" and kind != "thermal":
            errors.append("field.type: a thermal field needs a thermal model")
        if fs["type"] != "thermal" and kind == "thermal":
            errors.append("field.type: a thermal model needs field type 'thermal'")
        if fs["type"] == "explicit":
            for j, k in enumerate(fs["k"]):
                if k >= n:
                    errors.append(f"field.k[{j}]: index {k} out of range 0..{n - 1}")
    return errors


def scenario_from_dict(doc: Any) -> Scenario:
    """Validate a decoded JSON document; raises :class:`ScenarioError` listing every problem."""
    errors = _schema_errors(doc)
    if errors:
        raise ScenarioError(errors)
    errors = _semantic_errors(doc)
    if errors:
        raise ScenarioError(errors)
    kind = doc["model"]["type"]
    tol = doc.get("tolerances", {})
    out = doc.get("output", {})
    sc = Scenario(
        name=doc["name"],
        description=doc.get("description", ""),
        N=doc["N"],
        M=doc["M"],
        L=doc.get("L"),
        model=doc["model"],
        V=doc.get("V", {"type": "identity"}),
        initial_state=doc.get("initial_state", {"type": "basis", "index": 0}),
        field_spec=doc.get("field", {"type": "thermal" if kind == "thermal" else "vacuum"}),
        steps=doc["steps"],
        trials=doc["trials"],
        seed=doc["seed"],
        tolerances=Tolerances(
            cluster=float(tol.get("cluster", DEFAULT_CLUSTER_TOL)),
            mixture=float(tol.get("mixture", MIXTURE_TOL)),
            unitarity=float(tol.get("unitarity", DEFAULT_TOL)),
            prune=float(tol.get("prune", DEFAULT_PRUNE)),
        ),
        output=OutputSpec(dir=out.get("dir"), log=out.get("log", "full")),
    )
    try:
        build(sc)
    except ValidationError as exc:
        raise ScenarioError([f"model: {exc}"]) from exc
    return sc


def parse_scenario(path: str | os.PathLike) -> Scenario:
    """Read and validate a scenario file."""
    p = Path(path)
    if not p.is_file():
        raise ScenarioError([f"{p}: no such scenario file"])
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"{p}: invalid JSON ({exc})"]) from exc
    return scenario_from_dict(doc)


def bundled_scenarios() -> list[Path]:
    """Paths of the scenario files shipped with the package."""
    root = resources.files("ethsim").joinpath("scenarios")
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".json") and ".expected" not in p.name)


# building ---------------------------------------------------------------------


@dataclass
class BuiltScenario:
    """Numerical objects derived from a :class:`Scenario`."""

    scenario: Scenario
    v: np.ndarray
    rho0: np.ndarray
    u: np.ndarray | None = None
    family: KrausFamily | None = None
    fseq: FieldSequence | None = None
    model: MeasurementModel | None = None
    env: ThermalEnvironment | None = None
    detector: DetectorScenario | None = None
    thermal_g: tuple[np.ndarray, ...] = ()
    strong_frame: tuple[np.ndarray, ...] = ()
    chain: ClassicalChain | None = None

    @property
    def kind(self) -> str:
        return self.scenario.model["type"]


def _build_v(spec: dict, m: int, tol: float) -> np.ndarray:
    if spec["type"] == "identity":
        return np.eye(m, dtype=np.complex128)
    if spec["type"] == "random":
        return random_unitary(m, np.random.default_rng(spec["seed"]))
    return as_unitary(matrix_from_json(spec["matrix"]), tol, "V")


def _build_rho0(spec: dict, m: int) -> np.ndarray:
    kind = spec["type"]
    if kind == "basis":
        rho = np.zeros((m, m), dtype=np.complex128)
        rho[spec["index"], spec["index"]] = 1.0
        return rho
    if kind == "maximally_mixed":
        return np.eye(m, dtype=np.complex128) / m
    if kind == "diagonal":
        return np.diag(np.asarray(spec["weights"], dtype=float)).astype(np.complex128)
    return as_density(matrix_from_json(spec["matrix"]), name="initial state")


def _build_coupling(spec: dict, n: int, m: int, v: np.ndarray, tol: float) -> MeasurementModel:
    kind = spec["type"]
    if kind == "measurement":
        ts = tuple(matrix_from_json(t) for t in spec["T"])
        qs = tuple(matrix_from_json(q) for q in spec["Q"])
        return MeasurementModel(ts, qs, v, tol)
    rng = np.random.default_rng(spec.get("seed", 0))
    if kind == "weak":
        part = standard_partition(m, spec.get("blocks"))
        gens = [matrix_from_json(t) for t in spec["tau"]] if "tau" in spec else None
        return weak_coupling_model(n, part, v, spec["eps"], generators=gens, rng=rng)
    return strong_coupling_model(n, v, spec["eps"], rng)


def build(sc: Scenario) -> BuiltScenario:
    """Construct ``U``, Kraus family, ``V``, ``Ω_0`` and the field sequence."""
    n, m, tol = sc.N, sc.M, sc.tolerances.unitarity
    spec = sc.model
    kind = spec["type"]
    v = _build_v(sc.V, m, tol)
    rho0 = _build_rho0(sc.initial_state, m)
    out = BuiltScenario(sc, v, rho0)
    if kind == "identity":
        out.u = np.eye(n * m, dtype=np.complex128)
    elif kind == "unitary":
        out.u = as_unitary(matrix_from_json(spec["U"]), tol, "U")
    elif kind == "detector":
        det = detector_scenario(
            n, spec["weak_dim"], m - spec["weak_dim"], spec["J"], spec["delta"], spec["eps"],
            np.random.default_rng(spec.get("seed", 0)),
        )
        out.detector, out.model, out.v = det, det.model, det.model.v
    elif kind == "thermal":
        out.model = _build_coupling(spec["coupling"], n, m, v, tol)
        out.env = thermal_environment(n, spec["weights"], spec["ranks"])
        out.thermal_g = tuple(thermal_g_matrix(out.model, p).g for p in out.env.projections)
    else:
        out.model = _build_coupling(spec, n, m, v, tol)
    if out.model is not None and kind != "thermal":
        out.u = out.model.unitary()
    if out.u is not None:
        out.family = kraus_from_unitary(out.u, n, m, tol)
    if kind == "detector" and np.trace(rho0 @ out.detector.strong_projection).real > 1e-12:
        raise ValidationError("detector initial state must lie in the weakly coupled subspace")
    if sc.field_spec["type"] == "explicit":
        out.fseq = FieldSequence(tuple(sc.field_spec["k"]), n, horizon=max(sc.steps, len(sc.field_spec["k"])))
    elif sc.field_spec["type"] == "vacuum":
        out.fseq = FieldSequence.vacuum(n, sc.steps)
    if kind == "strong":
        qs = out.model.partition
        out.strong_frame = tuple(out.v @ q @ dagger(out.v) for q in qs)
        basis = np.eye(m, dtype=np.complex128)
        mu0 = np.array([np.trace(rho0 @ q).real for q in qs])
        out.chain = classical_transition(out.v, basis, mu0 / mu0.sum())
    return out


# trajectories -------------------------------------------------------------------


def field_rng(master_seed: int, index: int) -> np.random.Generator:
    """Stream for thermal field sampling, independent of the collapse stream."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index), 1))
    return np.random.Generator(np.random.Philox(ss))


def simulate_trajectory(b: BuiltScenario, index: int) -> list[dict]:
    """Log records of trajectory ``index`` (one per collapse step)."""
    sc = b.scenario
    full = sc.output.log == "full"
    tol = sc.tolerances
    rng = trajectory_rng(sc.seed, index)
    frng = field_rng(sc.seed, index) if b.env is not None else None
    rho = b.rho0
    ref = b.rho0
    logp = 0.0
    strong_qs = b.model.partition[b.detector.split:] if b.detector is not None else ()
    records = []
    for n in range(1, sc.steps + 1):
        if b.env is not None:
            k = sample_field_block(b.env, frng)
            pre = double_sum_step(b.thermal_g[k], b.model.partition, b.model.v, rho)
        else:
            k = b.fseq[n - 1]
            pre = step_pre_collapse(rho, k, b.family, b.v)
        st = collapse_from_pre(pre, rng, n, k, tol.cluster, tol.mixture)
        rho = st.post_collapse
        ref = b.v @ ref @ dagger(b.v)
        logp += math.log(st.born_probability)
        rec: dict[str, Any] = {
            "trajectory": index,
            "step": n,
            "k": int(k),
            "event_size": st.event_size,
            "branch": st.branch + 1,
            "born_probability": float(st.born_probability),
            "log_probability": logp,
            "eigenvalues": [float(x) for x in st.eigenvalues],
            "probabilities": [float(x) for x in st.probabilities],
            "dropped_mass": float(st.dropped_mass),
            # the field-complement branch (tail orthogonal to Φ_{σⁿ(k)}) always has weight 0
            "field_complement_probability": 0.0,
            "mixture_residual": float(st.mixture_residual),
            "trace_residual": float(abs(np.trace(pre).real - 1.0)),
            "unitary_overlap": float(np.trace(rho @ ref).real),
        }
        if b.strong_frame:
            rec["label"] = classify_rank_one(rho, b.strong_frame)
        if b.detector is not None:
            rec["strong_overlaps"] = [float(np.trace(rho @ q).real) for q in strong_qs]
        if full:
            rec["pre_collapse"] = matrix_to_json(pre)
            rec["post_collapse"] = matrix_to_json(rho)
        records.append(rec)
    return records


_WORKER: BuiltScenario | None = None


def _init_worker(doc: dict) -> None:
    global _WORKER
    _WORKER = build(scenario_from_dict(doc))


def _simulate_chunk(indices: list[int]) -> list[list[dict]]:
    return [simulate_trajectory(_WORKER, i) for i in indices]


def iter_trajectories(b: BuiltScenario, threads: int = 1, chunk: int = 64) -> Iterator[list[dict]]:
    """Trajectory record lists in index order, optionally from a process pool."""
    trials = b.scenario.trials
    if threads <= 1 or trials < 2:
        for t in range(trials):
            yield simulate_trajectory(b, t)
        return
    chunks = [list(range(s, min(s + chunk, trials))) for s in range(0, trials, chunk)]
    with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(b.scenario.to_dict(),)) as pool:
        for batch in pool.map(_simulate_chunk, chunks):
            yield from batch


def dump_record(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"))


# aggregation ----------------------------------------------------------------------


class Aggregator:
    """Per-step statistics built from log records alone.

    Every quantity is a sum or a count, so partial aggregators over disjoint
    trajectory sets could be merged in any order.
    """

    def __init__(self, b: BuiltScenario):
        self.b = b
        steps = b.scenario.steps
        self.count = [0] * steps
        self.overlap_sum = [0.0] * steps
        self.overlap_sq = [0.0] * steps
        self.branch_counts = [Counter() for _ in range(steps)]
        self.event_sizes = [Counter() for _ in range(steps)]
        self.max_mixture = [0.0] * steps
        self.max_trace = [0.0] * steps
        self.k_counts: Counter = Counter()
        m = b.scenario.M
        self.state_sum = [np.zeros((m, m), dtype=np.complex128) for _ in range(steps)]
        self.has_states = b.scenario.output.log == "full"
        self.labels = [Counter() for _ in range(steps)]
        self.clicks: list[int | None] = []
        self.dwells: list[tuple[int | None, bool]] = []
        self.trajectories = 0

    def add_trajectory(self, records: list[dict]) -> None:
        self.trajectories += 1
        for r in records:
            i = r["step"] - 1
            self.count[i] += 1
            self.overlap_sum[i] += r["unitary_overlap"]
            self.overlap_sq[i] += r["unitary_overlap"] ** 2
            self.branch_counts[i][r["branch"]] += 1
            self.event_sizes[i][r["event_size"]] += 1
            self.max_mixture[i] = max(self.max_mixture[i], r["mixture_residual"])
            self.max_trace[i] = max(self.max_trace[i], r["trace_residual"])
            self.k_counts[r["k"]] += 1
            if self.has_states:
                self.state_sum[i] += matrix_from_json(r["post_collapse"])
            if "label" in r:
                self.labels[i][r["label"]] += 1
        if self.b.detector is not None:
            self._clicks(records)

    def _clicks(self, records: list[dict]) -> None:
        thr = self.b.scenario.model.get("click_threshold", CLICK_THRESHOLD)
        click, which, dwell = None, -1, 0
        for r in records:
            ov = r["strong_overlaps"]
            if click is None:
                if sum(ov) > thr:
                    click = r["step"]
                    which = int(np.argmax(ov))
                    dwell = 1 if ov[which] >= 0.9 else 0
                    if dwell == 0:
                        break
            elif ov[which] >= 0.9:
                dwell += 1
            else:
                self.clicks.append(click)
                self.dwells.append((dwell, False))
                return
        self.clicks.append(click)
        self.dwells.append((dwell if click is not None else None, click is not None and dwell > 0))

    def report(self) -> dict:
        sc = self.b.scenario
        per_step = []
        for i in range(sc.steps):
            c = self.count[i]
            mean = self.overlap_sum[i] / c if c else math.nan
            var = max(self.overlap_sq[i] / c - mean * mean, 0.0) if c else math.nan
            row = {
                "step": i + 1,
                "n": c,
                "unitary_overlap_mean": mean,
                "unitary_overlap_stderr": math.sqrt(var / c) if c else math.nan,
                "branch_counts": {str(k): v for k, v in sorted(self.branch_counts[i].items())},
                "event_size_counts": {str(k): v for k, v in sorted(self.event_sizes[i].items())},
                "max_mixture_residual": self.max_mixture[i],
                "max_trace_residual": self.max_trace[i],
            }
            if self.has_states and c:
                row["mean_state"] = matrix_to_json(self.state_sum[i] / c)
            per_step.append(row)
        out: dict[str, Any] = {
            "trajectories": self.trajectories,
            "steps": sc.steps,
            "records": sum(self.count),
            "per_step": per_step,
            "max_mixture_residual": max(self.max_mixture, default=0.0),
            "max_trace_residual": max(self.max_trace, default=0.0),
            "field_index_counts": {"n": sum(self.k_counts.values()), "counts": {str(k): v for k, v in sorted(self.k_counts.items())}},
        }
        if self.b.env is not None:
            out["field_index_counts"]["expected_p"] = list(self.b.env.weights)
        if self.b.chain is not None:
            out["strong_coupling"] = self._strong()
        if self.b.detector is not None:
            out["detector"] = self._detector()
        return out

    def _strong(self) -> dict:
        m = self.b.scenario.M
        predicted = self.b.chain.distributions(max(self.b.scenario.steps - 1, 0))
        rows = []
        for i in range(self.b.scenario.steps):
            n = self.count[i]
            occ = np.array([self.labels[i].get(j, 0) for j in range(m)], dtype=float) / max(n, 1)
            tv = 0.5 * float(np.abs(occ - predicted[i]).sum())
            rows.append({
                "step": i + 1,
                "n": n,
                "ambiguous": self.labels[i].get(-1, 0),
                "occupation": occ.tolist(),
                "predicted": predicted[i].tolist(),
                "tv_distance": tv,
            })
        return {
            "comparison": "label after step n vs classical distribution mu_{n-1}",
            "transition": self.b.chain.transition.tolist(),
            "per_step": rows,
            "max_tv_distance": max((r["tv_distance"] for r in rows), default=0.0),
        }

    def _detector(self) -> dict:
        sc = self.b.scenario
        horizon = sc.steps
        clicked = [t for t in self.clicks if t is not None]
        vals = sorted(horizon + 1 if t is None else t for t in self.clicks)
        delta = sc.model["delta"]
        min_dwell = 1.0 / (4.0 * delta) if delta > 0 else math.inf
        ok = total = 0
        for d, cut in self.dwells:
            if d is None:
                continue
            if d >= min_dwell:
                ok += 1
                total += 1
            elif not cut:
                total += 1
        hist = Counter(clicked)
        return {
            "n": len(self.clicks),
            "clicked": len(clicked),
            "censored": len(self.clicks) - len(clicked),
            "median_click_time": float(np.median(vals)) if vals else math.nan,
            "click_time_histogram": {str(k): v for k, v in sorted(hist.items())},
            "dwell_min_steps": min_dwell,
            "dwell_decided": total,
            "dwell_fraction": ok / total if total else None,
        }

    def click_rows(self) -> list[tuple]:
        return [
            (t, "" if c is None else c, "" if d is None else d, int(c is None))
            for t, (c, (d, _)) in enumerate(zip(self.clicks, self.dwells))
        ]


def read_log(path: str | os.PathLike) -> Iterator[list[dict]]:
    """Group the records of a trajectory log by trajectory."""
    current: list[dict] = []
    idx = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if idx is not None and rec["trajectory"] != idx:
                yield current
                current = []
            idx = rec["trajectory"]
            current.append(rec)
    if current:
        yield current


def summarize_log(path: str | os.PathLike, scenario: Scenario) -> dict:
    """Recompute the report statistics from a trajectory log.

    Trajectories without any record (``steps = 0``) are counted from the
    scenario since the log has nothing to say about them.
    """
    agg = Aggregator(build(scenario))
    for recs in read_log(path):
        agg.add_trajectory(recs)
    if scenario.steps == 0:
        agg.trajectories = scenario.trials
    return agg.report()


# running ---------------------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: Path
    report: dict
    log_path: Path
    report_path: Path


def run_ensemble(sc: Scenario, out_dir: str | os.PathLike | None = None, threads: int = 1) -> RunResult:
    """Sample ``sc.trials`` trajectories and write log, report and CSVs to ``out_dir``."""
    out = Path(out_dir or sc.output.dir or f"ethsim-out/{sc.name}")
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    b = build(sc)
    agg = Aggregator(b)
    log_path = out / "trajectories.jsonl"
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        for recs in iter_trajectories(b, threads):
            for rec in recs:
                fh.write(dump_record(rec) + "\n")
            agg.add_trajectory(recs)  # floats survive the JSON round trip unchanged
    if sc.steps == 0:
        agg.trajectories = sc.trials
    stats = agg.report()
    report = {
        "scenario": sc.to_dict(),
        "version": __version__,
        "conventions": dict(CONVENTIONS),
        "threads": threads,
        "wall_clock_seconds": time.perf_counter() - start,
        "statistics": stats,
    }
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if "strong_coupling" in stats:
        write_csv(
            out / "tv_distance.csv",
            ["step", "tv_distance", "n", "ambiguous"],
            [(r["step"], r["tv_distance"], r["n"], r["ambiguous"]) for r in stats["strong_coupling"]["per_step"]],
        )
    if "detector" in stats:
        write_csv(out / "click_times.csv", ["trajectory", "click_time", "dwell", "censored"], agg.click_rows())
    return RunResult(out, report, log_path, report_path)


def write_csv(path: Path, header: list[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# oracle ------------------------------------------------------------------------------


def oracle_steps(b: BuiltScenario, cap: int | None = None) -> int:
    """Largest ``n ≤ steps`` whose dense chain (``n+1`` slices) fits under the cap."""
    cap = oracle_cap() if cap is None else cap
    sc = b.scenario
    n = 0
    while n < sc.steps and sc.N ** (n + 2) * sc.M <= cap:
        n += 1
    return n


def _matrix_units(m: int) -> list[tuple[int, int, np.ndarray]]:
    out = []
    for i in range(m):
        for j in range(m):
            e = np.zeros((m, m), dtype=np.complex128)
            e[j, i] = 1.0  # tr(ρ E) = ρ[i, j]
            out.append((i, j, e))
    return out


def oracle_compare(b: BuiltScenario, cap: int | None = None) -> dict:
    """Reduced route vs dense route for every step the cap allows.

    For deterministic fields the observables are the atom matrix units, once
    with the identity on the field and once with the vacuum projector on the
    next unused slice. For a thermal field the averaged one-step channel is
    compared with the partial trace of ``U (Φ ⊗ Ω) U†``.
    """
    sc = b.scenario
    m = sc.M
    if b.env is not None:
        return _oracle_thermal(b)
    n_max = oracle_steps(b, cap)
    units = _matrix_units(m)
    vac = np.zeros((sc.N, sc.N), dtype=np.complex128)
    vac[0, 0] = 1.0
    observables = [SliceObservable.identity(), SliceObservable(0, (vac,))]
    labels = [b.fseq[j] for j in range(n_max + 1)]
    chain = TruncatedChain(labels, sc.N, b.rho0, max_dim=cap)
    worst = 0.0
    states = []
    fseq = FieldSequence(tuple(labels), sc.N)
    for n in range(n_max + 1):
        if n:
            chain.apply_interaction(n, b.u, b.v)
        rho = np.zeros((m, m), dtype=np.complex128)
        frame = matrix_power(b.v, -n)
        back = matrix_power(b.v, n)
        for i, j, e in units:
            for obs in observables:
                dense = chain.expectation(obs, n, frame @ e @ back)
                reduced = heisenberg_expectation(obs, e, b.rho0, fseq, b.family, b.v, n)
                worst = max(worst, abs(dense - reduced))
                if not obs.factors:
                    rho[i, j] = dense
        states.append(rho)
    return {"steps_checked": n_max, "max_diff": worst, "mean_state": [matrix_to_json(s) for s in states]}


def _oracle_thermal(b: BuiltScenario) -> dict:
    sc = b.scenario
    u = b.model.unitary()
    phi = b.env.density()
    rho_dense = np.array(b.rho0)
    rho_reduced = np.array(b.rho0)
    states = [rho_dense.copy()]
    worst = 0.0
    for _ in range(sc.steps):
        joint = u @ kron(phi, rho_dense) @ dagger(u)
        rho_dense = b.model.v @ partial_trace_first(joint, sc.N, sc.M) @ dagger(b.model.v)
        rho_reduced = thermal_average_step(b.env, b.model, rho_reduced)
        worst = max(worst, operator_norm(rho_dense - rho_reduced))
        states.append(rho_dense.copy())
    return {"steps_checked": sc.steps, "max_diff": worst, "mean_state": [matrix_to_json(s) for s in states]}


def sidecar_path(scenario_path: str | os.PathLike) -> Path:
    p = Path(scenario_path)
    return p.with_name(p.stem + ".expected.json")


def expected_statistics(b: BuiltScenario) -> dict:
    """Sidecar content: ensemble-mean atom state per step from the dense route."""
    res = oracle_compare(b)
    return {
        "name": b.scenario.name,
        "note": "mean_state[n] is E[Omega_n] from the dense oracle; the ensemble mean converges to it",
        "steps_checked": res["steps_checked"],
        "mean_state": res["mean_state"],
    }


# tree ----------------------------------------------------------------------------------


def tree_check(b: BuiltScenario, depth: int, prune: float | None = None, oracle_tol: float = 1e-9) -> dict:
    """Enumerate histories, check consistency and compare leaves with ``ω(H†H)``."""
    if b.family is None:
        raise ValidationError("history trees need a deterministic field (not thermal)")
    sc = b.scenario
    prune = sc.tolerances.prune if prune is None else prune
    fseq = b.fseq if b.fseq.horizon >= depth else FieldSequence(b.fseq.entries, sc.N, depth)
    root = EffectiveState(b.rho0, 0)
    tree = enumerate_tree(root, fseq, b.family, b.v, depth, prune, cluster_tol=sc.tolerances.cluster)
    violation = check_consistency(tree)
    worst = None
    if sc.N ** depth * sc.M <= oracle_cap():
        worst = 0.0
        for leaf in tree.leaves():
            path = tree.path(leaf)
            q = history_probability_oracle(root, fseq, b.u, b.family, b.v, path, sc.tolerances.cluster)
            worst = max(worst, abs(q - leaf.probability))
    return {
        "tree": tree,
        "consistency_violation": violation,
        "mass_balance": max(tree.mass_balance()),
        "leaves": len(tree.leaves()),
        "oracle_max_diff": worst,
    }


# regimes ---------------------------------------------------------------------------------

WEAK_EPS = (1e-1, 1e-2, 1e-3)
DETECTOR_DELTAS = (0.1, 0.05)


def run_regimes(
    out_dir: str | os.PathLike,
    seed: int = 2024,
    strong_trials: int = 10_000,
    detector_trials: int = 300,
    detector_horizon: int = 1000,
) -> dict:
    """Weak sweep, strong-coupling comparison and detector experiment with default instances.

    Writes ``weak_sweep.csv``, ``tv_distance.csv``, ``click_times.csv`` and
    ``regimes.json`` to ``out_dir`` and returns the summary with pass flags.
    """
    from .matcore import random_density
    from .models import detector_click_experiment, strong_coupling_compare, weak_coupling_sweep

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    summary: dict[str, Any] = {"seed": seed, "version": __version__}

    t0 = time.perf_counter()
    sweep = weak_coupling_sweep(3, standard_partition(3), random_unitary(3, rng), random_density(3, rng), WEAK_EPS, rng)
    write_csv(out / "weak_sweep.csv", ["eps", "deviation"], zip(sweep.eps.tolist(), sweep.deviations.tolist()))
    summary["weak"] = {
        "eps": sweep.eps.tolist(),
        "deviation": sweep.deviations.tolist(),
        "slope": sweep.slope,
        "pass": abs(sweep.slope - 1.0) <= 0.1,
        "seconds": time.perf_counter() - t0,
    }

    t0 = time.perf_counter()
    v = random_unitary(2, rng)
    strong = strong_coupling_model(2, v, 1e-3, rng)
    res = strong_coupling_compare(strong, np.eye(2), [1.0, 0.0], 10, strong_trials, seed)
    write_csv(
        out / "tv_distance.csv",
        ["step", "tv_distance", "n", "ambiguous"],
        [(i + 1, float(tv), strong_trials, int(np.sum(res.labels[:, i] < 0))) for i, tv in enumerate(res.tv_distances)],
    )
    summary["strong"] = {
        "trials": strong_trials,
        "tv_distances": res.tv_distances.tolist(),
        "max_tv_distance": float(res.tv_distances.max()),
        "ambiguous": res.ambiguous,
        "transition": res.chain.transition.tolist(),
        "pass": bool(res.tv_distances.max() <= 0.05 and res.ambiguous == 0),
        "seconds": time.perf_counter() - t0,
    }

    t0 = time.perf_counter()
    rows = []
    det: dict[str, Any] = {"trials": detector_trials, "horizon": detector_horizon, "runs": []}
    medians = {}
    for delta in DETECTOR_DELTAS + (0.0,):
        sc = detector_scenario(4, 2, 2, 1, delta, 1e-3, np.random.default_rng(seed + 1))
        horizon = detector_horizon if delta else 200
        window = math.ceil(1 / (4 * delta)) if delta else None
        cr = detector_click_experiment(sc, detector_trials, seed, horizon, dwell_window=window)
        medians[delta] = cr.median_click_time()
        dwell = cr.dwell_fraction(1 / (4 * delta)) if delta else None
        det["runs"].append({
            "delta": delta,
            "horizon": horizon,
            "median_click_time": medians[delta],
            "clicks": len(cr.clicks),
            "censored": cr.censored,
            "dwell_fraction": dwell,
        })
        for t, (c, d) in enumerate(zip(cr.click_times, cr.dwell_times)):
            rows.append((delta, t, "" if c is None else c, "" if d is None else d, int(c is None)))
    write_csv(out / "click_times.csv", ["delta", "trajectory", "click_time", "dwell", "censored"], rows)
    ratio = medians[0.05] / medians[0.1]
    det["median_ratio"] = ratio
    det["pass"] = bool(
        ratio >= 1.5
        and det["runs"][2]["clicks"] == 0
        and all(r["dwell_fraction"] is not None and r["dwell_fraction"] >= 0.8 for r in det["runs"][:2])
    )
    det["seconds"] = time.perf_counter() - t0
    summary["detector"] = det
    summary["pass"] = bool(summary["weak"]["pass"] and summary["strong"]["pass"] and det["pass"])
    (out / "regimes.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


__all__ = [
    "Scenario",
    "Tolerances",
    "OutputSpec",
    "BuiltScenario",
    "RunResult",
    "Aggregator",
    "parse_scenario",
    "scenario_from_dict",
    "bundled_scenarios",
    "build",
    "simulate_trajectory",
    "run_ensemble",
    "summarize_log",
    "read_log",
    "oracle_compare",
    "expected_statistics",
    "sidecar_path",
    "tree_check",
    "run_regimes",
    "matrix_to_json",
    "matrix_from_json",
    "EthsimError",
    "InvariantError",
]
