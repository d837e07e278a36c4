"""Handle-based controller runtime: load a compiled problem, set parameters,
solve with hot start, read out trajectories and statistics.

A `Bundle` is the self-contained exported controller: the stage functions in
`.fns` text form plus layout tables and metadata, all in one deterministic
text file (`*.impb`).  An `Instance` owns mutable per-controller state:
parameter values, the hot-start iterate, and the last solution.  Parameters
are the only writable values; everything else is read-only through `get`.

Selector semantics: a call addresses one identifier, either a single stage
or the whole horizon (`EVERYWHERE`), with `FULL` (distinct values per stage)
or `HREP` (one vector replicated) repetition, and `ROW_MAJOR` (stage-major)
or `COLUMN_MAJOR` (component-major) data ordering.
"""
from __future__ import annotations

import ast
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import expr as ex
from .solver import Solution, SolveStats, SqpOptions, sqp_solve
from .transcription import (
    IntegratorCfg,
    MultipleShooting,
    Nlp,
    ParamEntry,
    SingleShooting,
    StageFunctions,
    transcribe,
)

BUNDLE_MAGIC = "bundlev1"
STATE_MAGIC = "statev1"

# Selector constants; values are part of the foreign-callable interface.
ALL = "__all__"
EVERYWHERE = -1
FULL = 0x01
HREP = 0x02
ROW_MAJOR = 0x10
COLUMN_MAJOR = 0x20

_REPETITION = FULL | HREP
_ORDERING = ROW_MAJOR | COLUMN_MAJOR


class RuntimeApiError(ValueError):
    """Runtime API misuse; `code` is a stable short tag used by the shim."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


@dataclass(frozen=True)
class Selector:
    """Addressing record for set/get."""

    identifier: str
    stage: int = EVERYWHERE
    flags: int = FULL | ROW_MAJOR

    def __post_init__(self):
        rep = self.flags & _REPETITION
        order = self.flags & _ORDERING
        if rep not in (FULL, HREP):
            raise RuntimeApiError(
                "bad_flags", "exactly one repetition flag (FULL or HREP) required")
        if order not in (0, ROW_MAJOR, COLUMN_MAJOR):
            raise RuntimeApiError(
                "bad_flags",
                "exactly one ordering flag (ROW_MAJOR or COLUMN_MAJOR) required")

    @property
    def repetition(self) -> int:
        return self.flags & _REPETITION

    @property
    def ordering(self) -> int:
        order = self.flags & _ORDERING
        return order if order else ROW_MAJOR


def _fmt(x: float) -> str:
    return repr(float(x))


def _fmt_vec(values) -> str:
    return " ".join(_fmt(v) for v in values)


def _parse_vec(text: str) -> np.ndarray:
    return np.array([float(t) for t in text.split()], dtype=float) \
        if text.strip() else np.zeros(0)


@dataclass
class Bundle:
    """Self-contained compiled controller; loadable with no reference to the
    originating problem description."""

    name: str
    nlp: Nlp
    version: str = BUNDLE_MAGIC

    def to_text(self) -> str:
        nlp = self.nlp
        lines = [BUNDLE_MAGIC]
        meta = {
            "name": self.name,
            "method": nlp.method_kind,
            "N": str(nlp.N),
            "n_x": str(nlp.n_x),
            "n_u": str(nlp.n_u),
            "n_z": str(nlp.n_z),
            "horizon_kind": nlp.horizon_kind,
            "horizon_value": _fmt(nlp.horizon_value),
            "integrator": nlp.intg.scheme,
            "substeps": str(nlp.intg.substeps),
            "cost_quadrature": nlp.cost_quadrature,
            "state_names": ",".join(nlp.state_names),
            "control_names": ",".join(nlp.control_names),
            "algebraic_names": ",".join(nlp.algebraic_names),
            "model_names": ",".join(nlp.model_names),
            "model_x_slices": ";".join(f"{a}:{b}" for a, b in nlp.model_x_slices),
            "initial_state_params": ";".join(
                f"{k}={v}" for k, v in sorted(nlp.initial_state_params.items())),
            "terminal_state_params": ";".join(
                f"{k}={v}" for k, v in sorted(nlp.terminal_state_params.items())),
        }
        lines.append("[meta]")
        for k in sorted(meta):
            lines.append(f"{k} {meta[k]}")
        lines.append("[params]")
        for e in nlp.params:
            lines.append(f"{e.name} {e.length} {1 if e.stage_varying else 0}")
        lines.append("[components]")
        for name in sorted(nlp.component_table):
            kind, off = nlp.component_table[name]
            lines.append(f"{name} {kind} {off}")
        lines.append("[bounds]")
        lines.append("lbw " + _fmt_vec(nlp.lbw))
        lines.append("ubw " + _fmt_vec(nlp.ubw))
        lines.append("[options]")
        for k in sorted(nlp.solver_options):
            lines.append(f"{k} {nlp.solver_options[k]!r}")
        for key, fn in sorted(nlp.stage.named().items()):
            lines.append(f"[function {key}]")
            lines.append(ex.serialize(fn).rstrip("\n"))
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text())

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "Bundle":
        lines = text.splitlines()
        if not lines or lines[0] != BUNDLE_MAGIC:
            raise RuntimeApiError(
                "version", f"expected a {BUNDLE_MAGIC} bundle")
        sections: dict[str, list[str]] = {}
        current: list[str] | None = None
        for raw in lines[1:]:
            if raw.startswith("["):
                name = raw.strip("[]")
                current = sections.setdefault(name, [])
            elif current is not None:
                current.append(raw)
            elif raw.strip():
                raise RuntimeApiError("corrupt", f"stray line {raw!r}")
        try:
            return cls._build(sections)
        except RuntimeApiError:
            raise
        except Exception as exc:
            raise RuntimeApiError("corrupt", f"corrupt bundle: {exc}") from exc

    @classmethod
    def _build(cls, sections) -> "Bundle":
        meta = {}
        for line in sections["meta"]:
            if line.strip():
                k, _, v = line.partition(" ")
                meta[k] = v
        params = []
        ps_off = 0
        p_off = 0
        N = int(meta["N"])
        for line in sections.get("params", []):
            if not line.strip():
                continue
            name, length, varying = line.split()
            e = ParamEntry(name, int(length), varying == "1", ps_off, p_off)
            params.append(e)
            ps_off += e.length
            p_off += e.length * (N if e.stage_varying else 1)
        components = {}
        for line in sections.get("components", []):
            if line.strip():
                name, kind, off = line.split()
                components[name] = (kind, int(off))
        bounds = {}
        for line in sections.get("bounds", []):
            if line.strip():
                key, _, rest = line.partition(" ")
                bounds[key] = _parse_vec(rest)
        options = {}
        for line in sections.get("options", []):
            if line.strip():
                k, _, v = line.partition(" ")
                options[k] = ast.literal_eval(v)
        fns = {}
        for key in sections:
            if key.startswith("function "):
                fns[key.split(" ", 1)[1]] = ex.deserialize(
                    "\n".join(sections[key]).strip() + "\n")
        stage_kwargs = {k: None for k in (
            "phi", "cost", "cost0", "mayer", "path", "path_term", "path_eq",
            "alg", "boundary_eq", "boundary_ineq", "res", "res0", "res_mayer")}
        stage_kwargs.update(fns)
        stage = StageFunctions(**stage_kwargs)
        if stage.phi is None:
            raise RuntimeApiError("corrupt", "bundle has no dynamics function")

        def parse_map(key):
            out = {}
            for part in meta.get(key, "").split(";"):
                if part:
                    k, _, v = part.partition("=")
                    out[int(k)] = v
            return out

        def parse_names(key):
            raw = meta.get(key, "")
            return [s for s in raw.split(",") if s]

        nlp = Nlp(
            method_kind=meta["method"],
            N=N,
            n_x=int(meta["n_x"]),
            n_u=int(meta["n_u"]),
            n_z=int(meta["n_z"]),
            horizon_kind=meta["horizon_kind"],
            horizon_value=float(meta["horizon_value"]),
            intg=IntegratorCfg(meta["integrator"], int(meta["substeps"])),
            cost_quadrature=meta["cost_quadrature"],
            params=params,
            n_ps=max(ps_off, 1),
            n_p=p_off,
            stage=stage,
            lbw=bounds["lbw"],
            ubw=bounds["ubw"],
            m_boundary_eq=(stage.boundary_eq.outputs[0].n
                           if stage.boundary_eq else 0),
            m_path_eq_stage=(stage.path_eq.outputs[0].n if stage.path_eq else 0),
            m_path_stage=stage.path.outputs[0].n if stage.path else 0,
            m_path_term=(stage.path_term.outputs[0].n if stage.path_term else 0),
            m_boundary_ineq=(stage.boundary_ineq.outputs[0].n
                             if stage.boundary_ineq else 0),
            state_names=parse_names("state_names"),
            control_names=parse_names("control_names"),
            algebraic_names=parse_names("algebraic_names"),
            model_names=parse_names("model_names"),
            component_table=components,
            initial_state_params=parse_map("initial_state_params"),
            terminal_state_params=parse_map("terminal_state_params"),
            model_x_slices=[tuple(int(t) for t in part.split(":"))
                            for part in meta.get("model_x_slices", "").split(";")
                            if part],
            solver_options=options,
        )
        return cls(name=meta.get("name", "controller"), nlp=nlp)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Bundle":
        return cls.from_text(Path(path).read_text())


def export_bundle(source, method=None, solver_options: dict | None = None,
                  name: str | None = None,
                  path: Union[str, Path, None] = None) -> Bundle:
    """Compile a problem into a Bundle (optionally writing the file).

    `source` may be an Ocp builder (using its configured method/options),
    an already-canonical record plus `method`, or an existing Nlp.
    """
    from .ocp import CanonicalOcp, Ocp

    if isinstance(source, Ocp):
        nlp = source.transcribe()
        bundle_name = name or (source._model_names[0] if source._model_names
                               else "controller")
    elif isinstance(source, CanonicalOcp):
        if method is None:
            raise RuntimeApiError("bad_flags", "canonical export needs a method")
        nlp = transcribe(source, method)
        bundle_name = name or (source.model_names[0] if source.model_names
                               else "controller")
    elif isinstance(source, Nlp):
        nlp = source
        bundle_name = name or "controller"
    else:
        raise RuntimeApiError("bad_flags",
                              f"cannot export {type(source).__name__}")
    if solver_options is not None:
        nlp.solver_options = dict(solver_options)
    bundle = Bundle(name=bundle_name, nlp=nlp)
    if path is not None:
        bundle.save(path)
    return bundle


class Instance:
    """One loaded controller: parameter storage, hot-start state, last
    solution.  Distinct instances are fully independent."""

    def __init__(self, bundle: Bundle, shift_warm_start: bool = False):
        self.bundle = bundle
        self.nlp = bundle.nlp
        self.shift_warm_start = shift_warm_start
        self._params: dict[str, np.ndarray] = {}
        for e in self.nlp.params:
            shape = (self.nlp.N, e.length) if e.stage_varying else (e.length,)
            self._params[e.name] = np.zeros(shape)
        self._param_entry = {e.name: e for e in self.nlp.params}
        self._hot: Solution | None = None
        self._solution: Solution | None = None
        self._stats = SolveStats(status="none", iterations=0)
        self._n_solves = 0
        self._last_p: np.ndarray | None = None
        self._opts = SqpOptions.from_dict(self.nlp.solver_options)

    # -- selector plumbing -------------------------------------------------
    def _sel(self, identifier, stage, flags) -> Selector:
        if isinstance(identifier, Selector):
            return identifier
        return Selector(identifier, stage, flags)

    def _resolve_read(self, name: str):
        """-> (matrix (stages, rows), writable?) for a readable identifier."""
        nlp = self.nlp
        if name in self._param_entry:
            e = self._param_entry[name]
            store = self._params[name]
            mat = store.reshape(1, -1) if not e.stage_varying else store
            return mat, True
        if name == "f_opt":
            self._require_solution()
            return np.array([[self._solution.objective]]), False
        sol_vectors = {"x_opt": ("x", None), "u_opt": ("u", None),
                       "z_opt": ("z", None)}
        if name in sol_vectors:
            kind = sol_vectors[name][0]
            return self._trajectory(kind), False
        comp = nlp.component_table.get(name)
        if comp is not None:
            kind, off = comp
            traj = self._trajectory(kind)
            return traj[:, off:off + 1], False
        raise RuntimeApiError("unknown_id", f"unknown identifier {name!r}")

    def _trajectory(self, kind: str) -> np.ndarray:
        self._require_solution()
        nlp = self.nlp
        w = self._solution.w
        if nlp.method_kind == "single_shooting":
            if kind == "u":
                return w[: nlp.N * nlp.n_u].reshape(nlp.N, nlp.n_u)
            if kind == "x" and self._last_p is not None:
                ev = nlp.evaluator(self._last_p)
                X, _, _, _ = ev._rollout(w, need_sens=False)
                return X.T
            raise RuntimeApiError(
                "unknown_id", "state trajectories are not stored by this method")
        if kind == "x":
            return w[: (nlp.N + 1) * nlp.n_x].reshape(nlp.N + 1, nlp.n_x)
        if kind == "u":
            if nlp.n_u == 0:
                raise RuntimeApiError("unknown_id", "problem has no controls")
            off = (nlp.N + 1) * nlp.n_x
            return w[off: off + nlp.N * nlp.n_u].reshape(nlp.N, nlp.n_u)
        if nlp.n_z == 0:
            raise RuntimeApiError("unknown_id", "problem has no algebraic states")
        off = (nlp.N + 1) * nlp.n_x + nlp.N * nlp.n_u
        return w[off: off + nlp.N * nlp.n_z].reshape(nlp.N, nlp.n_z)

    def _require_solution(self):
        if self._solution is None:
            raise RuntimeApiError("no_solution", "no solution stored yet (solve first)")

    @staticmethod
    def _stage_count(mat: np.ndarray) -> int:
        return mat.shape[0]

    def set(self, identifier, data, stage: int = EVERYWHERE,
            flags: int = FULL | ROW_MAJOR) -> None:
        """Write a parameter (the only writable identifiers)."""
        sel = self._sel(identifier, stage, flags)
        name = sel.identifier
        if name not in self._param_entry:
            if name in ("x_opt", "u_opt", "z_opt", "f_opt") or \
                    name in self.nlp.component_table:
                raise RuntimeApiError("read_only",
                                      f"{name!r} is a read-only identifier")
            raise RuntimeApiError("unknown_id", f"unknown identifier {name!r}")
        e = self._param_entry[name]
        store = self._params[name]
        mat = store.reshape(1, -1) if not e.stage_varying else store
        stages = mat.shape[0]
        rows = e.length
        data = np.asarray(data, dtype=float).reshape(-1)
        if sel.stage == EVERYWHERE:
            if sel.repetition == HREP:
                if data.size != rows:
                    raise RuntimeApiError(
                        "length_mismatch",
                        f"{name!r} expects {rows} values for HREP, got {data.size}")
                mat[:, :] = data[None, :]
            else:
                if data.size != rows * stages:
                    raise RuntimeApiError(
                        "length_mismatch",
                        f"{name!r} expects {rows * stages} values, got {data.size}")
                if sel.ordering == ROW_MAJOR:
                    mat[:, :] = data.reshape(stages, rows)
                else:
                    mat[:, :] = data.reshape(rows, stages).T
        else:
            k = sel.stage
            if not (0 <= k < stages):
                raise RuntimeApiError(
                    "bad_stage", f"stage {k} out of range for {name!r}")
            if data.size != rows:
                raise RuntimeApiError(
                    "length_mismatch",
                    f"{name!r} expects {rows} values per stage, got {data.size}")
            mat[k, :] = data

    def get(self, identifier, stage: int = EVERYWHERE,
            flags: int = FULL | ROW_MAJOR) -> np.ndarray:
        """Read a parameter or a slice of the stored solution."""
        sel = self._sel(identifier, stage, flags)
        mat, _ = self._resolve_read(sel.identifier)
        stages, rows = mat.shape
        if sel.stage == EVERYWHERE:
            if sel.repetition == HREP:
                out = mat[0, :].copy()
            elif sel.ordering == ROW_MAJOR:
                out = mat.reshape(-1).copy()
            else:
                out = mat.T.reshape(-1).copy()
        else:
            k = sel.stage
            if not (0 <= k < stages):
                raise RuntimeApiError(
                    "bad_stage",
                    f"stage {k} out of range for {sel.identifier!r}")
            out = mat[k, :].copy()
        return out

    # -- solving -------------------------------------------------------------
    def _pack(self) -> np.ndarray:
        values = {}
        for e in self.nlp.params:
            store = self._params[e.name]
            values[e.name] = store.reshape(-1)
        return self.nlp.pack_parameters(values)

    def _initial_guess(self, p: np.ndarray):
        if self._hot is None:
            return None  # solver falls back to the default initializer
        if not self.shift_warm_start:
            return self._hot
        nlp = self.nlp
        w = self._hot.w.copy()
        if nlp.method_kind == "multiple_shooting":
            for k in range(nlp.N):
                w[nlp.x_index(k)] = self._hot.w[nlp.x_index(k + 1)]
            for k in range(nlp.N - 1):
                w[nlp.u_index(k)] = self._hot.w[nlp.u_index(k + 1)]
                if nlp.n_z:
                    w[nlp.z_index(k)] = self._hot.w[nlp.z_index(k + 1)]
        else:
            for k in range(nlp.N - 1):
                w[nlp.u_index(k)] = self._hot.w[nlp.u_index(k + 1)]
        return w

    def solve(self) -> str:
        p = self._pack()
        init = self._initial_guess(p)
        sol = sqp_solve(self.nlp, p, init=init, opts=self._opts)
        self._stats = sol.stats
        self._n_solves += 1
        self._last_p = p
        if sol.stats.status == "solved":
            self._solution = sol
            self._hot = sol
        else:
            # Failure isolation: restart the next solve from the last good
            # solution (or cold) instead of a possibly poisoned iterate.
            self._hot = self._solution
        return sol.stats.status

    def stats(self) -> SolveStats:
        return self._stats

    @property
    def solution(self) -> Solution | None:
        return self._solution

    @property
    def n_solves(self) -> int:
        return self._n_solves

    # -- state blobs -----------------------------------------------------------
    def save_state(self) -> bytes:
        lines = [STATE_MAGIC, f"bundle {self.bundle.sha256()}"]
        for e in self.nlp.params:
            lines.append(f"param {e.name} " + _fmt_vec(self._params[e.name].reshape(-1)))
        if self._hot is not None:
            lines.append("hot_w " + _fmt_vec(self._hot.w))
            lines.append("hot_lam_g " + _fmt_vec(self._hot.lam_g))
            lines.append("hot_lam_h " + _fmt_vec(self._hot.lam_h))
            lines.append("hot_active " + " ".join(str(c) for c in self._hot.active_set))
        return ("\n".join(lines) + "\n").encode()

    def load_state(self, blob: bytes) -> None:
        text = blob.decode() if isinstance(blob, (bytes, bytearray)) else str(blob)
        lines = text.splitlines()
        if not lines or lines[0] != STATE_MAGIC:
            raise RuntimeApiError("corrupt", "not a state blob")
        hot: dict[str, np.ndarray] = {}
        saw_bundle = False
        for line in lines[1:]:
            if not line.strip():
                continue
            tag, _, rest = line.partition(" ")
            if tag == "bundle":
                saw_bundle = True
                if rest.strip() != self.bundle.sha256():
                    raise RuntimeApiError(
                        "state_mismatch",
                        "state blob was saved from a different bundle")
            elif tag == "param":
                name, _, vals = rest.partition(" ")
                if name not in self._params:
                    raise RuntimeApiError("state_mismatch",
                                          f"unknown parameter {name!r} in blob")
                arr = _parse_vec(vals)
                self._params[name][...] = arr.reshape(self._params[name].shape)
            elif tag in ("hot_w", "hot_lam_g", "hot_lam_h"):
                hot[tag] = _parse_vec(rest)
            elif tag == "hot_active":
                hot["active"] = [int(t) for t in rest.split()] if rest.strip() else []
        if not saw_bundle:
            raise RuntimeApiError("corrupt", "state blob lacks a bundle hash")
        if "hot_w" in hot:
            self._hot = Solution(
                w=hot["hot_w"],
                lam_g=hot.get("hot_lam_g", np.zeros(0)),
                lam_h=hot.get("hot_lam_h", np.zeros(0)),
                lam_bounds=np.zeros(self.nlp.n_w),
                objective=float("nan"),
                stats=SolveStats(status="loaded"),
                active_set=list(hot.get("active", [])),
            )
        else:
            self._hot = None
        self._solution = None


def initialize(bundle: Union[Bundle, str, Path], **kw) -> Instance:
    """Instantiate a controller from a Bundle object or `.impb` file."""
    if not isinstance(bundle, Bundle):
        bundle = Bundle.load(bundle)
    return Instance(bundle, **kw)


# Exception alias kept importable under a module-agnostic name.
RuntimeError_ = RuntimeApiError
