"""YAML problem configuration.

The defaults describe the double-integrator study.  Every field may be
overridden in a YAML file; matrices are row-major nested lists.  Errors
report the line of the offending entry.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .errors import ConfigError
from .polytope import Box, Polytope
from .problems import with_lqr_terminal
from .sls_core import SafetyProblem
from .solver import SolverSettings

METHODS = ("sl", "tube", "explicit", "rci", "nominal")

DEFAULTS = {
    "system": {
        "A": [[1.0, 1.0], [0.0, 1.0]],
        "B": [[0.5], [1.0]],
        "B_w": [[0.3, 0.0], [0.0, 0.3]],
    },
    "constraints": {
        "state": {"A": [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], "b": [5.0, 5.0, 5.0, 5.0]},
        "input": {"A": [[1.0], [-1.0]], "b": [3.0, 3.0]},
    },
    "disturbance": {"half_widths": [1.0, 1.0]},
    "horizon": 10,
    "lqr": {"Q": [[1.0, 0.0], [0.0, 1.0]], "R": [[100.0]]},
    "methods": ["sl", "tube", "explicit", "rci"],
    "solver": {"eps_abs": 1e-8, "eps_rel": 1e-6},
    "seed": 0,
    "grid": {"counts": [50, 50]},
    "explicit": {"hyperbox": False},
    "tube": {"eps": 0.01},
    "simulation": {"episodes": 100, "steps": 50},
    "timing": {"samples": 200},
}


def _merge(base: dict, over: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise KeyError(path + (k,))
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise TypeError(path + (k,))
            out[k] = _merge(base[k], v, path + (k,))
        else:
            out[k] = v
    return out


def _line_of(node, path) -> int | None:
    """1-based line of the YAML node at ``path`` (closest ancestor if missing)."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in path:
        if not isinstance(node, yaml.MappingNode):
            break
        for k, v in node.value:
            if k.value == key:
                node, line = v, k.start_mark.line + 1
                break
        else:
            break
    return line


@dataclass(frozen=True)
class ProblemConfig:
    """Validated configuration; ``data`` is the merged nested dictionary."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def default(cls) -> "ProblemConfig":
        return cls.from_dict({})

    @classmethod
    def from_dict(cls, raw: dict, root=None) -> "ProblemConfig":
        try:
            data = _merge(DEFAULTS, raw or {})
        except KeyError as exc:
            path = exc.args[0]
            raise ConfigError(f"unknown key {'.'.join(map(str, path))}", _line_of(root, path)) from None
        except TypeError as exc:
            path = exc.args[0]
            raise ConfigError(f"{'.'.join(map(str, path))} must be a mapping", _line_of(root, path)) from None
        cfg = cls(data)
        cfg._validate(root)
        return cfg

    @classmethod
    def from_yaml(cls, text: str) -> "ProblemConfig":
        try:
            root = yaml.compose(text, Loader=yaml.SafeLoader)
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                              mark.line + 1 if mark is not None else None) from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("top level must be a mapping", 1)
        return cls.from_dict(raw or {}, root)

    @classmethod
    def load(cls, path) -> "ProblemConfig":
        with open(path) as fh:
            return cls.from_yaml(fh.read())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True, default_flow_style=None)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode()).hexdigest()[:16]

    def _validate(self, root) -> None:
        d = self.data

        def fail(msg, *path):
            raise ConfigError(msg, _line_of(root, path))

        def matrix(*path, rows=None, cols=None):
            node = d
            for p in path:
                node = node[p]
            try:
                M = np.array(node, dtype=float)
            except (TypeError, ValueError):
                fail(f"{'.'.join(path)} must be a numeric matrix", *path)
            if M.ndim != 2 or (rows is not None and M.shape[0] != rows) or (cols is not None and M.shape[1] != cols):
                fail(f"{'.'.join(path)} has shape {M.shape}, expected ({rows}, {cols})", *path)
            if not np.all(np.isfinite(M)):
                fail(f"{'.'.join(path)} has non-finite entries", *path)
            return M

        def vector(*path, size=None):
            node = d
            for p in path:
                node = node[p]
            try:
                v = np.array(node, dtype=float)
            except (TypeError, ValueError):
                fail(f"{'.'.join(path)} must be a numeric list", *path)
            if v.ndim != 1 or (size is not None and v.size != size) or not np.all(np.isfinite(v)):
                fail(f"{'.'.join(path)} must be a finite list of length {size}", *path)
            return v

        A = matrix("system", "A")
        n = A.shape[0]
        if A.shape != (n, n):
            fail("system.A must be square", "system", "A")
        B = matrix("system", "B", rows=n)
        B_w = matrix("system", "B_w", rows=n)
        m = B.shape[1]
        HX = matrix("constraints", "state", "A", cols=n)
        vector("constraints", "state", "b", size=HX.shape[0])
        HU = matrix("constraints", "input", "A", cols=m)
        vector("constraints", "input", "b", size=HU.shape[0])
        hw = vector("disturbance", "half_widths", size=B_w.shape[1])
        if np.any(hw < 0):
            fail("disturbance.half_widths must be non-negative", "disturbance", "half_widths")
        if not isinstance(d["horizon"], int) or isinstance(d["horizon"], bool) or d["horizon"] < 1:
            fail("horizon must be a positive integer", "horizon")
        matrix("lqr", "Q", rows=n, cols=n)
        matrix("lqr", "R", rows=m, cols=m)
        if not isinstance(d["methods"], list) or any(mth not in METHODS for mth in d["methods"]):
            fail(f"methods must be a list drawn from {METHODS}", "methods")
        for key in ("eps_abs", "eps_rel"):
            val = d["solver"][key]
            if not isinstance(val, (int, float)) or isinstance(val, bool) or val <= 0:
                fail(f"solver.{key} must be a positive number", "solver", key)
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
            fail("seed must be an integer", "seed")
        counts = d["grid"]["counts"]
        if not isinstance(counts, list) or len(counts) != n or any(not isinstance(c, int) or c < 1 for c in counts):
            fail(f"grid.counts must list {n} positive integers", "grid", "counts")
        if not isinstance(d["explicit"]["hyperbox"], bool):
            fail("explicit.hyperbox must be true or false", "explicit", "hyperbox")
        for sec, key in (("simulation", "episodes"), ("simulation", "steps"), ("timing", "samples")):
            val = d[sec][key]
            if not isinstance(val, int) or isinstance(val, bool) or val < 1:
                fail(f"{sec}.{key} must be a positive integer", sec, key)
        if not isinstance(d["tube"]["eps"], (int, float)) or not 0 < d["tube"]["eps"] < 1:
            fail("tube.eps must lie in (0, 1)", "tube", "eps")

    # -- derived objects ----------------------------------------------------
    def solver_settings(self) -> SolverSettings:
        """Tolerances from the file, overridden by ``SLSFILTER_EPS_ABS``/``SLSFILTER_EPS_REL``."""
        eps = {k: float(self.data["solver"][k]) for k in ("eps_abs", "eps_rel")}
        for key in eps:
            env = os.environ.get(f"SLSFILTER_{key.upper()}")
            if env:
                try:
                    eps[key] = float(env)
                except ValueError:
                    raise ConfigError(f"SLSFILTER_{key.upper()} is not a number: {env!r}") from None
        return replace(SolverSettings(), **eps)

    def problem(self, terminal: bool = True) -> SafetyProblem:
        """The safety problem; the terminal set is the LQR closed loop's maximal RPI set.

        Raises:
            NotStabilizableError: LQR synthesis fails.
        """
        d = self.data
        A = np.array(d["system"]["A"], dtype=float)
        B = np.array(d["system"]["B"], dtype=float)
        B_w = np.array(d["system"]["B_w"], dtype=float)
        X = Polytope(d["constraints"]["state"]["A"], d["constraints"]["state"]["b"])
        U = Polytope(d["constraints"]["input"]["A"], d["constraints"]["input"]["b"])
        W = Box(np.zeros(B_w.shape[1]), d["disturbance"]["half_widths"])
        N = d["horizon"]
        try:
            if not terminal:
                return SafetyProblem(A, B, B_w, X, U, N, W=W)
            return with_lqr_terminal(A, B, B_w, X, U, N, d["lqr"]["Q"], d["lqr"]["R"], W=W)
        except ValueError as exc:
            if type(exc) is not ValueError:
                raise
            raise ConfigError(str(exc)) from None
