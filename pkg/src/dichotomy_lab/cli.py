"""Command line entry point: ``dichotomy-lab <command> --config path.json``.

Exit codes: 0 success (including a ``violated`` verdict or a non-hyperbolic
spectrum, which are findings), 2 configuration errors, 3 numerical failures,
4 unwritable output paths.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from contextlib import nullcontext
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import REPORT_SCHEMA_VERSION, __version__
from . import checks
from .dichotomy import DichotomyReport, fredholm_diagnostics, verify_dichotomy
from .errors import BlowUpError, ConfigError, DichotomyLabError, NotHyperbolicError
from .evolution import HistorySegment, default_resolution, integrate
from .green import GreenKernel, green_autonomous, small_gain
from .spectrum import analyze
from .system import DelaySystem, GridFunction

log = logging.getLogger(__name__)

COMMANDS = ("spectrum", "green", "solve", "pairing-check", "dichotomy", "fredholm", "all")
THREADS_ENV = "DICHOTOMY_LAB_THREADS"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

_matrix = {"oneOf": [{"type": "number"},
                     {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}]}
_positive = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["system"],
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "system": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dim", "delays", "limit_plus", "limit_minus"],
            "properties": {
                "name": {"type": "string"},
                "dim": {"type": "integer", "minimum": 1},
                "delays": {"type": "array", "minItems": 1, "items": {"type": "number"}},
                "limit_plus": {"type": "array", "minItems": 1, "items": _matrix},
                "limit_minus": {"type": "array", "minItems": 1, "items": _matrix},
                "perturbations": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["kind"],
                        "properties": {
                            "kind": {"enum": ["zero", "rational_decay", "exponential_decay",
                                              "compact_bump"]},
                            "amplitude": _matrix,
                            "rate": _positive,
                            "width": _positive,
                            "center": {"type": "number"},
                        },
                    },
                },
            },
        },
        "numerics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "step": _positive,
                "T": _positive,
                "m": {"type": "integer", "minimum": 2},
                "horizon": _positive,
                "probes": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "s_list": {"type": "array", "items": {"type": "number"}},
                "fredholm_T": _positive,
                "fredholm_m": {"type": "integer", "minimum": 2},
                "pairing_pairs": {"type": "integer", "minimum": 1},
                "neumann_order": {"type": "integer", "minimum": 1},
            },
        },
        "forcing": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["zero", "bump"]},
                "center": {"type": "number"},
                "width": _positive,
                "amplitude": {"type": "array", "items": {"type": "number"}},
            },
        },
        "initial": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"value": {"type": "array", "items": {"type": "number"}}},
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "csv": {"type": "boolean"},
            },
        },
    },
}


class _Exit(Exception):
    def __init__(self, code: int, payload: dict):
        super().__init__(payload.get("message", ""))
        self.code = code
        self.payload = payload


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def shipped_configs() -> list[str]:
    """Names of the example configurations bundled with the package."""
    root = resources.files("dichotomy_lab") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def shipped_config_path(name: str) -> Path:
    return Path(str(resources.files("dichotomy_lab") / "configs" / f"{name}.json"))


def _field_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        parts += extra[:1]
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        parts += missing[:1]
    return ".".join(parts) or "<root>"


def load_config(path: str) -> dict:
    """Read and validate a configuration; a bare name refers to a shipped config."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and path in shipped_configs():
        p = shipped_config_path(path)
    try:
        cfg = json.loads(p.read_text())
    except FileNotFoundError as exc:
        raise _Exit(EXIT_CONFIG, {"error": "ConfigError", "path": "<file>",
                                  "message": f"config file not found: {path}"}) from exc
    except json.JSONDecodeError as exc:
        raise _Exit(EXIT_CONFIG, {"error": "ConfigError", "path": "<file>",
                                  "message": f"invalid JSON: {exc}"}) from exc
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        where = _field_path(err)
        raise _Exit(EXIT_CONFIG, {"error": "ConfigError", "path": where,
                                  "message": f"{where}: {err.message}"})
    return cfg


def build_system(cfg: dict) -> DelaySystem:
    try:
        return DelaySystem.from_dict(cfg["system"], cfg["system"].get("name", "system"))
    except ConfigError as exc:
        where = f"system.{exc.details.get('path', '')}".rstrip(".")
        raise _Exit(EXIT_CONFIG, {"error": "ConfigError", "path": where,
                                  "message": f"{where}: {exc.message}"}) from exc
    except (ValueError, TypeError) as exc:
        raise _Exit(EXIT_CONFIG, {"error": "ConfigError", "path": "system",
                                  "message": f"system: {exc}"}) from exc


def resolve_numerics(cfg: dict, sys: DelaySystem, seed: int | None = None) -> dict:
    """Numerics with defaults filled in."""
    num = dict(cfg.get("numerics", {}))
    scale = max(1.0, sys.max_delay)
    out = {
        "step": 1.0 / 64,
        "T": 50.0,
        "m": default_resolution(sys),
        "horizon": 20.0 * scale,
        "probes": 256,
        "seed": 42,
        "s_list": [0.0],
        "fredholm_T": 20.0,
        "fredholm_m": 16,
        "pairing_pairs": 20,
        "neumann_order": 4,
    }
    out.update(num)
    if seed is not None:
        out["seed"] = seed
    for key in ("step", "T", "horizon", "fredholm_T"):
        out[key] = float(out[key])
    out["s_list"] = [float(s) for s in out["s_list"]]
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _encode(obj, indent: int = 0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format(x, ".17g") if math.isfinite(x) else "null"
    if isinstance(obj, complex):
        return _encode([obj.real, obj.imag], indent)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist(), indent)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number, bool)) or v is None for v in obj):
            return "[" + ", ".join(_encode(v) for v in obj) + "]"
        items = [pad + _encode(v, indent + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    """JSON text with every float written to 17 significant digits; non-finite
    floats become ``null``."""
    return _encode(obj) + "\n"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise _Exit(EXIT_IO, {"error": "OutputError", "path": str(path),
                              "message": f"cannot write {path}: {exc.strerror}"}) from exc


def write_csv(path: Path, header: list[str], rows) -> None:
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([r if isinstance(r, str) else _fmt(r) for r in row])
    except OSError as exc:
        raise _Exit(EXIT_IO, {"error": "OutputError", "path": str(path),
                              "message": f"cannot write {path}: {exc.strerror}"}) from exc


def emit_decay_csv(report: DichotomyReport, path) -> None:
    """Decay curves with header ``ts,norm,envelope,component``.

    ``P`` rows hold the forward curve on range P, ``Q`` rows the backward
    curve on range Q; the envelope is ``D exp(-lambda ts)`` from the fit.
    Slices follow the order of ``s_list``.
    """
    rows = []
    for sl in report.slices:
        curves = [("P", sl.forward_curve, sl.forward_fit)]
        if sl.backward_curve is not None:
            curves.append(("Q", sl.backward_curve, sl.backward_fit))
        for comp, (ts, norms), (d, lam) in curves:
            env = d * np.exp(-lam * ts)
            rows.extend((t, v, e, comp) for t, v, e in zip(ts, norms, env))
    write_csv(Path(path), ["ts", "norm", "envelope", "component"], rows)


def ensure_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise _Exit(EXIT_IO, {"error": "OutputError", "path": str(out),
                              "message": f"output directory {out} is not writable: "
                                         f"{exc.strerror}"}) from exc


# ---------------------------------------------------------------------------
# warning capture
# ---------------------------------------------------------------------------

class _WarningCollector(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(record.getMessage())


def _merge(*lists) -> list[str]:
    seen, out = set(), []
    for lst in lists:
        for msg in lst:
            if msg not in seen:
                seen.add(msg)
                out.append(msg)
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

class Run:
    """One invocation: a validated system, resolved numerics and an output directory."""

    def __init__(self, cfg: dict, sys: DelaySystem, numerics: dict, out: Path):
        self.cfg = cfg
        self.sys = sys
        self.num = numerics
        self.out = out
        self.csv = cfg.get("output", {}).get("csv", True)
        self.stage_warnings: list[str] = []
        self._spectra: dict | None = None
        self._kernels: dict[str, GreenKernel] = {}

    def envelope(self, command: str, result: dict, warnings) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "version": __version__,
            "command": command,
            "system": self.sys.to_dict(),
            "numerics": self.num,
            "result": result,
            "warnings": list(warnings),
        }

    def _branches(self) -> list[str]:
        return ["+"] if self.sys.same_limits else ["+", "-"]

    def spectra(self) -> dict:
        if self._spectra is None:
            reps = {b: analyze(self.sys.limit(b)) for b in self._branches()}
            reps.setdefault("-", reps["+"])
            self._spectra = reps
        return self._spectra

    def hyperbolic(self) -> bool:
        return all(r.hyperbolic for r in self.spectra().values())

    def kernel(self, branch: str = "+") -> GreenKernel:
        if self.sys.same_limits:
            branch = "+"
        if branch not in self._kernels:
            rep = self.spectra()[branch]
            if not rep.hyperbolic:
                raise NotHyperbolicError("Green's function needs a hyperbolic limit",
                                         z=rep.axis_root, branch=branch)
            half = self.num["T"]
            self._kernels[branch] = green_autonomous(self.sys.limit(branch), rep.gap, -half,
                                                     half, self.num["step"])
        return self._kernels[branch]

    # -- commands ---------------------------------------------------------------
    def spectrum(self) -> dict:
        reps = self.spectra()
        res = {"hyperbolic": self.hyperbolic(),
               "plus": reps["+"].to_dict(), "minus": reps["-"].to_dict()}
        warn = _merge(reps["+"].warnings, reps["-"].warnings)
        write_text(self.out / "spectrum.json", dumps(self.envelope("spectrum", res, warn)))
        return res

    def green(self) -> dict:
        res = {}
        warn: list[str] = []
        for b in self._branches():
            g = self.kernel(b)
            tag = "plus" if b == "+" else "minus"
            fname = "green.csv" if b == "+" else "green_minus.csv"
            if self.csv:
                n = g.dim
                header = ["t"] + [f"G{i + 1}{j + 1}" for i in range(n) for j in range(n)]
                vals = g.samples.reshape(g.samples.shape[0], n * n)
                write_csv(self.out / fname, header,
                          ([t, *row] for t, row in zip(g.times, vals)))
            k, a = g.fit_K, g.fit_a
            res[tag] = {**g.to_dict(), "csv": fname if self.csv else None,
                        "error_budget": {"tail": g.tail_estimate, "alias": g.alias_estimate,
                                         "fit_slack": g.fit_slack},
                        "envelope": {"K": k, "a": a}}
            warn += g.warnings
        if any(p.kind != "zero" for p in self.sys.perturbations):
            g = self.kernel("+")
            eps, thr, _ = small_gain(self.sys, g)
            if eps < thr:
                nc = checks.neumann_check(self.sys, g, order=self.num["neumann_order"])
                res["neumann"] = nc
            else:
                msg = (f"perturbation sup-norm {eps:.6g} exceeds the small-gain threshold "
                       f"{thr:.6g}; Neumann series not attempted")
                res["neumann"] = {"epsilon": eps, "threshold": thr, "attempted": False}
                warn.append(msg)
        write_text(self.out / "green.json", dumps(self.envelope("green", res, warn)))
        return res

    def solve(self) -> dict:
        sys_, num = self.sys, self.num
        n = sys_.dim
        step = num["step"]
        value = self.cfg.get("initial", {}).get("value", [1.0] * n)
        if len(value) != n:
            raise _Exit(EXIT_CONFIG, {"error": "ConfigError", "path": "initial.value",
                                      "message": f"initial.value must have {n} entries"})
        span = sys_.history_span
        m = int(round(span / step))
        phi = HistorySegment.constant(np.asarray(value, dtype=float), span, max(m, 2))
        fc = self.cfg.get("forcing", {"kind": "zero"})
        h = None
        if fc["kind"] == "bump":
            amp = np.asarray(fc.get("amplitude", [1.0] * n), dtype=float)
            if amp.size != n:
                raise _Exit(EXIT_CONFIG, {"error": "ConfigError", "path": "forcing.amplitude",
                                          "message": f"forcing.amplitude must have {n} entries"})
            c, w = float(fc.get("center", 1.0)), float(fc.get("width", 1.0))
            h = GridFunction.from_callable(
                lambda t: checks.bump(t, c, w)[:, None] * amp, 0.0, num["horizon"], step)
        t_end = num["horizon"]
        traj = integrate(sys_, 0.0, phi, t_end, h=h)
        times = 0.0 + step * np.arange(int(round(t_end / step)) + 1)
        x = traj(times)
        if self.csv:
            write_csv(self.out / "solve.csv", ["t"] + [f"x{i + 1}" for i in range(n)],
                      ([t, *row] for t, row in zip(times, x.reshape(times.size, n))))
        res = {"s": 0.0, "t_end": t_end, "step": step,
               "integrator_step": traj.step, "final_state": x[-1].ravel(),
               "sup_norm": float(np.max(np.abs(x))), "csv": "solve.csv" if self.csv else None}
        write_text(self.out / "solve.json", dumps(self.envelope("solve", res, [])))
        return res

    def pairing(self) -> dict:
        st = self.num["step"]
        res = checks.pairing_table(self.sys, [2 * st, st, st / 2], self.num["pairing_pairs"],
                                   self.num["seed"])
        write_text(self.out / "pairing.json", dumps(self.envelope("pairing-check", res, [])))
        return res

    def dichotomy(self) -> DichotomyReport:
        num = self.num
        rep = verify_dichotomy(self.sys, num["s_list"], num["horizon"], num["probes"], num["m"],
                               num["T"], num["seed"])
        warn = _merge(rep.warnings, rep.problem.warnings)
        res = rep.to_dict()
        if self.csv:
            emit_decay_csv(rep, self.out / "decay.csv")
            res["csv"] = "decay.csv"
        write_text(self.out / "dichotomy.json", dumps(self.envelope("dichotomy", res, warn)))
        return rep

    def fredholm(self):
        num = self.num
        rep = fredholm_diagnostics(self.sys, num["fredholm_T"], num["fredholm_m"],
                                   seed=num["seed"])
        write_text(self.out / "fredholm.json",
                   dumps(self.envelope("fredholm", rep.to_dict(), rep.notes)))
        return rep

    def all(self) -> dict:
        """Every stage in dependency order plus ``summary.json`` with one entry per check."""
        results: dict[str, dict] = {}
        results["weights"] = checks.weight_identities(self.sys, seed=self.num["seed"])
        self.spectrum()
        rep_plus = self.spectra()["+"]
        results["hyperbolicity"] = {
            "passed": self.hyperbolic(),
            **{k: checks.hyperbolicity(self.spectra()[b])
               for k, b in (("plus", "+"), ("minus", "-"))}}
        skipped = "limit system is not hyperbolic"
        if self.hyperbolic():
            self.green()
            g = self.kernel("+")
            results["green"] = checks.green_check(g, rep_plus)
            results["convolution"] = checks.convolution_check(self.sys, g, rep_plus.gap)
            if self.sys.perturbation_sup() > 0:
                eps, thr, _ = small_gain(self.sys, g)
                results["neumann"] = (checks.neumann_check(self.sys, g,
                                                           order=self.num["neumann_order"])
                                      if eps < thr else
                                      {"passed": None, "skipped": "perturbation above the "
                                                                  "small-gain threshold"})
        else:
            for key in ("green", "convolution"):
                results[key] = {"passed": None, "skipped": skipped}
        try:
            self.solve()
        except BlowUpError as exc:
            results["solve"] = {"passed": None, "skipped": exc.message}
        results["pairing"] = self.pairing()
        if self.hyperbolic():
            rep = self.dichotomy()
            results["projection"] = checks.projection_algebra(rep)
            results["verdict"] = checks.dichotomy_verdict(rep)
            results["theory_bound"] = checks.theory_bound(rep)
        else:
            for key in ("projection", "verdict", "theory_bound"):
                results[key] = {"passed": None, "skipped": skipped}
        fred = self.fredholm()
        results["fredholm"] = checks.fredholm_check(fred)
        ran = [r["passed"] for r in results.values() if r.get("passed") is not None]
        summary = {"all_passed": all(ran), "checks": results}
        return summary


def _run_command(command: str, run: Run) -> dict:
    if command == "spectrum":
        return run.spectrum()
    if command == "green":
        return run.green()
    if command == "solve":
        return run.solve()
    if command == "pairing-check":
        return run.pairing()
    if command == "dichotomy":
        return run.dichotomy().to_dict()
    if command == "fredholm":
        return run.fredholm().to_dict()
    return run.all()


def run(command: str | None, config: str, out: str | None = None,
        seed: int | None = None) -> int:
    """Execute one command; returns the process exit status.

    ``command`` falls back to the config's ``command`` entry.
    """
    collector = _WarningCollector()
    pkg_log = logging.getLogger("dichotomy_lab")
    pkg_log.addHandler(collector)
    threads = os.environ.get(THREADS_ENV)
    limiter = threadpool_limits(limits=int(threads)) if threads else nullcontext()
    out_dir = None
    try:
        with limiter:
            cfg = load_config(config)
            command = command or cfg.get("command")
            if command is None:
                raise _Exit(EXIT_CONFIG, {"error": "ConfigError", "path": "command",
                                          "message": "command: give one on the command line "
                                                     "or in the config"})
            sys_ = build_system(cfg)
            num = resolve_numerics(cfg, sys_, seed)
            out_dir = Path(out or cfg.get("output", {}).get("dir", "dichotomy-lab-out"))
            ensure_writable(out_dir)
            r = Run(cfg, sys_, num, out_dir)
            try:
                result = _run_command(command, r)
            except ConfigError as exc:
                raise _Exit(EXIT_CONFIG, exc.to_dict()) from exc
            except DichotomyLabError as exc:
                raise _Exit(EXIT_NUMERIC, {"error": type(exc).__name__, **exc.to_dict()}) from exc
            if command == "all":
                warn = _merge(collector.messages)
                write_text(out_dir / "summary.json", dumps(r.envelope("all", result, warn)))
                print(dumps({"all_passed": result["all_passed"],
                             "checks": {k: v.get("passed") for k, v in result["checks"].items()}}),
                      end="")
            else:
                print(f"{command}: wrote results to {out_dir}")
        return EXIT_OK
    except _Exit as exc:
        payload = {"exit_code": exc.code, **exc.payload}
        text = dumps(payload)
        sys.stderr.write(text)
        if exc.code == EXIT_NUMERIC and out_dir is not None:
            try:
                (out_dir / "error.json").write_text(text)
            except OSError:
                pass
        return exc.code
    finally:
        pkg_log.removeHandler(collector)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dichotomy-lab",
                                     description="Exponential dichotomy experiments for "
                                                 "linear delay equations.")
    parser.add_argument("--version", action="version",
                        version=f"dichotomy-lab {__version__} (report schema "
                                f"{REPORT_SCHEMA_VERSION})")
    parser.add_argument("command", nargs="?", choices=COMMANDS,
                        help="pipeline stage to run (defaults to the config's command)")
    parser.add_argument("--config", required=True,
                        help="path to a JSON config, or the name of a shipped config")
    parser.add_argument("--out", help="output directory (overrides output.dir)")
    parser.add_argument("--seed", type=int, help="random seed (overrides numerics.seed)")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
