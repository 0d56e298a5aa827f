"""``qbound`` command-line front end.

Exit codes: 0 ok, 2 configuration error, 3 numerical or solver failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from .bounds import (
    ConditioningError,
    SolverError,
    check_weight,
    embed_weight,
    hcrb_mixed,
    qcrb,
    qfim_inverse,
    verify_theorem1,
)
from .infomet import cfim, outcome_probabilities, qfim_mixed, qfim_pure
from .measures import (
    POVM,
    CompletionError,
    canonical_from_state,
    fisher_symmetric_povm,
    matsumoto_from_state,
)
from .numkit import ValidationError, haar_unitary
from .protosim import ProtocolConfig, default_workers, simulate
from .statemodel import builtin_family, purify, spectral

log = logging.getLogger("qbound")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4

CSV_COLUMNS = [
    "n",
    "n1",
    "n2",
    "trials",
    "mode",
    "n_tr_WV",
    "n_tr_WV_stderr",
    "bias_norm",
    "event_fail_rate",
    "target_bound",
    "ratio_to_target",
]

_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}, "minItems": 1}, "minItems": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "family": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": ["bloch3", "bloch2", "simplex", "qutrit_embed", "pure_phase"]},
                "params": {"type": "object"},
                "theta": {"type": "array", "items": {"type": "number"}, "minItems": 1},
            },
        },
        "weight": _matrix,
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_values", "trials"],
            "properties": {
                "n_values": {"type": "array", "items": {"type": "integer", "minimum": 16}, "minItems": 1},
                "trials": {"type": "integer", "minimum": 1},
                "mode": {"enum": ["hcrb", "qcrb2"]},
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.3333333333333333},
                "clip_radius": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "restarts": {"type": "integer", "minimum": 1},
                "oracle_stage1": {"type": "boolean"},
                "design": {"enum": ["standard", "min_bias"]},
                "debias": {"type": "boolean"},
                "bootstrap": {"type": "integer", "minimum": 200},
            },
        },
        "measurement": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dim": {"type": "integer", "minimum": 2},
                "params": {"type": "integer", "minimum": 1},
                "kinds": {
                    "type": "array",
                    "items": {"enum": ["fisher-symmetric", "matsumoto"]},
                    "minItems": 1,
                },
            },
        },
        "draws": {"type": "integer", "minimum": 1},
        "thresholds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "qfim": {"type": "number", "exclusiveMinimum": 0},
                "hcrb": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "prefix": {"type": "string"},
                "plot": {"type": "boolean"},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": ["integer", "null"], "minimum": 1},
        "hooks": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "corrupt_derivative": {"type": "boolean"},
                "corrupt_povm": {"type": "boolean"},
            },
        },
    },
}

DEFAULTS = {
    "draws": 50,
    "thresholds": {"qfim": 1e-6, "hcrb": 1e-5},
    "output": {"dir": "qbound_out", "prefix": "qbound", "plot": True},
    "seed": 0,
    "workers": None,
    "hooks": {"corrupt_derivative": False, "corrupt_povm": False},
}

SIM_DEFAULTS = {"mode": "hcrb", "delta": 0.1, "clip_radius": None, "restarts": 8, "oracle_stage1": False, "bootstrap": 200,
                "design": "min_bias", "debias": True}


class ConfigError(ValueError):
    pass


class VerificationFailure(RuntimeError):
    pass


def _field(path) -> str:
    return "/".join(str(p) for p in path) or "<root>"


def normalize_config(raw: dict) -> dict:
    """Validate against the schema and fill defaults; idempotent."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = [f"{_field(e.absolute_path)}: {e.message}" for e in errors]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(msgs))
    cfg = copy.deepcopy(raw)
    for key, val in DEFAULTS.items():
        if isinstance(val, dict):
            cfg[key] = {**val, **cfg.get(key, {})}
        else:
            cfg.setdefault(key, val)
    if "simulation" in cfg:
        cfg["simulation"] = {**SIM_DEFAULTS, **cfg["simulation"]}
    if "family" in cfg:
        cfg["family"].setdefault("params", {})
    if "weight" in cfg:
        w = cfg["weight"]
        if len({len(row) for row in w}) != 1 or len(w[0]) != len(w):
            raise ConfigError("invalid configuration:\n  weight: matrix must be square")
        wa = np.array(w, dtype=float)
        if np.max(np.abs(wa - wa.T)) > 1e-12 * max(1.0, np.max(np.abs(wa))):
            raise ConfigError("invalid configuration:\n  weight: matrix must be symmetric")
        if np.linalg.eigvalsh(wa)[0] <= 0:
            raise ConfigError("invalid configuration:\n  weight: matrix must be positive definite")
    return cfg


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return normalize_config(raw)


def _family_point(cfg: dict, need_theta: bool = True):
    if "family" not in cfg:
        raise ConfigError("invalid configuration:\n  family: required for this command")
    spec = cfg["family"]
    try:
        fam = builtin_family(spec["name"], **spec["params"])
    except TypeError as exc:
        raise ConfigError(f"invalid configuration:\n  family/params: {exc}") from exc
    theta = None
    if need_theta:
        if "theta" not in spec:
            raise ConfigError("invalid configuration:\n  family/theta: required for this command")
        theta = np.array(spec["theta"], dtype=float)
        if theta.shape != (fam.m,):
            raise ConfigError(f"invalid configuration:\n  family/theta: expected {fam.m} values")
        if not fam.contains(theta):
            raise ConfigError("invalid configuration:\n  family/theta: outside the parameter domain")
    return fam, theta


def _weight(cfg: dict, m: int) -> np.ndarray:
    if "weight" not in cfg:
        return np.eye(m)
    w = np.array(cfg["weight"], dtype=float)
    if w.shape != (m, m):
        raise ConfigError(f"invalid configuration:\n  weight: expected a {m}x{m} matrix")
    return check_weight(w, m)


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


# commands ---------------------------------------------------------------------


def cmd_bounds(cfg: dict) -> int:
    fam, theta = _family_point(cfg)
    w = _weight(cfg, fam.m)
    t0 = time.perf_counter()
    j = qfim_mixed(spectral(fam, theta))
    c_f = qcrb(fam, theta, w)
    t1 = time.perf_counter()
    res = hcrb_mixed(fam, theta, w)
    t2 = time.perf_counter()
    report = {
        "family": fam.name,
        "theta": theta,
        "weight": w,
        "J": j,
        "c_f": c_f,
        "c_h": res.value,
        "ratio_h_to_f": res.value / c_f,
        "solver_gap": res.gap,
        "solver_relative_gap": res.extras["relative_gap"],
        "solver_iterations": res.solution.iterations,
        "timings": {"qcrb_s": t1 - t0, "hcrb_s": t2 - t1},
    }
    out = _out_dir(cfg)
    _write_json(out / f"{cfg['output']['prefix']}_bounds.json", report)
    sys.stdout.write(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")
    return EXIT_OK


def cmd_verify_theorem1(cfg: dict) -> int:
    fam, _ = _family_point(cfg, need_theta=False)
    w = _weight(cfg, fam.m)
    rng = np.random.default_rng(cfg["seed"])
    corrupt = cfg["hooks"]["corrupt_derivative"]
    rows = []
    for k in range(cfg["draws"]):
        theta = fam.sample_theta(rng)
        u = haar_unitary(fam.r, rng)
        rec = verify_theorem1(fam, theta, u, w, corrupt_derivative=corrupt)
        rows.append(
            {
                "draw": k,
                "theta": theta.tolist(),
                "residual_qfim": rec.residual1,
                "residual_hcrb": rec.residual2,
                "c_h_mixed": rec.c_h_mixed,
                "c_h_pure": rec.c_h_pure,
            }
        )
        log.info("draw %d: residuals %.3e %.3e", k, rec.residual1, rec.residual2)
    th = cfg["thresholds"]
    max1 = max(r["residual_qfim"] for r in rows)
    max2 = max(r["residual_hcrb"] for r in rows)
    passed = max1 <= th["qfim"] and max2 <= th["hcrb"]
    out = _out_dir(cfg)
    prefix = cfg["output"]["prefix"]
    with open(out / f"{prefix}_theorem1.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["draw", "residual_qfim", "residual_hcrb", "c_h_mixed", "c_h_pure"])
        for r in rows:
            wr.writerow([r["draw"], repr(r["residual_qfim"]), repr(r["residual_hcrb"]), repr(r["c_h_mixed"]), repr(r["c_h_pure"])])
    report = {"family": fam.name, "draws": rows, "max_residual_qfim": max1, "max_residual_hcrb": max2,
              "thresholds": th, "passed": passed}
    _write_json(out / f"{prefix}_theorem1.json", report)
    sys.stdout.write(json.dumps({"passed": passed, "max_residual_qfim": max1, "max_residual_hcrb": max2}) + "\n")
    return EXIT_OK if passed else EXIT_VERIFY


def _check(name: str, value: float, limit: float, results: list) -> None:
    results.append({"check": name, "value": float(value), "limit": float(limit), "passed": bool(value <= limit)})


def _measurement_point(cfg: dict, rng):
    """State, derivatives, weight and label for the check-measurement command."""
    if "family" in cfg:
        fam, theta = _family_point(cfg)
        w = _weight(cfg, fam.m)
        pf = purify(fam, theta, haar_unitary(fam.r, rng))
        psi, dpsi = pf.psi_and_derivatives(theta)
        return psi, dpsi, embed_weight(w, fam.r), fam.m, f"{fam.name} purification"
    meas = cfg.get("measurement", {})
    n = meas.get("dim", 4)
    k = meas.get("params", 2)
    psi = haar_unitary(n, rng)[:, 0]
    dpsi = rng.standard_normal((k, n)) + 1j * rng.standard_normal((k, n))
    dpsi = dpsi - np.outer(dpsi @ psi.conj(), psi)  # tangent to the state
    return psi, dpsi, np.eye(k), k, f"random pure state, N={n}"


def _corrupt(povm: POVM) -> POVM:
    vecs = povm.vectors.copy()
    vecs[0] *= 1.05
    return POVM(vectors=vecs)


def cmd_check_measurement(cfg: dict) -> int:
    rng = np.random.default_rng(cfg["seed"])
    psi, dpsi, w_star, m, label = _measurement_point(cfg, rng)
    kinds = cfg.get("measurement", {}).get("kinds", ["fisher-symmetric", "matsumoto"])
    corrupt = cfg["hooks"]["corrupt_povm"]
    j = qfim_pure(psi, dpsi)
    jinv = qfim_inverse(j)
    results: list = []
    k = dpsi.shape[0]
    ref = np.zeros(k)

    if "fisher-symmetric" in kinds:
        povm = fisher_symmetric_povm(psi)
        if corrupt:
            povm = _corrupt(povm)
        _check("fisher_symmetric/completeness", povm.completeness_error(), 1e-10, results)
        p, dp = outcome_probabilities(povm, psi=psi, dpsi=dpsi)
        _check("fisher_symmetric/uniform_probabilities", np.max(np.abs(p - 1.0 / povm.size)), 1e-12, results)
        try:
            info = cfim(povm, psi=psi, dpsi=dpsi)
            _check("fisher_symmetric/cfim_half_qfim", np.max(np.abs(info - j / 2)), 1e-8, results)
            table = canonical_from_state(povm, psi, dpsi, ref)
            est = table.estimates
            _check("canonical/unbiased", np.max(np.abs(p @ est - ref)), 1e-8, results)
            _check("canonical/jacobian", np.max(np.abs(dp @ est - np.eye(k))), 1e-6, results)
            cov = np.einsum("l,li,lj->ij", p, est - ref, est - ref)
            _check("canonical/covariance_two_jinv", np.max(np.abs(cov - 2 * jinv)), 1e-6, results)
        except ValidationError as exc:
            results.append({"check": "fisher_symmetric/construction", "passed": False, "error": str(exc)})

    if "matsumoto" in kinds:
        res = matsumoto_from_state(psi, dpsi, w_star, reference=ref, m=m)
        povm = _corrupt(res.povm) if corrupt else res.povm
        _check("matsumoto/completeness", povm.completeness_error(), 1e-8, results)
        p, dp = outcome_probabilities(povm, psi=psi, dpsi=dpsi)
        est = res.table.estimates
        _check("matsumoto/unbiased", np.max(np.abs(p @ est - ref)), 1e-6, results)
        _check("matsumoto/jacobian", np.max(np.abs(dp @ est - np.eye(k))), 1e-5, results)
        dev = est - ref
        achieved = float(np.einsum("l,li,ij,lj->", p, dev, w_star, dev))
        ratio = achieved / res.bound.value
        results.append({"check": "matsumoto/achieved_over_hcrb", "value": ratio, "limit": [1 - 1e-4, 1 + 1e-3],
                        "passed": bool(1 - 1e-4 <= ratio <= 1 + 1e-3)})

    passed = all(r["passed"] for r in results)
    out = _out_dir(cfg)
    _write_json(out / f"{cfg['output']['prefix']}_measurement.json", {"point": label, "checks": results, "passed": passed})
    sys.stdout.write(json.dumps({"passed": passed, "failed": [r["check"] for r in results if not r["passed"]]}) + "\n")
    return EXIT_OK if passed else EXIT_VERIFY


def protocol_config(cfg: dict) -> ProtocolConfig:
    fam, theta = _family_point(cfg)
    if "simulation" not in cfg:
        raise ConfigError("invalid configuration:\n  simulation: required for this command")
    sim = cfg["simulation"]
    return ProtocolConfig(
        family=cfg["family"]["name"],
        family_params=cfg["family"]["params"],
        theta_true=theta,
        W=_weight(cfg, fam.m),
        n_values=sim["n_values"],
        trials=sim["trials"],
        mode=sim["mode"],
        delta=sim["delta"],
        seed=cfg["seed"],
        clip_radius=sim["clip_radius"],
        restarts=sim["restarts"],
        oracle_stage1=sim["oracle_stage1"],
        design=sim["design"],
        debias=sim["debias"],
    )


def _csv_row(s) -> list:
    return [s.n, s.n1, s.n2, s.trials, s.mode, repr(s.n_tr_WV), repr(s.n_tr_WV_stderr), repr(s.bias_norm),
            repr(s.event_fail_rate), repr(s.target_bound), repr(s.ratio_to_target)]


def cmd_simulate(cfg: dict, plot: bool = True) -> int:
    pc = protocol_config(cfg)
    out = _out_dir(cfg)
    prefix = cfg["output"]["prefix"]
    csv_path = out / f"{prefix}_simulate.csv"
    json_path = out / f"{prefix}_simulate.json"
    summaries = []
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        fh.flush()

        def on_result(summ, recs):
            summaries.append(summ)
            wr.writerow(_csv_row(summ))
            fh.flush()
            _write_json(json_path, {"config": cfg, "protocol": pc.to_dict(), "summaries": [s.to_dict() for s in summaries]})
            print(f"n={summ.n}: n Tr(WV) = {summ.n_tr_WV:.4f} +- {summ.n_tr_WV_stderr:.4f} "
                  f"(target {summ.target_bound:.4f})", file=sys.stderr)

        simulate(pc, workers=cfg["workers"], on_result=on_result, n_boot=cfg["simulation"]["bootstrap"])
    if plot and cfg["output"]["plot"]:
        from .plotting import convergence_figure

        convergence_figure(summaries, out / f"{prefix}_simulate.png", title=f"{pc.family}, mode {pc.mode}")
    return EXIT_OK


COMMANDS = {
    "bounds": cmd_bounds,
    "verify-theorem1": cmd_verify_theorem1,
    "simulate": cmd_simulate,
    "check-measurement": cmd_check_measurement,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qbound", description="Multi-parameter quantum estimation bounds and protocol simulation.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON configuration file")
    ap.add_argument("--seed", type=int, help="override the master seed")
    ap.add_argument("--workers", type=int, help="worker processes for simulate (default: $QBOUND_WORKERS or 1)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--no-plot", action="store_true", help="simulate: skip the PNG figure")
    ap.add_argument("-v", "--verbose", action="store_true", help="progress logging to stderr")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("invalid configuration:\n  seed: must be non-negative")
            cfg["seed"] = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("invalid configuration:\n  workers: must be positive")
            cfg["workers"] = args.workers
        if cfg["workers"] is None:
            cfg["workers"] = default_workers()
        if args.out is not None:
            cfg["output"]["dir"] = args.out
        if args.command == "simulate":
            return cmd_simulate(cfg, plot=not args.no_plot)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ConditioningError, CompletionError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValidationError as exc:
        print(f"invalid configuration:\n  {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationFailure as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
