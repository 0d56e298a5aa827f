"""Monte Carlo simulation of the two-stage purification-based estimation protocol."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .bounds import embed_weight, hcrb_mixed, qcrb
from .measures import (
    DESIGNS,
    canonical_estimator,
    debias_table,
    fisher_symmetric_povm,
    matsumoto_povm,
    shadow_fit_covariance,
    shadow_mean,
)
from .numkit import ValidationError, haar_unitary
from .statemodel import StateFamily, builtin_family, purified_state, purify, support_eig

log = logging.getLogger(__name__)

MIN_COPIES = 16
MIN_TRIALS = 100
BOOTSTRAP = 200
FIT_RESTARTS = 8
FIT_MIN_OVERLAP = 0.1
MODES = ("hcrb", "qcrb2")


class TooFewCopiesError(ValidationError):
    pass


class InsufficientTrialsError(ValidationError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    family: str
    theta_true: tuple
    W: tuple
    n_values: tuple
    trials: int
    mode: str = "hcrb"
    delta: float = 0.1
    seed: int = 0
    family_params: tuple = ()
    clip_radius: float | None = None
    restarts: int = FIT_RESTARTS
    oracle_stage1: bool = False  # diagnostic: skip Stage 1 and use the true (theta, U)
    design: str = "min_bias"
    debias: bool = True  # subtract the predicted second-order bias from the stage-1 error

    def __post_init__(self):
        object.__setattr__(self, "theta_true", tuple(float(t) for t in np.ravel(self.theta_true)))
        w = np.atleast_2d(np.asarray(self.W, dtype=float))
        object.__setattr__(self, "W", tuple(tuple(float(v) for v in row) for row in w))
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        params = self.family_params.items() if isinstance(self.family_params, dict) else self.family_params
        object.__setattr__(self, "family_params", tuple(sorted((str(k), v) for k, v in params)))
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.design not in DESIGNS:
            raise ValidationError(f"design must be one of {DESIGNS}")
        if not 0.0 < self.delta < 1.0 / 3.0:
            raise ValidationError("delta must lie in (0, 1/3)")
        if any(n < MIN_COPIES for n in self.n_values):
            raise TooFewCopiesError(f"every n must be at least {MIN_COPIES}")
        if self.trials < 1:
            raise ValidationError("trials must be positive")
        fam = self.build_family()
        if not fam.contains(np.array(self.theta_true)):
            raise ValidationError("theta_true lies outside the parameter domain")
        if w.shape != (fam.m, fam.m) or np.max(np.abs(w - w.T)) > 1e-12 or np.linalg.eigvalsh(w)[0] <= 0:
            raise ValidationError("W must be a symmetric positive definite m x m matrix")

    def build_family(self) -> StateFamily:
        return _family(self.family, self.family_params)

    @property
    def weight(self) -> np.ndarray:
        return np.array(self.W)

    @property
    def theta(self) -> np.ndarray:
        return np.array(self.theta_true)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["family_params"] = dict(self.family_params)
        out["theta_true"] = list(self.theta_true)
        out["W"] = [list(r) for r in self.W]
        out["n_values"] = list(self.n_values)
        return out


@lru_cache(maxsize=None)
def _family(name: str, params: tuple) -> StateFamily:
    return builtin_family(name, **dict(params))


def split_copies(n: int, delta: float = 0.1) -> tuple[int, int]:
    """``n1 = ceil(n^(2/(3(1-delta))))`` clamped to ``[1, n-1]``."""
    if n < MIN_COPIES:
        raise TooFewCopiesError(f"need at least {MIN_COPIES} copies, got {n}")
    n1 = math.ceil(n ** (2.0 / (3.0 * (1.0 - delta))))
    n1 = min(max(n1, 1), n - 1)
    return n1, n - n1


def event_threshold(n1: int, delta: float) -> float:
    """Infidelity threshold for the success-event proxy.

    The event asks for trace distance ``n1^(-(1-delta)/2)`` between the true
    and shadow states; allowing a factor 2 for the approximate fit gives a
    trace distance of ``3 n1^(-(1-delta)/2)`` to the fitted pure state, i.e.
    infidelity ``(9/4) n1^(delta-1)``.
    """
    return 2.25 * n1 ** (delta - 1.0)


@dataclass
class FitResult:
    theta: np.ndarray
    u: np.ndarray
    overlap: float
    ok: bool
    reason: str = ""


def _fit_overlap(family: StateFamily, vm: np.ndarray, theta: np.ndarray) -> float:
    # max over U of |<psi_{theta,U}|v>|^2 = ||sqrt(rho) Vm||_1^2 = (Tr sqrt(Vm^dag rho Vm))^2
    rho = family.rho_fn(theta)
    g = vm.conj().T @ rho @ vm
    ev = np.linalg.eigvalsh(0.5 * (g + g.conj().T))
    return float(np.sum(np.sqrt(np.clip(ev, 0.0, None))) ** 2)


def best_environment(family: StateFamily, theta, vm: np.ndarray) -> np.ndarray:
    """Environment unitary maximizing the overlap of ``psi_{theta,U}`` with the vector ``vm`` (as ``d x r``)."""
    lam, vecs, _ = support_eig(family.rho_fn(np.asarray(theta)), family.r)
    b = (np.sqrt(lam)[:, None] * vecs.conj().T) @ vm
    p, _, qh = np.linalg.svd(b)
    # <psi|v> = Tr(U^* B) is maximal for U^* = Q P^dagger
    return (qh.conj().T @ p.conj().T).conj()


def stage1_fit(shadow: np.ndarray, family: StateFamily, rng: np.random.Generator, restarts: int = FIT_RESTARTS) -> FitResult:
    """Closest model state to the top eigenvector of the mean shadow.

    The environment unitary enters the overlap only through a trace-norm
    maximization and is solved in closed form; Nelder-Mead searches over theta
    from ``restarts`` uniform starting points, and the best one is polished.
    """
    shadow = np.asarray(shadow)
    ev, vec = np.linalg.eigh(0.5 * (shadow + shadow.conj().T))
    start = family.sample_theta(rng)
    if ev[-1] - ev[-2] <= 1e-8 * max(1.0, abs(ev[-1])):
        return FitResult(theta=start, u=np.eye(family.r, dtype=complex), overlap=0.0, ok=False,
                         reason="no dominant eigenvector")
    vm = vec[:, -1].reshape(family.d, family.r)

    def loss(t):
        if not family.contains(t):
            return 1.0 + float(np.sum(np.abs(t)))
        try:
            return -_fit_overlap(family, vm, t)
        except ValidationError:
            return 1.0

    best = None
    starts = [start] + [family.sample_theta(rng) for _ in range(max(restarts, 1) - 1)]
    for t0 in starts:
        res = minimize(loss, t0, method="Nelder-Mead", options={"xatol": 1e-4, "fatol": 1e-8, "maxiter": 400})
        if best is None or res.fun < best.fun:
            best = res
    res = minimize(loss, best.x, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-15, "maxiter": 2000})
    if res.fun > best.fun:
        res = best
    theta = np.asarray(res.x, dtype=float)
    overlap = -float(res.fun)
    if not family.contains(theta) or overlap < FIT_MIN_OVERLAP:
        return FitResult(theta=theta if family.contains(theta) else start, u=np.eye(family.r, dtype=complex),
                         overlap=max(overlap, 0.0), ok=False, reason="fit overlap below threshold")
    try:
        u = best_environment(family, theta, vm)
    except ValidationError as exc:
        return FitResult(theta=theta, u=np.eye(family.r, dtype=complex), overlap=overlap, ok=False, reason=str(exc))
    return FitResult(theta=theta, u=u, overlap=overlap, ok=True)


@dataclass
class TrialRecord:
    trial_id: int
    n: int
    n1: int
    n2: int
    u_true: np.ndarray
    theta_check: np.ndarray
    u_check: np.ndarray
    stage1_infidelity: float
    event_ok: bool
    stage1_ok: bool
    theta_hat: np.ndarray
    cond_bias: np.ndarray  # exact E[theta_hat | stage 1] - theta_true
    clipped: int = 0
    error: str = ""

    @property
    def failed(self) -> bool:
        return not (self.event_ok and self.stage1_ok) or bool(self.error)


def trial_rng(seed: int, n: int, trial_id: int) -> np.random.Generator:
    """Counter-based stream for one trial, independent of execution order."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(n), int(trial_id)))
    return np.random.Generator(np.random.Philox(ss))


def _stage2_table(config: ProtocolConfig, family: StateFamily, theta_check, u_check, n1: int):
    pf = purify(family, theta_check, u_check)
    psi, dpsi = pf.psi_and_derivatives(theta_check)
    need_hessian = config.design == "min_bias" or (config.debias and not config.oracle_stage1)
    d2psi = pf.psi_hessian(theta_check) if need_hessian else None
    if config.mode == "hcrb":
        res = matsumoto_povm(pf, theta_check, None, embed_weight(config.weight, family.r),
                             clip_radius=config.clip_radius, design=config.design)
        povm, table = res.povm, res.table
    else:
        if config.design == "min_bias":
            povm = fisher_symmetric_povm(psi, design="min_bias", dpsi=dpsi, d2psi=d2psi, w=config.weight)
        else:
            povm = fisher_symmetric_povm(psi)
        table = canonical_estimator(povm, pf, theta_check, clip_radius=config.clip_radius)
    if config.debias and not config.oracle_stage1:
        table = debias_table(table, povm, psi, dpsi, d2psi, shadow_fit_covariance(psi, dpsi, n1))
    return povm, table


def run_trial(config: ProtocolConfig, n: int, trial_id: int) -> TrialRecord:
    family = config.build_family()
    theta_true = config.theta
    rng = trial_rng(config.seed, n, trial_id)
    n1, n2 = split_copies(n, config.delta)
    u_true = haar_unitary(family.r, rng)
    psi_true = purified_state(family, theta_true, u_true)

    if config.oracle_stage1:
        fit = FitResult(theta=theta_true.copy(), u=u_true, overlap=1.0, ok=True)
    else:
        shadow = shadow_mean(psi_true, n1, rng)
        fit = stage1_fit(shadow, family, rng, restarts=config.restarts)
    theta_check = fit.theta
    try:
        psi_fit = purified_state(family, theta_check, fit.u)
        infid = float(max(0.0, 1.0 - abs(np.vdot(psi_fit, psi_true)) ** 2))
    except ValidationError:
        infid = 1.0
    event_ok = infid <= event_threshold(n1, config.delta)

    error = ""
    clipped = 0
    theta_hat = theta_check.copy()
    cond_bias = theta_check - theta_true
    if fit.ok:
        try:
            povm, table = _stage2_table(config, family, theta_check, fit.u, n1)
            p = povm.probabilities(psi_true)
            p = p / p.sum()
            counts = rng.multinomial(n2, p)
            est = table.theta
            theta_hat = counts @ est / n2
            cond_bias = p @ est - theta_true
            clipped = table.n_clipped
        except (ValidationError, RuntimeError, np.linalg.LinAlgError) as exc:
            error = f"{type(exc).__name__}: {exc}"
            theta_hat = theta_check.copy()
            cond_bias = theta_check - theta_true
    else:
        error = fit.reason
    return TrialRecord(
        trial_id=trial_id,
        n=n,
        n1=n1,
        n2=n2,
        u_true=u_true,
        theta_check=theta_check,
        u_check=fit.u,
        stage1_infidelity=infid,
        event_ok=bool(event_ok),
        stage1_ok=fit.ok,
        theta_hat=np.asarray(theta_hat, dtype=float),
        cond_bias=np.asarray(cond_bias, dtype=float),
        clipped=clipped,
        error=error,
    )


def _run_chunk(args) -> list[TrialRecord]:
    config, n, ids = args
    return [run_trial(config, n, i) for i in ids]


@dataclass
class MsemSummary:
    n: int
    n1: int
    n2: int
    trials: int
    mode: str
    V: np.ndarray
    n_tr_WV: float
    n_tr_WV_stderr: float
    bias: np.ndarray
    bias_stderr: np.ndarray
    bias_norm: float
    bias_norm_stderr: float
    event_fail_rate: float
    n_V_stderr: np.ndarray
    n_tr_WV_ci: tuple
    target_bound: float = float("nan")
    extras: dict = field(default_factory=dict)

    @property
    def ratio_to_target(self) -> float:
        return self.n_tr_WV / self.target_bound

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "n1": self.n1,
            "n2": self.n2,
            "trials": self.trials,
            "mode": self.mode,
            "V": self.V.tolist(),
            "nV": (self.n * self.V).tolist(),
            "n_V_stderr": self.n_V_stderr.tolist(),
            "n_tr_WV": self.n_tr_WV,
            "n_tr_WV_stderr": self.n_tr_WV_stderr,
            "n_tr_WV_ci": list(self.n_tr_WV_ci),
            "bias": self.bias.tolist(),
            "bias_stderr": self.bias_stderr.tolist(),
            "bias_norm": self.bias_norm,
            "bias_norm_stderr": self.bias_norm_stderr,
            "event_fail_rate": self.event_fail_rate,
            "target_bound": self.target_bound,
            "ratio_to_target": self.ratio_to_target,
            **self.extras,
        }


def _fsum_mean(rows: np.ndarray) -> np.ndarray:
    flat = rows.reshape(rows.shape[0], -1)
    return np.array([math.fsum(col) for col in flat.T]).reshape(rows.shape[1:]) / rows.shape[0]


def aggregate(records: Sequence[TrialRecord], theta_true, w, n_boot: int = BOOTSTRAP, seed: int = 0,
              mode: str = "", min_trials: int = MIN_TRIALS) -> MsemSummary:
    """Empirical MSEM, ``n Tr(W V)``, bias and bootstrap standard errors for one ``n``."""
    if len(records) < min_trials:
        raise InsufficientTrialsError(f"need at least {min_trials} trials, got {len(records)}")
    if n_boot < BOOTSTRAP:
        raise ValidationError(f"need at least {BOOTSTRAP} bootstrap resamples")
    recs = sorted(records, key=lambda r: r.trial_id)
    ns = {r.n for r in recs}
    if len(ns) != 1:
        raise ValidationError("records mix different n")
    n = recs[0].n
    theta_true = np.asarray(theta_true, dtype=float)
    w = np.asarray(w, dtype=float)
    dev = np.array([r.theta_hat - theta_true for r in recs])
    t = dev.shape[0]
    outer = np.einsum("ti,tj->tij", dev, dev)
    v = _fsum_mean(outer)
    v = 0.5 * (v + v.T)
    bias = _fsum_mean(dev)
    fail = float(np.mean([r.failed for r in recs]))

    brng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(n), 2**31))))
    idx = brng.integers(0, t, size=(n_boot, t))
    bv = np.einsum("bti,btj->bij", dev[idx], dev[idx]) / t
    btr = n * np.einsum("ij,bji->b", w, bv)
    bbias = dev[idx].mean(axis=1)
    tr = float(n * np.trace(w @ v))
    lo, hi = np.percentile(btr, [2.5, 97.5])
    return MsemSummary(
        n=n,
        n1=recs[0].n1,
        n2=recs[0].n2,
        trials=t,
        mode=mode,
        V=v,
        n_tr_WV=tr,
        n_tr_WV_stderr=float(np.std(btr, ddof=1)),
        bias=bias,
        bias_stderr=np.std(bbias, axis=0, ddof=1),
        bias_norm=float(np.linalg.norm(bias)),
        bias_norm_stderr=float(np.std(np.linalg.norm(bbias, axis=1), ddof=1)),
        event_fail_rate=fail,
        n_V_stderr=n * np.std(bv, axis=0, ddof=1),
        n_tr_WV_ci=(float(lo), float(hi)),
    )


def target_bound(config: ProtocolConfig) -> float:
    family = config.build_family()
    if config.mode == "hcrb":
        return hcrb_mixed(family, config.theta, config.weight).value
    return 2.0 * qcrb(family, config.theta, config.weight)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("QBOUND_WORKERS", "1")))
    except ValueError:
        return 1


def run_trials(config: ProtocolConfig, n: int, workers: int | None = None, pool=None) -> list[TrialRecord]:
    ids = list(range(config.trials))
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 and pool is None:
        return _run_chunk((config, n, ids))
    nchunks = max(1, min(len(ids), 4 * workers))
    chunks = [(config, n, ids[k::nchunks]) for k in range(nchunks)]
    if pool is not None:
        parts = list(pool.map(_run_chunk, chunks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_chunk, chunks))
    return sorted((r for part in parts for r in part), key=lambda r: r.trial_id)


def simulate(config: ProtocolConfig, workers: int | None = None,
             on_result: Callable[[MsemSummary, list[TrialRecord]], None] | None = None,
             n_boot: int = BOOTSTRAP) -> list[MsemSummary]:
    """Run all trials for every ``n``; ``on_result`` is called as soon as each ``n`` completes."""
    workers = default_workers() if workers is None else max(1, int(workers))
    target = target_bound(config)
    out = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for n in config.n_values:
            log.info("simulating n=%d with %d trials", n, config.trials)
            recs = run_trials(config, n, workers=workers, pool=pool)
            summ = aggregate(recs, config.theta, config.weight, n_boot=n_boot, seed=config.seed, mode=config.mode,
                             min_trials=min(MIN_TRIALS, config.trials))
            summ.target_bound = target
            summ.extras["stage2_errors"] = sum(1 for r in recs if r.error)
            summ.extras["median_stage1_infidelity"] = float(np.median([r.stage1_infidelity for r in recs]))
            out.append(summ)
            if on_result is not None:
                on_result(summ, recs)
    finally:
        if pool is not None:
            pool.shutdown()
    return out
