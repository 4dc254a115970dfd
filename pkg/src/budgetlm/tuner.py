"""Black-box hyperparameter search: batched Gaussian-process bandits with
the expected-improvement acquisition, minimizing validation NLL.

Dimensions live on [0, 1] internally (log-scaled ones through their
logarithm). The surrogate is a Matern-5/2 GP with per-dimension
lengthscales fit by maximizing marginal likelihood from multiple random
starts (gradient-free polish). Batches use constant-liar fantasies: each
suggestion is appended as a pseudo-observation at the posterior mean
before the next one is chosen, which also covers still-pending trials
from earlier batches.

For a minimization objective with incumbent f*, posterior mean mu and
stddev sigma:

    z  = (f* - mu) / sigma
    EI = (f* - mu) * Phi(z) + sigma * phi(z)      (sigma > 0)
    EI = max(f* - mu, 0)                          (sigma = 0)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from .errors import ContractError, NumericError

SQRT5 = math.sqrt(5.0)


def std_normal_pdf(z):
    return np.exp(-0.5 * np.square(z)) / math.sqrt(2.0 * math.pi)


def std_normal_cdf(z):
    return 0.5 * (1.0 + np.vectorize(math.erf)(np.asarray(z, dtype=np.float64) / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# search space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dimension:
    name: str
    low: float
    high: float
    scale: str = "linear"  # "linear" | "log"

    def __post_init__(self):
        if not (math.isfinite(self.low) and math.isfinite(self.high)) or self.low >= self.high:
            raise ContractError(f"dimension {self.name!r}: bounds must be finite with low < high")
        if self.scale not in ("linear", "log"):
            raise ContractError(f"dimension {self.name!r}: scale must be linear or log")
        if self.scale == "log" and self.low <= 0:
            raise ContractError(f"dimension {self.name!r}: log scale needs positive bounds")

    def decode(self, u: float) -> float:
        u = min(1.0, max(0.0, float(u)))
        if self.scale == "log":
            return math.exp(math.log(self.low) + u * (math.log(self.high) - math.log(self.low)))
        return self.low + u * (self.high - self.low)

    def encode(self, value: float) -> float:
        if self.scale == "log":
            u = (math.log(value) - math.log(self.low)) / (math.log(self.high) - math.log(self.low))
        else:
            u = (value - self.low) / (self.high - self.low)
        return min(1.0, max(0.0, u))


@dataclass(frozen=True)
class HyperparameterSpace:
    dimensions: tuple[Dimension, ...]

    def __post_init__(self):
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ContractError("dimension names must be distinct")

    def __len__(self) -> int:
        return len(self.dimensions)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    def decode(self, unit: np.ndarray) -> dict[str, float]:
        return {d.name: d.decode(u) for d, u in zip(self.dimensions, unit)}

    def encode(self, values: dict[str, float]) -> np.ndarray:
        return np.array([d.encode(values[d.name]) for d in self.dimensions])


DEFAULT_SPACE = HyperparameterSpace((
    Dimension("learning_rate", 1e-4, 1e-1, "log"),
    Dimension("input_embedding_ratio", 0.01, 1.0, "linear"),
    Dimension("input_drop", 0.0, 0.8, "linear"),
    Dimension("state_drop", 0.0, 0.8, "linear"),
    Dimension("output_drop", 0.0, 0.8, "linear"),
    Dimension("weight_decay", 1e-7, 1e-3, "log"),
))


@dataclass
class Trial:
    id: int
    unit: np.ndarray
    values: dict[str, float]
    status: str = "pending"  # pending | complete | failed
    objective: float | None = None
    test_nll: float = float("nan")
    steps: int = 0
    wall_s: float = 0.0
    seed: int = 0


# ---------------------------------------------------------------------------
# Gaussian-process surrogate
# ---------------------------------------------------------------------------

def _matern52(xa: np.ndarray, xb: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    d = xa[:, None, :] / lengthscales - xb[None, :, :] / lengthscales
    r = SQRT5 * np.sqrt(np.maximum(np.sum(d * d, axis=2), 0.0))
    return (1.0 + r + r * r / 3.0) * np.exp(-r)


class GpSurrogate:
    """GP regression on the unit cube with standardized objectives and a
    constant mean at their empirical average."""

    def __init__(self, x: np.ndarray, y: np.ndarray, lengthscales: np.ndarray,
                 signal_var: float, noise_var: float):
        if len(x) < 1:
            raise ContractError("the surrogate needs at least one observation")
        self.x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self.y = np.asarray(y, dtype=np.float64)
        self.lengthscales = np.asarray(lengthscales, dtype=np.float64)
        self.signal_var = float(signal_var)
        self.noise_var = float(noise_var)
        self.y_mean = float(np.mean(self.y))
        y_std = float(np.std(self.y))
        self.y_std = y_std if y_std > 1e-12 else 1.0
        self._z = (self.y - self.y_mean) / self.y_std
        self._factor = None
        self._alpha = None
        self._prepare()

    def _prepare(self) -> None:
        n = len(self.x)
        k = self.signal_var * _matern52(self.x, self.x, self.lengthscales)
        jitter = 1e-10
        for _ in range(8):
            try:
                chol = np.linalg.cholesky(k + (self.noise_var + jitter) * np.eye(n))
                break
            except np.linalg.LinAlgError:
                jitter *= 100.0
        else:
            raise NumericError("kernel matrix stayed singular after jitter escalation")
        self._factor = chol
        self._alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, self._z))

    def posterior(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and stddev (in raw objective units) at query rows."""
        query = np.atleast_2d(np.asarray(query, dtype=np.float64))
        ks = self.signal_var * _matern52(query, self.x, self.lengthscales)
        mu = ks @ self._alpha
        v = np.linalg.solve(self._factor, ks.T)
        var = self.signal_var - np.sum(v * v, axis=0)
        sigma = np.sqrt(np.maximum(var, 0.0))
        return mu * self.y_std + self.y_mean, sigma * self.y_std

    def with_observation(self, x_new: np.ndarray, y_new: float) -> "GpSurrogate":
        """Same hyperparameters, one more (possibly fantasized) observation."""
        return GpSurrogate(np.vstack([self.x, x_new]), np.append(self.y, y_new),
                           self.lengthscales, self.signal_var, self.noise_var)

    def log_marginal_likelihood(self) -> float:
        n = len(self.x)
        return float(-0.5 * self._z @ self._alpha
                     - np.sum(np.log(np.diag(self._factor)))
                     - 0.5 * n * math.log(2.0 * math.pi))


def fit_gp(x: np.ndarray, y: np.ndarray, seed: int = 0, n_starts: int = 24) -> GpSurrogate:
    """Maximize marginal likelihood over (lengthscales, signal, noise) with
    random multi-starts and a gradient-free polish of the best one."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    if n == 1 or np.std(y) < 1e-12:
        return GpSurrogate(x, y, np.full(d, 0.5), 1.0, 1e-6)
    lo = np.concatenate([np.full(d, math.log(0.05)), [math.log(0.05)], [math.log(1e-8)]])
    hi = np.concatenate([np.full(d, math.log(3.0)), [math.log(5.0)], [math.log(0.5)]])

    def objective(theta: np.ndarray) -> float:
        penalty = np.sum(np.square(np.maximum(theta - hi, 0.0))
                         + np.square(np.maximum(lo - theta, 0.0)))
        clipped = np.clip(theta, lo, hi)
        try:
            gp = GpSurrogate(x, y, np.exp(clipped[:d]), math.exp(clipped[d]),
                             math.exp(clipped[d + 1]))
            return -gp.log_marginal_likelihood() + 1e6 * penalty
        except (NumericError, np.linalg.LinAlgError):
            return 1e12

    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFFFFFFFFFF, 101]))
    starts = [lo + rng.random(d + 2) * (hi - lo) for _ in range(n_starts)]
    starts.append(np.concatenate([np.full(d, math.log(0.5)), [0.0], [math.log(1e-4)]]))
    scored = sorted(starts, key=objective)
    best_theta, best_val = None, math.inf
    for start in scored[:3]:
        res = optimize.minimize(objective, start, method="Nelder-Mead",
                                options={"maxiter": 200 * (d + 2), "xatol": 1e-3,
                                         "fatol": 1e-4})
        if res.fun < best_val:
            best_val, best_theta = res.fun, res.x
    theta = np.clip(best_theta, lo, hi)
    return GpSurrogate(x, y, np.exp(theta[:d]), math.exp(theta[d]), math.exp(theta[d + 1]))


# ---------------------------------------------------------------------------
# acquisition
# ---------------------------------------------------------------------------

def expected_improvement(mu, sigma, incumbent: float):
    """EI of sampling a point with posterior (mu, sigma) against the
    incumbent best, minimization convention. Vectorized; sigma >= 0."""
    scalar = np.isscalar(mu) or np.ndim(mu) == 0
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    gap = incumbent - mu
    out = np.maximum(gap, 0.0)
    positive = sigma > 0
    if np.any(positive):
        z = gap[positive] / sigma[positive]
        out[positive] = gap[positive] * std_normal_cdf(z) + sigma[positive] * std_normal_pdf(z)
    return float(out[0]) if scalar else out


def gp_posterior(surrogate: GpSurrogate, query: np.ndarray) -> tuple[float, float]:
    """Posterior (mean, stddev) at a single point."""
    mu, sigma = surrogate.posterior(np.atleast_2d(query))
    return float(mu[0]), float(sigma[0])


def _sobol(d: int, n: int, seed: int) -> np.ndarray:
    sampler = qmc.Sobol(d, scramble=True, seed=seed)
    return sampler.random(n)


def _polish(gp: GpSurrogate, incumbent: float, point: np.ndarray) -> np.ndarray:
    """Coordinate-wise pattern search around the best candidate."""
    best = point.copy()
    mu, sigma = gp.posterior(best[None, :])
    best_ei = float(expected_improvement(mu, sigma, incumbent)[0])
    for step in (0.05, 0.01):
        for dim in range(len(best)):
            for direction in (-1.0, 1.0):
                trial = best.copy()
                trial[dim] = min(1.0, max(0.0, trial[dim] + direction * step))
                mu, sigma = gp.posterior(trial[None, :])
                ei = float(expected_improvement(mu, sigma, incumbent)[0])
                if ei > best_ei:
                    best, best_ei = trial, ei
    return best


def suggest_batch(space: HyperparameterSpace, trials: Sequence[Trial],
                  batch_size: int, seed: int = 0,
                  n_candidates: int = 4096) -> list[np.ndarray]:
    """Next `batch_size` unit-cube points.

    The first 2*dims points of a study come from one scrambled Sobol
    design (indexed by how many trials exist so far). Afterwards each
    point maximizes EI over quasi-random candidates plus a local polish,
    then joins the surrogate as a posterior-mean fantasy so the rest of
    the batch avoids it; pending trials are fantasized the same way.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    d = len(space)
    n_init = 2 * d
    design = _sobol(d, max(n_init, 1), seed=(seed * 2 + 1) & 0x7FFFFFFF)
    observed = [t for t in trials if t.objective is not None]
    pending = [t for t in trials if t.objective is None]
    points: list[np.ndarray] = []
    gp: GpSurrogate | None = None
    incumbent = min((t.objective for t in observed if t.status == "complete"),
                    default=None)
    n_seen = len(trials)
    for b in range(batch_size):
        index = n_seen + b
        if index < n_init or not observed or incumbent is None:
            if index < n_init:
                points.append(design[index].copy())
            else:  # nothing completed yet; keep space-filling
                points.append(_sobol(d, 1, seed=(seed * 7 + index) & 0x7FFFFFFF)[0])
            continue
        if gp is None:
            x = np.array([t.unit for t in observed])
            y = np.array([t.objective for t in observed])
            gp = fit_gp(x, y, seed=seed)
            for t in pending:
                mu, _ = gp.posterior(np.asarray(t.unit)[None, :])
                gp = gp.with_observation(np.asarray(t.unit)[None, :], float(mu[0]))
        candidates = _sobol(d, n_candidates, seed=(seed * 13 + index) & 0x7FFFFFFF)
        mu, sigma = gp.posterior(candidates)
        ei = expected_improvement(mu, sigma, incumbent)
        chosen = _polish(gp, incumbent, candidates[int(np.argmax(ei))])
        points.append(chosen)
        mu, _ = gp.posterior(chosen[None, :])
        gp = gp.with_observation(chosen[None, :], float(mu[0]))
    return points


# ---------------------------------------------------------------------------
# study coordination
# ---------------------------------------------------------------------------

@dataclass
class TrialTask:
    trial_id: int
    values: dict[str, float]
    seed: int


@dataclass
class TrialOutcome:
    objective: float | None
    test_nll: float = float("nan")
    steps: int = 0
    wall_s: float = 0.0
    error: str | None = None


@dataclass
class StudyResult:
    trials: list[Trial]
    best: Trial | None


LEDGER_FIXED = ("trial_id", "status")
LEDGER_TAIL = ("best_valid_nll", "test_nll", "steps", "wall_s", "seed")


def write_ledger(path: str | Path, space: HyperparameterSpace,
                 trials: Sequence[Trial]) -> None:
    header = list(LEDGER_FIXED) + list(space.names) + list(LEDGER_TAIL)
    lines = ["\t".join(header)]
    for t in trials:
        row = [str(t.id), t.status]
        row += [repr(t.values[name]) for name in space.names]
        row += [repr(t.objective) if t.objective is not None else "nan",
                repr(t.test_nll), str(t.steps), f"{t.wall_s:.3f}", str(t.seed)]
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_ledger(path: str | Path, space: HyperparameterSpace) -> list[Trial]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        return []
    header = lines[0].split("\t")
    expected = list(LEDGER_FIXED) + list(space.names) + list(LEDGER_TAIL)
    if header != expected:
        raise ContractError(f"ledger columns {header} do not match the space {expected}")
    trials = []
    for line in lines[1:]:
        cells = line.split("\t")
        record = dict(zip(header, cells))
        values = {name: float(record[name]) for name in space.names}
        objective = float(record["best_valid_nll"])
        trials.append(Trial(
            id=int(record["trial_id"]),
            unit=space.encode(values),
            values=values,
            status=record["status"],
            objective=None if math.isnan(objective) else objective,
            test_nll=float(record["test_nll"]),
            steps=int(record["steps"]),
            wall_s=float(record["wall_s"]),
            seed=int(record["seed"]),
        ))
    return trials


def _penalty_objective(trials: Sequence[Trial]) -> float:
    done = [t.objective for t in trials if t.status == "complete"]
    if not done:
        return 1.0
    spread = float(np.std(done, ddof=1)) if len(done) > 1 else 0.0
    return max(done) + (spread if spread > 0 else 1.0)


def run_study(space: HyperparameterSpace,
              runner: Callable[[TrialTask], TrialOutcome],
              max_trials: int,
              parallelism: int = 1,
              seed: int = 0,
              ledger_path: str | Path | None = None,
              strategy: str = "gp-ei",
              map_fn: Callable | None = None) -> StudyResult:
    """Dispatch suggestion batches until `max_trials` have run.

    Results are recorded in suggestion order, so a deterministic runner
    yields a bit-identical ledger regardless of scheduling. Runner
    failures become failed trials with a penalty objective (worst
    completed plus one spread) and the study continues.
    """
    if strategy not in ("gp-ei", "random"):
        raise ContractError(f"unknown strategy {strategy!r}")
    trials: list[Trial] = []
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFFFFFFFFFF, 55]))
    while len(trials) < max_trials:
        want = min(parallelism, max_trials - len(trials))
        if strategy == "gp-ei":
            units = suggest_batch(space, trials, want, seed=seed)
        else:
            units = [rng.random(len(space)) for _ in range(want)]
        batch = []
        for unit in units:
            trial = Trial(id=len(trials), unit=np.asarray(unit),
                          values=space.decode(unit),
                          seed=int(np.random.default_rng(
                              np.random.SeedSequence([seed & 0x7FFFFFFFFFFFFFFF,
                                                      77, len(trials)])).integers(0, 2 ** 31)))
            trials.append(trial)
            batch.append(trial)
        tasks = [TrialTask(trial_id=t.id, values=t.values, seed=t.seed) for t in batch]
        if map_fn is not None:
            outcomes = list(map_fn(runner, tasks))
        else:
            outcomes = []
            for task in tasks:
                try:
                    outcomes.append(runner(task))
                except Exception as exc:  # failed trial, study continues
                    outcomes.append(TrialOutcome(objective=None, error=str(exc)))
        for trial, outcome in zip(batch, outcomes):
            ok = (outcome.objective is not None and math.isfinite(outcome.objective)
                  and outcome.error is None)
            if ok:
                trial.status = "complete"
                trial.objective = float(outcome.objective)
            else:
                trial.status = "failed"
                trial.objective = _penalty_objective(trials)
            trial.test_nll = outcome.test_nll
            trial.steps = outcome.steps
            trial.wall_s = outcome.wall_s
            if ledger_path is not None:
                write_ledger(ledger_path, space, trials)
    completed = [t for t in trials if t.status == "complete"]
    best = min(completed, key=lambda t: t.objective) if completed else None
    return StudyResult(trials=trials, best=best)
