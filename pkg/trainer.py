import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import ArgumentError, DegenerateInputError, DivergenceError, NonMonotoneLossError, NumericalOverflowError
from nc_metrics import compare_to_theory, measure
from ufm_model import gradient, init_state, loss

logger = logging.getLogger(__name__)

# ===============================================================
#  CONFIGURATION
# ===============================================================

DEFAULT_RECORD_STRIDE = 100
DEFAULT_GRAD_TOL = 1e-10
DIVERGENCE_THRESHOLD = 1e12
MONOTONE_SLACK = 1e-12
PROGRESS_EVERY = 5000


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    iterations: int
    lr_decay: tuple = None              # (factor, every_n)
    record_stride: int = DEFAULT_RECORD_STRIDE
    grad_tol: float = DEFAULT_GRAD_TOL
    seed: int = 0
    require_monotone: bool = False

    def __post_init__(self):
        # lr = 0 is allowed: it freezes the initial state
        if not self.lr >= 0:
            raise ArgumentError(f"lr must be >= 0, got {self.lr}")
        if self.iterations < 1:
            raise ArgumentError(f"iterations must be >= 1, got {self.iterations}")
        if self.record_stride < 1:
            raise ArgumentError(f"record_stride must be >= 1, got {self.record_stride}")
        if self.lr_decay is not None:
            factor, every = self.lr_decay
            if not 0 < factor <= 1 or int(every) < 1:
                raise ArgumentError(f"lr_decay needs 0 < factor <= 1 and every >= 1, got {self.lr_decay}")
            object.__setattr__(self, "lr_decay", (float(factor), int(every)))

    def lr_at(self, iteration):
        if self.lr_decay is None:
            return self.lr
        factor, every = self.lr_decay
        return self.lr * factor ** (iteration // every)


# ===============================================================
#  TRAJECTORY
# ===============================================================

@dataclass
class Trajectory:
    spec: object
    iterations: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    final_state: object = None
    stopped_early: bool = False

    def record(self, iteration, loss_value, grad_norm, report):
        self.iterations.append(iteration)
        self.losses.append(loss_value)
        self.grad_norms.append(grad_norm)
        self.reports.append(report)

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else None

    @property
    def final_report(self):
        return self.reports[-1] if self.reports else None

    def nc2_columns(self):
        widths = [len(r.nc2) for r in self.reports if r is not None]
        count = max(widths) if widths else self.spec.M
        return [f"nc2_{m}" for m in range(1, count + 1)]

    def to_frame(self):
        """One row per recorded iteration: iter, loss, nc1, nc2_1.., nc3, balance_max."""
        nc2_cols = self.nc2_columns()
        rows = []
        for iteration, loss_value, report in zip(self.iterations, self.losses, self.reports):
            row = {"iter": iteration, "loss": loss_value}
            if report is None:
                row["nc1"] = np.nan
                row.update({col: np.nan for col in nc2_cols})
                row["nc3"] = np.nan
                row["balance_max"] = np.nan
            else:
                row["nc1"] = report.nc1
                padded = list(report.nc2) + [np.nan] * (len(nc2_cols) - len(report.nc2))
                row.update(dict(zip(nc2_cols, padded)))
                row["nc3"] = report.nc3
                row["balance_max"] = report.balance_max
            rows.append(row)
        return pd.DataFrame(rows, columns=["iter", "loss", "nc1"] + nc2_cols + ["nc3", "balance_max"])


# ===============================================================
#  GRADIENT DESCENT
# ===============================================================

def _snapshot(state, spec, prediction, flavor):
    try:
        if prediction is not None:
            return compare_to_theory(state, spec, prediction)
        if flavor is not None:
            return measure(state, spec, flavor)
    except DegenerateInputError as exc:
        logger.warning("metrics skipped: %s", exc)
    return None


def train(spec, config, prediction=None, flavor=None):
    """
    Full-batch gradient descent from init_state(spec, config.seed).

    Iteration 0, every record_stride-th iteration and the final iteration are
    recorded. Stops early once the gradient norm drops below grad_tol.
    """
    trajectory = Trajectory(spec=spec)
    state = init_state(spec, config.seed)
    start_time = time.time()

    logger.info(
        "training K=%d M=%d N=%d loss=%s bias=%s for %d iterations (lr=%g)",
        spec.K, spec.M, spec.N, spec.loss.value, spec.bias_mode.value, config.iterations, config.lr,
    )

    previous = None
    for iteration in range(config.iterations + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                value = loss(state, spec)
        except NumericalOverflowError:
            value = float("nan")

        if not np.isfinite(value) or value > DIVERGENCE_THRESHOLD:
            trajectory.final_state = state
            raise DivergenceError(iteration, value, trajectory)

        with np.errstate(over="ignore", invalid="ignore"):
            grad = gradient(state, spec)
        grad_norm = grad.norm()

        converged = grad_norm < config.grad_tol
        last = iteration == config.iterations or converged

        if iteration % config.record_stride == 0 or last:
            if config.require_monotone and previous is not None and value > previous + MONOTONE_SLACK:
                trajectory.final_state = state
                raise NonMonotoneLossError(iteration, value, previous, trajectory)
            previous = value
            trajectory.record(iteration, value, grad_norm, _snapshot(state, spec, prediction, flavor))

        if last:
            trajectory.stopped_early = converged and iteration < config.iterations
            break

        step = config.lr_at(iteration)
        state = state.map(lambda p, g: p - step * g, grad)

        if iteration and iteration % PROGRESS_EVERY == 0:
            elapsed = time.time() - start_time
            eta = elapsed / iteration * (config.iterations - iteration)
            logger.info("iter %d/%d loss=%.10g |grad|=%.3g elapsed=%.1fs ETA=%.1fs",
                        iteration, config.iterations, value, grad_norm, elapsed, eta)

    trajectory.final_state = state
    if trajectory.stopped_early:
        logger.info("converged at iteration %d (|grad| < %g)", trajectory.iterations[-1], config.grad_tol)
    logger.info("finished in %.2fs, final loss %.12g", time.time() - start_time, trajectory.final_loss)
    return trajectory


# ===============================================================
#  SWEEPS
# ===============================================================

@dataclass
class SweepResult:
    trajectories: list                  # one per spec, None where the run failed
    failures: list = field(default_factory=list)   # (index, error type, message)

    @property
    def ok(self):
        return not self.failures

    def summary(self):
        rows = []
        for index, trajectory in enumerate(self.trajectories):
            if trajectory is None:
                continue
            report = trajectory.final_report
            row = {"run": index, "M": trajectory.spec.M, "iterations": trajectory.iterations[-1],
                   "final_loss": trajectory.final_loss}
            if report is not None:
                row["nc1"] = report.nc1
                row["nc2_last"] = float(report.nc2[-1])
                row["nc3"] = report.nc3
            rows.append(row)
        return pd.DataFrame(rows)


def _run_one(args):
    index, spec, config, prediction, flavor = args
    try:
        return index, train(spec, config, prediction, flavor), None
    except Exception as exc:  # noqa: BLE001
        return index, None, (index, type(exc).__name__, str(exc))


def sweep(specs, config, predictions=None, flavor=None, workers=None):
    """
    Independent trainings of every spec with the same config. Failures are
    collected instead of raised; results keep the order of `specs`.
    """
    specs = list(specs)
    if not specs:
        raise ArgumentError("sweep needs at least one spec")
    if predictions is None:
        predictions = [None] * len(specs)
    jobs = [(i, spec, config, pred, flavor) for i, (spec, pred) in enumerate(zip(specs, predictions))]

    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_one, jobs))
    else:
        outcomes = [_run_one(job) for job in jobs]

    result = SweepResult(trajectories=[None] * len(specs))
    for index, trajectory, failure in sorted(outcomes, key=lambda item: item[0]):
        result.trajectories[index] = trajectory
        if failure is not None:
            logger.warning("run %d failed: %s: %s", *failure)
            result.failures.append(failure)
    return result
