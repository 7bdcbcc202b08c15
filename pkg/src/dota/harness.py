"""Desk-scale initialization ablation on synthetic linear-regression tasks.

The task is matrix regression: recover w_star = w0 + delta from Gaussian
batches, starting every method at the pretrained weight w0. delta is a
low-tensor-rank perturbation built from the truncated chain of w0 itself,
so a decomposition-initialized adapter can express the target update while
a randomly initialized chain of the same shape has to discover the right
subspaces from scratch. Runs are pure functions of (task, method, hyper,
seed): every random draw comes from a named SeedSequence stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapter import DotaAdapter, dota_init
from .errors import ParameterError, ShapeError
from .mpo import (
    SHAPE_PRESETS,
    CoreChain,
    MpoShape,
    mpo_decompose,
    reconstruct,
    truncated_ranks,
)
from .tensor_core import DenseTensor

METHODS = ("dota", "dota-random", "lora", "full-ft")
_METHOD_IDS = {name: i for i, name in enumerate(METHODS)}

# SeedSequence stream tags, so the different random draws never collide.
_STREAM_TASK = 0
_STREAM_BATCH = 1
_STREAM_EVAL = 2
_STREAM_INIT = 3


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def balanced_factors(n: int, k: int) -> tuple[int, ...]:
    """Factor n into k near-equal integers (largest prime factors first)."""
    if n < 1 or k < 1:
        raise ParameterError("need n >= 1 and k >= 1")
    primes = []
    m, p = n, 2
    while p * p <= m:
        while m % p == 0:
            primes.append(p)
            m //= p
        p += 1
    if m > 1:
        primes.append(m)
    if len(primes) < k and n != 1:
        raise ParameterError(f"{n} has only {len(primes)} prime factors, cannot split into {k}")
    factors = [1] * k
    for p in sorted(primes, reverse=True):
        factors[int(np.argmin(factors))] *= p
    return tuple(sorted(factors, reverse=True))


def default_tensor_shape(dim: int, n_cores: int) -> tuple[int, ...]:
    """Preset factorization for known hidden dimensions, else a balanced split."""
    if n_cores == 5 and dim in SHAPE_PRESETS:
        return SHAPE_PRESETS[dim]
    return balanced_factors(dim, n_cores)


@dataclass(frozen=True)
class SyntheticTask:
    """Frozen regression task: pretrained w0, target w_star = w0 + delta."""

    w0: np.ndarray
    w_star: np.ndarray
    shape: MpoShape
    r_delta: int
    delta_scale: float
    batch_size: int
    seed: int
    input_std: float = 1.0

    @property
    def delta_fro_ratio(self) -> float:
        """Recorded perturbation size ||delta||_F / ||w0||_F."""
        return float(
            np.linalg.norm(self.w_star - self.w0) / np.linalg.norm(self.w0)
        )


def make_task(
    shape: MpoShape,
    r_delta: int,
    delta_scale: float,
    batch_size: int = 32,
    seed: int = 0,
    input_std: float = 1.0,
) -> SyntheticTask:
    """Draw w0 and build the low-tensor-rank target perturbation.

    delta is the chain of the rank-``r_delta`` decomposition of w0 with its
    last core replaced by a Gaussian draw projected out of that core's row
    space, then rescaled to ``delta_scale`` times ||w0||_F. The projection
    keeps the update direction disjoint from what the truncated chain
    already represents, and the chain construction bounds delta's bond
    ranks by r_delta.
    """
    if r_delta < 1:
        raise ParameterError(f"r_delta must be >= 1, got {r_delta}")
    if not (math.isfinite(delta_scale) and delta_scale >= 0):
        raise ParameterError(f"delta_scale must be finite and >= 0, got {delta_scale}")
    if seed < 0:
        raise ParameterError(f"seed must be >= 0, got {seed}")
    rng = _rng(seed, _STREAM_TASK)
    sigma = 1.0 / math.sqrt(shape.rows)
    w0 = rng.normal(0.0, sigma, (shape.rows, shape.cols))

    base = mpo_decompose(w0, shape, r_delta)
    last = base.cores[-1]
    rows2d = last.data.reshape(last.shape[0], -1)
    draw = rng.normal(size=rows2d.shape)
    q, _ = np.linalg.qr(rows2d.T)
    projected = draw - (draw @ q) @ q.T
    if np.linalg.norm(projected) <= 1e-12 * np.linalg.norm(draw):
        projected = draw  # row space fills everything; keep the raw draw
    delta_chain = CoreChain(
        base.cores[:-1] + (DenseTensor(projected.reshape(last.shape)),)
    )
    d_raw = reconstruct(delta_chain)
    d_norm = np.linalg.norm(d_raw)
    if d_norm == 0.0 or delta_scale == 0.0:
        delta = np.zeros_like(w0)
    else:
        delta = d_raw * (delta_scale * np.linalg.norm(w0) / d_norm)
    return SyntheticTask(
        w0=w0,
        w_star=w0 + delta,
        shape=shape,
        r_delta=r_delta,
        delta_scale=float(delta_scale),
        batch_size=int(batch_size),
        seed=int(seed),
        input_std=float(input_std),
    )


def random_init_cores(
    shape: MpoShape,
    ranks: Sequence[int],
    seed,
    sigma: float | None = None,
) -> CoreChain:
    """Gaussian cores except the last, which is zero, so the chain's
    contraction vanishes and training starts at the frozen base weight."""
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != shape.n_cores + 1 or ranks[0] != 1 or ranks[-1] != 1:
        raise ShapeError(f"bad rank list {ranks} for {shape.n_cores} cores")
    if sigma is None:
        sigma = 1.0 / math.sqrt(shape.rows)
    rng = np.random.default_rng(seed)
    arrays = []
    for k, (i, j) in enumerate(zip(shape.in_factors, shape.out_factors)):
        size = (ranks[k], i, j, ranks[k + 1])
        if k == shape.n_cores - 1:
            arrays.append(np.zeros(size))
        else:
            arrays.append(rng.normal(0.0, sigma, size))
    return CoreChain.from_arrays(arrays)


@dataclass
class LoraBaseline:
    """Low-rank matrix baseline: w0 + a @ b with a Gaussian and b zero at init."""

    w0: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @property
    def trainable_params(self) -> int:
        return self.a.size + self.b.size

    def effective_weight(self) -> np.ndarray:
        return self.w0 + self.a @ self.b

    def gradient_step(self, dw: np.ndarray, lr: float) -> None:
        ga = dw @ self.b.T
        gb = self.a.T @ dw
        self.a = self.a - lr * ga
        self.b = self.b - lr * gb


def lora_init(w0: np.ndarray, rank: int, seed, sigma: float | None = None) -> LoraBaseline:
    if rank < 1:
        raise ParameterError(f"rank must be >= 1, got {rank}")
    rows, cols = w0.shape
    if sigma is None:
        sigma = 1.0 / math.sqrt(rows)
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, sigma, (rows, rank))
    b = np.zeros((rank, cols))
    return LoraBaseline(w0=w0, a=a, b=b)


@dataclass(frozen=True)
class Hyper:
    """Training hyperparameters shared by every method in a comparison."""

    steps: int
    lr: float
    rank: int
    eval_every: int = 10

    def __post_init__(self):
        problems = []
        if self.steps < 0:
            problems.append("steps must be >= 0")
        if not (math.isfinite(self.lr) and self.lr > 0):
            problems.append("lr must be finite and > 0")
        if self.rank < 1:
            problems.append("rank must be >= 1")
        if self.eval_every < 1:
            problems.append("eval_every must be >= 1")
        if problems:
            raise ParameterError("; ".join(problems))


@dataclass
class TrainLog:
    """Loss trajectory of one run: (step, train loss, eval loss) records."""

    method: str
    seed: int
    hyper: dict
    trainable_params: int
    records: list[tuple[int, float, float]] = field(default_factory=list)
    diverged: bool = False
    diverged_at: int | None = None

    @property
    def steps(self) -> list[int]:
        return [r[0] for r in self.records]

    @property
    def final_eval_loss(self) -> float:
        return self.records[-1][2]

    def csv_lines(self) -> list[str]:
        lines = ["step,train_loss,eval_loss"]
        for step, train, ev in self.records:
            lines.append(f"{step},{float(train)!r},{float(ev)!r}")
        return lines

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(self.csv_lines()) + "\n")


class _MethodState:
    """Per-method parameter state with a uniform weight/step interface."""

    def __init__(self, task: SyntheticTask, method: str, hyper: Hyper):
        if method not in _METHOD_IDS:
            raise ParameterError(f"unknown method {method!r} (expected one of {METHODS})")
        self.method = method
        shape = task.shape
        init_rng_key = (task.seed, _STREAM_INIT, _METHOD_IDS[method])
        if method == "dota":
            self.adapter = dota_init(task.w0, shape, hyper.rank)
        elif method == "dota-random":
            chain = random_init_cores(
                shape,
                truncated_ranks(shape, hyper.rank),
                np.random.SeedSequence([*init_rng_key]),
            )
            self.adapter = DotaAdapter(w_res=task.w0, cores=chain, shape=shape)
        elif method == "lora":
            self.lora = lora_init(
                task.w0, hyper.rank, np.random.SeedSequence([*init_rng_key])
            )
        elif method == "full-ft":
            self.w = task.w0.copy()

    @property
    def trainable_params(self) -> int:
        if self.method in ("dota", "dota-random"):
            return self.adapter.trainable_params
        if self.method == "lora":
            return self.lora.trainable_params
        return self.w.size

    def effective_weight(self) -> np.ndarray:
        if self.method in ("dota", "dota-random"):
            return self.adapter.merge()
        if self.method == "lora":
            return self.lora.effective_weight()
        return self.w

    def train_step(self, x: np.ndarray, y_target: np.ndarray, lr: float) -> float:
        """One gradient-descent step on the batch; returns the pre-update loss."""
        with np.errstate(over="ignore", invalid="ignore"):
            if self.method in ("dota", "dota-random"):
                y = self.adapter.forward(x)
                loss = float(np.mean((y - y_target) ** 2))
                if math.isfinite(loss):
                    dy = 2.0 * (y - y_target) / y.size
                    grads, _ = self.adapter.backward(x, dy)
                    self.adapter.apply_gradients(grads, lr)
                return loss
            w = self.effective_weight()
            y = x @ w
            loss = float(np.mean((y - y_target) ** 2))
            if not math.isfinite(loss):
                return loss
            dw = x.T @ (2.0 * (y - y_target) / y.size)
            if self.method == "lora":
                self.lora.gradient_step(dw, lr)
            else:
                self.w = self.w - lr * dw
            return loss


def run_experiment(task: SyntheticTask, method: str, hyper: Hyper) -> TrainLog:
    """Train one method on the task, logging eval loss on a fixed held-out
    batch every ``eval_every`` steps (plus step 0 and the final step).

    The batch stream is a function of (task seed, step index) only, so all
    methods on the same task see identical data. A non-finite loss aborts
    the run; the partial log is returned with ``diverged`` set.
    """
    state = _MethodState(task, method, hyper)
    rows = task.shape.rows
    x_eval = _rng(task.seed, _STREAM_EVAL).normal(
        0.0, task.input_std, (task.batch_size, rows)
    )
    y_eval = x_eval @ task.w_star

    def batch(t: int) -> np.ndarray:
        return _rng(task.seed, _STREAM_BATCH, t).normal(
            0.0, task.input_std, (task.batch_size, rows)
        )

    log = TrainLog(
        method=method,
        seed=task.seed,
        hyper={
            "steps": hyper.steps,
            "lr": hyper.lr,
            "rank": hyper.rank,
            "eval_every": hyper.eval_every,
        },
        trainable_params=state.trainable_params,
    )

    def record(step: int) -> bool:
        with np.errstate(over="ignore", invalid="ignore"):
            w = state.effective_weight()
            ev = float(np.mean((x_eval @ w - y_eval) ** 2))
            xb = batch(step + 1)
            tr = float(np.mean((xb @ w - xb @ task.w_star) ** 2))
        if not (math.isfinite(ev) and math.isfinite(tr)):
            log.diverged = True
            log.diverged_at = step
            return False
        log.records.append((step, tr, ev))
        return True

    if not record(0):
        return log
    for t in range(1, hyper.steps + 1):
        xb = batch(t)
        loss = state.train_step(xb, xb @ task.w_star, hyper.lr)
        if not math.isfinite(loss):
            log.diverged = True
            log.diverged_at = t
            break
        if t % hyper.eval_every == 0 or t == hyper.steps:
            if not record(t):
                break
    return log


@dataclass(frozen=True)
class AblationConfig:
    """Validated experiment grid: methods x seeds on one task family."""

    shape: MpoShape
    rank: int
    steps: int
    lr: float
    seeds: tuple[int, ...]
    methods: tuple[str, ...]
    r_delta: int
    delta_scale: float
    eval_every: int = 10
    batch_size: int = 32

    @classmethod
    def from_dict(cls, raw: dict) -> "AblationConfig":
        """Build a config from a parsed JSON document, enumerating every
        invalid field in the error message."""
        problems: list[str] = []
        known = {
            "dims", "shapes", "R", "N", "steps", "lr", "seeds", "methods",
            "r_delta", "delta_scale", "eval_every", "batch_size",
        }
        for key in raw:
            if key not in known:
                problems.append(f"unknown field {key!r}")

        def geti(name, default=None, minimum=None):
            v = raw.get(name, default)
            if v is None:
                problems.append(f"{name}: required")
                return None
            if not isinstance(v, int) or isinstance(v, bool):
                problems.append(f"{name}: expected an integer, got {v!r}")
                return None
            if minimum is not None and v < minimum:
                problems.append(f"{name}: must be >= {minimum}, got {v}")
                return None
            return v

        dims = raw.get("dims")
        if isinstance(dims, int) and not isinstance(dims, bool):
            dims = [dims, dims]
        if (
            not isinstance(dims, (list, tuple))
            or len(dims) != 2
            or not all(isinstance(d, int) and d >= 1 for d in dims)
        ):
            problems.append(f"dims: expected an integer or [rows, cols], got {raw.get('dims')!r}")
            dims = None

        n = raw.get("N")
        if n is not None and (not isinstance(n, int) or n < 1):
            problems.append(f"N: expected a positive integer, got {n!r}")
            n = None

        shapes = raw.get("shapes")
        shape = None
        if dims is not None:
            try:
                shape = _resolve_shapes(dims, shapes, n)
            except (ParameterError, ShapeError) as exc:
                problems.append(f"shapes: {exc}")

        rank = geti("R", minimum=1)
        steps = geti("steps", minimum=0)
        eval_every = geti("eval_every", default=10, minimum=1)
        batch_size = geti("batch_size", default=32, minimum=1)
        r_delta = geti("r_delta", minimum=1)

        lr = raw.get("lr")
        if not isinstance(lr, (int, float)) or isinstance(lr, bool) \
                or not math.isfinite(lr) or lr <= 0:
            problems.append(f"lr: expected a positive number, got {lr!r}")
            lr = None

        delta_scale = raw.get("delta_scale")
        if not isinstance(delta_scale, (int, float)) or isinstance(delta_scale, bool) \
                or not math.isfinite(delta_scale) or delta_scale < 0:
            problems.append(f"delta_scale: expected a number >= 0, got {delta_scale!r}")
            delta_scale = None

        seeds = raw.get("seeds")
        if (
            not isinstance(seeds, (list, tuple))
            or len(seeds) < 1
            or not all(
                isinstance(s, int) and not isinstance(s, bool) and s >= 0
                for s in seeds
            )
        ):
            problems.append(
                f"seeds: expected a non-empty list of non-negative integers, got {seeds!r}"
            )
            seeds = None

        methods = raw.get("methods", list(METHODS))
        if (
            not isinstance(methods, (list, tuple))
            or len(methods) < 1
            or not all(m in METHODS for m in methods)
        ):
            problems.append(
                f"methods: expected a non-empty subset of {list(METHODS)}, got {methods!r}"
            )
            methods = None

        if problems:
            raise ParameterError("invalid config fields: " + "; ".join(problems))
        return cls(
            shape=shape,
            rank=rank,
            steps=steps,
            lr=float(lr),
            seeds=tuple(seeds),
            methods=tuple(methods),
            r_delta=r_delta,
            delta_scale=float(delta_scale),
            eval_every=eval_every,
            batch_size=batch_size,
        )


def _resolve_shapes(dims, shapes, n) -> MpoShape:
    rows, cols = dims

    def as_factors(value, dim):
        factors = tuple(int(v) for v in value)
        if math.prod(factors) != dim:
            raise ShapeError(f"factors {list(factors)} do not multiply to {dim}")
        return factors

    if shapes is None:
        if n is None:
            raise ParameterError("either 'shapes' or 'N' must be given")
        return MpoShape(
            default_tensor_shape(rows, n), default_tensor_shape(cols, n)
        )
    if isinstance(shapes, dict):
        if set(shapes) != {"in", "out"}:
            raise ParameterError("expected keys 'in' and 'out'")
        inf = as_factors(shapes["in"], rows)
        outf = as_factors(shapes["out"], cols)
    elif isinstance(shapes, (list, tuple)):
        inf = as_factors(shapes, rows)
        outf = as_factors(shapes, cols)
    else:
        raise ParameterError(f"expected a list or {{'in', 'out'}} object, got {shapes!r}")
    if n is not None and len(inf) != n:
        raise ParameterError(f"N={n} disagrees with shape length {len(inf)}")
    return MpoShape(inf, outf)


def ablate(config: AblationConfig) -> tuple[list[TrainLog], list[tuple[int, str, float, float]]]:
    """Run the full method-by-seed grid and summarize eval losses.

    Returns every TrainLog plus summary rows (step, method, mean, std) with
    the mean and population standard deviation taken across seeds.
    """
    logs = []
    for seed in config.seeds:
        task = make_task(
            config.shape,
            r_delta=config.r_delta,
            delta_scale=config.delta_scale,
            batch_size=config.batch_size,
            seed=seed,
        )
        hyper = Hyper(
            steps=config.steps,
            lr=config.lr,
            rank=config.rank,
            eval_every=config.eval_every,
        )
        for method in config.methods:
            logs.append(run_experiment(task, method, hyper))
    summary = summarize(logs)
    return logs, summary


def summarize(logs: Sequence[TrainLog]) -> list[tuple[int, str, float, float]]:
    """Per-method mean/std of eval loss at every step present in all seeds."""
    rows: list[tuple[int, str, float, float]] = []
    methods = []
    for log in logs:
        if log.method not in methods:
            methods.append(log.method)
    for method in methods:
        group = [log for log in logs if log.method == method]
        common = set(group[0].steps)
        for log in group[1:]:
            common &= set(log.steps)
        for step in sorted(common):
            vals = np.array(
                [ev for log in group for (s, _, ev) in log.records if s == step]
            )
            rows.append((step, method, float(vals.mean()), float(vals.std())))
    return rows


def summary_csv_lines(summary: Sequence[tuple[int, str, float, float]]) -> list[str]:
    lines = ["step,method,mean_eval_loss,std_eval_loss"]
    for step, method, mean, std in summary:
        lines.append(f"{step},{method},{float(mean)!r},{float(std)!r}")
    return lines


def write_summary_csv(summary, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(summary_csv_lines(summary)) + "\n")
