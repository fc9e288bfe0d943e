"""Inner-loop adaptation and meta-updates over the trainable parameter set.

The training loop is generic over a loss function ``loss_fn(params, batch)``
returning a scalar Node, where ``params`` maps parameter names to Nodes.
That keeps the machinery testable against scalar surrogate losses with known
closed-form meta-gradients, while the pipeline plugs in the transformer NLL.

Two outer-gradient modes:

* ``second``: inner updates are built as graph expressions, so the outer
  gradient differentiates through them (exact MAML).
* ``first``: inner updates run on detached values and the outer gradient is
  taken at the adapted parameters (FOMAML). An adaptive inner optimizer
  forces this mode, since its update is not differentiated.

Only the requested (phi) names are ever written; everything else is frozen
by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node

LossFn = Callable[[Mapping[str, Node], object], Node]


@dataclass
class TrainHyper:
    alpha: float = 1e-2
    beta: float = 1e-3
    inner_steps: int = 4
    meta_batch_tasks: int = 3
    task_batch_size: int = 10
    order_mode: str = "second"
    inner_optimizer: str = "sgd"
    outer_optimizer: str = "adamw"
    clip_norm: float = 1.0
    support_fraction: float = 0.5
    shared_support_query: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("step sizes must be positive")
        if self.inner_steps < 1 or self.meta_batch_tasks < 1 or self.task_batch_size < 1:
            raise ValueError("inner_steps, meta_batch_tasks, task_batch_size must be >= 1")
        if self.order_mode not in ("second", "first"):
            raise ValueError(f"order_mode must be 'second' or 'first', got {self.order_mode!r}")
        if self.inner_optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown inner_optimizer {self.inner_optimizer!r}")
        if self.outer_optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown outer_optimizer {self.outer_optimizer!r}")


class OptimizerState:
    """AdamW moment accumulators for a named parameter subset."""

    def __init__(self, shapes: Mapping[str, tuple], hyper: TrainHyper):
        self.m = {n: np.zeros(s) for n, s in shapes.items()}
        self.v = {n: np.zeros(s) for n, s in shapes.items()}
        self.step = 0
        self.beta1 = hyper.adam_beta1
        self.beta2 = hyper.adam_beta2
        self.eps = hyper.adam_eps
        self.weight_decay = hyper.weight_decay


def adamw_step(state: OptimizerState, values: dict[str, np.ndarray],
               grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam step; returns updated values."""
    state.step += 1
    t = state.step
    out = {}
    for name, g in grads.items():
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        mhat = state.m[name] / (1 - state.beta1**t)
        vhat = state.v[name] / (1 - state.beta2**t)
        p = values[name]
        out[name] = p - lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p)
    return out


def sgd_step(values: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
    return {name: values[name] - lr * g for name, g in grads.items()}


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    """Scale all gradients when their global L2 norm exceeds the threshold."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = {n: g * factor for n, g in grads.items()}
    return grads, norm


def _as_param_nodes(params) -> dict[str, Node]:
    if hasattr(params, "leaves"):
        return params.leaves()
    return dict(params)


def inner_adapt(params, phi_names: Sequence[str], support, hyper: TrainHyper,
                loss_fn: LossFn) -> tuple[dict[str, Node], list[float]]:
    """K gradient steps on the support loss, touching only phi.

    Returns (adapted parameter map, per-step support losses). In second-order
    mode the adapted entries are update expressions rooted at the originals;
    in first-order mode (or with an adaptive inner optimizer) they are
    detached leaves.
    """
    current = _as_param_nodes(params)
    detached = hyper.order_mode == "first" or hyper.inner_optimizer == "adamw"
    inner_state = None
    if hyper.inner_optimizer == "adamw":
        inner_state = OptimizerState({n: current[n].value.shape for n in phi_names}, hyper)

    losses = []
    for _ in range(hyper.inner_steps):
        loss = loss_fn(current, support)
        losses.append(float(loss.value))
        grads = ad.backward(loss, {n: current[n] for n in phi_names})
        if detached:
            values = {n: current[n].value for n in phi_names}
            grad_values = {n: grads[n].value for n in phi_names}
            if inner_state is not None:
                new = adamw_step(inner_state, values, grad_values, hyper.alpha)
            else:
                new = sgd_step(values, grad_values, hyper.alpha)
            for n in phi_names:
                current[n] = ad.leaf(n, new[n])
        else:
            for n in phi_names:
                current[n] = ad.sub(current[n], ad.scale(grads[n], hyper.alpha))
    return current, losses


def outer_gradient(params, phi_names: Sequence[str], tasks: Sequence,
                   hyper: TrainHyper, loss_fn: LossFn) -> tuple[dict[str, np.ndarray], dict]:
    """Meta-gradient of the summed post-adaptation query losses wrt phi.

    Second order differentiates through the inner updates; first order sums
    the per-task query gradients taken at the adapted parameters.
    """
    if not tasks:
        raise ValueError("meta batch must contain at least one task")
    for task in tasks:
        if not _batch_size(task.query):
            raise ValueError("task has an empty query set")

    base = _as_param_nodes(params)
    support_losses: list[float] = []
    query_losses: list[float] = []

    if hyper.order_mode == "second" and hyper.inner_optimizer == "sgd":
        total = None
        for task in tasks:
            adapted, sup = inner_adapt(base, phi_names, task.support, hyper, loss_fn)
            support_losses.extend(sup)
            q = loss_fn(adapted, task.query)
            query_losses.append(float(q.value))
            total = q if total is None else ad.add(total, q)
        grads = ad.backward(total, {n: base[n] for n in phi_names})
        grad_values = {n: grads[n].value for n in phi_names}
    else:
        grad_values = {n: np.zeros(base[n].value.shape) for n in phi_names}
        for task in tasks:
            adapted, sup = inner_adapt(base, phi_names, task.support, hyper, loss_fn)
            support_losses.extend(sup)
            q = loss_fn(adapted, task.query)
            query_losses.append(float(q.value))
            task_grads = ad.backward(q, {n: adapted[n] for n in phi_names})
            for n in phi_names:
                grad_values[n] = grad_values[n] + task_grads[n].value

    metrics = {
        "support_loss": float(np.mean(support_losses)),
        "query_loss": float(np.mean(query_losses)),
    }
    return grad_values, metrics


def meta_step(params, phi_names: Sequence[str], tasks: Sequence, hyper: TrainHyper,
              opt_state: OptimizerState | None, loss_fn: LossFn) -> dict:
    """One outer update: adapt per task, evaluate queries, update phi in place."""
    grads, metrics = outer_gradient(params, phi_names, tasks, hyper, loss_fn)
    grads, norm = clip_global_norm(grads, hyper.clip_norm)
    values = {n: params[n] for n in phi_names}
    if hyper.outer_optimizer == "adamw":
        if opt_state is None:
            raise ValueError("adamw outer optimizer needs an OptimizerState")
        new = adamw_step(opt_state, values, grads, hyper.beta)
    else:
        new = sgd_step(values, grads, hyper.beta)
    for n in phi_names:
        params.set(n, new[n])
    metrics["grad_norm"] = norm
    return metrics


def _batch_size(batch) -> int:
    try:
        return len(batch)
    except TypeError:
        return 1


def evaluate_adaptation(params, phi_names: Sequence[str], tasks: Sequence,
                        hyper: TrainHyper, loss_fn: LossFn) -> float:
    """Mean query loss after inner adaptation, without updating params.

    Inner updates run detached; this is evaluation only.
    """
    base = _as_param_nodes(params)
    eval_hyper = TrainHyper(**{**hyper.__dict__, "order_mode": "first"})
    losses = []
    for task in tasks:
        adapted, _ = inner_adapt(base, phi_names, task.support, eval_hyper, loss_fn)
        losses.append(float(loss_fn(adapted, task.query).value))
    return float(np.mean(losses))


@dataclass
class StopCriteria:
    max_steps: int
    eval_every: int = 20
    patience: int | None = None


@dataclass
class HistoryRow:
    step: int
    support_loss: float
    query_loss: float
    val_loss: float | None
    grad_norm: float
    wall_time: float


@dataclass
class MetaTrainResult:
    best_phi: dict[str, np.ndarray]
    best_val_loss: float | None
    history: list[HistoryRow] = field(default_factory=list)


class DivergenceError(RuntimeError):
    """Validation loss became non-finite during meta-training."""


def meta_train(params, phi_names: Sequence[str], task_sampler, hyper: TrainHyper,
               stop: StopCriteria, loss_fn: LossFn,
               validation_sampler=None, opt_state: OptimizerState | None = None) -> MetaTrainResult:
    """Loop meta_step over sampled meta-batches, tracking validation loss.

    ``task_sampler(n)`` returns a list of n tasks; ``validation_sampler()``
    returns a fixed list of held-out tasks. The best-validation phi is
    written back into params before returning. With no validation sampler
    the final phi stands.
    """
    if opt_state is None and hyper.outer_optimizer == "adamw":
        opt_state = OptimizerState({n: params[n].shape for n in phi_names}, hyper)

    history: list[HistoryRow] = []
    best_phi = {n: np.array(params[n], copy=True) for n in phi_names}
    best_val = None
    bad_evals = 0
    t0 = time.perf_counter()

    for step in range(1, stop.max_steps + 1):
        tasks = task_sampler(hyper.meta_batch_tasks)
        metrics = meta_step(params, phi_names, tasks, hyper, opt_state, loss_fn)

        val_loss = None
        if validation_sampler is not None and (
            step % stop.eval_every == 0 or step == stop.max_steps
        ):
            val_loss = evaluate_adaptation(
                params, phi_names, validation_sampler(), hyper, loss_fn
            )
            if not np.isfinite(val_loss):
                raise DivergenceError(f"validation loss diverged at step {step}: {val_loss}")
            if best_val is None or val_loss < best_val:
                best_val = val_loss
                best_phi = {n: np.array(params[n], copy=True) for n in phi_names}
                bad_evals = 0
            else:
                bad_evals += 1

        history.append(
            HistoryRow(
                step=step,
                support_loss=metrics["support_loss"],
                query_loss=metrics["query_loss"],
                val_loss=val_loss,
                grad_norm=metrics["grad_norm"],
                wall_time=time.perf_counter() - t0,
            )
        )
        if stop.patience is not None and bad_evals > stop.patience:
            break

    if validation_sampler is not None and best_val is not None:
        for n in phi_names:
            params.set(n, best_phi[n])
    else:
        best_phi = {n: np.array(params[n], copy=True) for n in phi_names}
    return MetaTrainResult(best_phi=best_phi, best_val_loss=best_val, history=history)


def write_history_csv(history: Sequence[HistoryRow], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "support_loss", "query_loss", "val_loss", "grad_norm", "wall_time"])
        for row in history:
            writer.writerow(
                [
                    row.step,
                    f"{row.support_loss:.10g}",
                    f"{row.query_loss:.10g}",
                    "" if row.val_loss is None else f"{row.val_loss:.10g}",
                    f"{row.grad_norm:.10g}",
                    f"{row.wall_time:.3f}",
                ]
            )
