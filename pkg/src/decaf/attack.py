"""Data-composition inference from a single local model update.

Pipeline for one (user, round):

1. gradient change of the classification layer, ``(local - global) / alpha``;
2. null classes: a class whose weight row has no entry above the threshold;
3. gradient bases: one full-batch SGD step from the same global model on the
   auxiliary samples of each remaining class, plus one on their union;
4. nonnegative decomposition of the change onto those bases, turned into
   per-class proportions.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn
from .data import AuxiliarySet
from .fl import RoundRecord
from .metrics import DistanceTriple, distances

log = logging.getLogger(__name__)

MAX_BACKOFFS = 10
# rounding slack when comparing successive losses near a flat optimum
_LOSS_TOL = 1e-12


class DegenerateInputError(ValueError):
    """The observed update carries no usable signal (e.g. every class looks null)."""


class DegenerateDecompositionError(ValueError):
    """All scalar factors ended at zero, so proportions cannot be normalised."""


@dataclass(frozen=True)
class GradientChange:
    values: np.ndarray  # row-major by class: class i owns [i*m, (i+1)*m)
    class_count: int
    round: int | None = None
    user: int | None = None

    def __post_init__(self) -> None:
        if self.values.ndim != 1 or len(self.values) % self.class_count:
            raise ValueError("gradient change length must be a multiple of the class count")

    @property
    def width(self) -> int:
        return len(self.values) // self.class_count

    def blocks(self) -> np.ndarray:
        return self.values.reshape(self.class_count, self.width)


@dataclass(frozen=True)
class NullClassReport:
    c_miss: frozenset[int]
    threshold: float


@dataclass(frozen=True)
class GradientBasisSet:
    classes: tuple[int, ...]  # non-null classes, ascending
    class_bases: np.ndarray  # (len(classes), N*m)
    unified: np.ndarray  # (N*m,)
    class_count: int

    @property
    def size(self) -> int:
        return len(self.classes) + 1


@dataclass(frozen=True)
class DecompositionResult:
    composition: np.ndarray  # length N, zeros off ``classes``
    classes: tuple[int, ...]
    class_factors: np.ndarray
    unified_factor: float
    loss: float
    backoffs: int = 0
    monotone: bool = True
    loss_trace: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class AttackParams:
    threshold: float = 0.0
    beta: float = 0.05
    epochs: int = 1000
    null_removal: bool = True
    calibrator: bool = True
    unified_scale: str = "sum"

    @property
    def mode(self) -> str:
        flags = []
        if not self.null_removal:
            flags.append("no-null-removal")
        if not self.calibrator:
            flags.append("no-calibrator")
        return "ablation:" + ",".join(flags) if flags else "decaf"


@dataclass(frozen=True)
class AttackReport:
    user: int
    round: int
    mode: str
    c_miss: tuple[int, ...] = ()
    composition: np.ndarray | None = None
    eta: tuple[float, ...] = ()
    loss: float | None = None
    distances: DistanceTriple | None = None
    null_correct: bool | None = None
    anomaly: str | None = None

    def to_dict(self) -> dict:
        d = {
            "user": self.user,
            "round": self.round,
            "mode": self.mode,
            "C_miss": list(self.c_miss),
            "composition": None if self.composition is None else [float(v) for v in self.composition],
            "eta": [float(v) for v in self.eta],
            "loss": self.loss,
            "null_correct": self.null_correct,
            "anomaly": self.anomaly,
        }
        if self.distances is not None:
            d.update(self.distances.to_dict())
        else:
            d.update({"L1": None, "L2": None, "Linf": None})
        return d


def extract_gradient_change(
    local: nn.Model,
    global_prev: nn.Model,
    alpha: float,
    *,
    round: int | None = None,
    user: int | None = None,
) -> GradientChange:
    if alpha <= 0:
        raise ValueError("learning rate must be positive")
    if local.specs != global_prev.specs:
        raise nn.ConfigurationError("local and global models have different shapes")
    values = (nn.target_layer_flat(local) - nn.target_layer_flat(global_prev)) / alpha
    return GradientChange(values, global_prev.class_count, round, user)


def remove_null_classes(g: GradientChange, threshold: float = 0.0) -> NullClassReport:
    """Flag class ``i`` as null iff no entry of its block exceeds ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    active = (g.blocks() > threshold).any(axis=1)
    if not active.any():
        raise DegenerateInputError("no class shows a gradient change above the threshold")
    return NullClassReport(frozenset(int(i) for i in np.flatnonzero(~active)), threshold)


def _one_step_change(global_prev: nn.Model, x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    _, grads = nn.loss_and_gradients(global_prev, nn.Batch(x, y))
    stepped = nn.sgd_step(global_prev, grads, alpha)
    return extract_gradient_change(stepped, global_prev, alpha).values


def class_basis(global_prev: nn.Model, aux: AuxiliarySet, c: int, alpha: float) -> np.ndarray:
    x, y = aux.samples([c])
    return _one_step_change(global_prev, x, y, alpha)


def construct_gradient_bases(
    global_prev: nn.Model,
    aux: AuxiliarySet,
    c_miss: Iterable[int],
    alpha: float,
    *,
    unified_scale: str = "sum",
    cache: Mapping[int, np.ndarray] | None = None,
) -> GradientBasisSet:
    """Per-class bases and the unified (union) basis for every non-null class.

    With ``unified_scale="sum"`` the union step's change is multiplied by the
    number of classes in the union, so it equals the sum of the per-class
    bases (the union is class-balanced and the loss is a batch mean). With
    ``"mean"`` it is left as the plain union step. ``cache`` may map class
    index to an already computed per-class basis for this global model.
    """
    if unified_scale not in ("sum", "mean"):
        raise ValueError("unified_scale must be 'sum' or 'mean'")
    n = global_prev.class_count
    if aux.class_count != n:
        raise ValueError("auxiliary set and model disagree on the class count")
    classes = tuple(c for c in range(n) if c not in set(c_miss))
    if not classes:
        raise ValueError("no non-null classes to build bases for")
    rows = []
    for c in classes:
        if cache is not None and c in cache:
            rows.append(cache[c])
        else:
            rows.append(class_basis(global_prev, aux, c, alpha))
    x, y = aux.samples(classes)
    unified = _one_step_change(global_prev, x, y, alpha)
    if unified_scale == "sum":
        unified = unified * len(classes)
    return GradientBasisSet(classes, np.stack(rows), unified, n)


def _mse(G: np.ndarray, eta: np.ndarray, t: np.ndarray) -> float:
    r = G @ eta - t
    return float(r @ r) / len(t)


def decompose(
    g_target: GradientChange | np.ndarray,
    bases: GradientBasisSet,
    beta: float = 0.05,
    epochs: int = 1000,
    *,
    use_calibrator: bool = True,
    keep_trace: bool = False,
) -> DecompositionResult:
    """Fit ``sum_c eta_c g_c + eta_u g_u`` to the target by projected gradient descent.

    The objective is the mean squared residual. Target and bases are divided
    by one common factor (the RMS of the basis set) before descending, which
    leaves the minimiser unchanged and makes the result invariant to a common
    rescaling of inputs. Factors start at ``1/(K+1)`` and are clamped at zero
    after every step; a step that would raise the loss halves ``beta``
    (at most ``MAX_BACKOFFS`` times over the run).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be positive")
    target = g_target.values if isinstance(g_target, GradientChange) else np.asarray(g_target, dtype=float)
    if target.shape != bases.unified.shape:
        raise ValueError("target and bases have different lengths")
    k = len(bases.classes)
    columns = [*bases.class_bases, bases.unified] if use_calibrator else list(bases.class_bases)
    G = np.column_stack(columns)
    scale = float(np.sqrt(np.mean(np.concatenate([bases.class_bases.ravel(), bases.unified]) ** 2)))
    if not np.isfinite(scale) or scale == 0.0:
        raise DegenerateDecompositionError("gradient bases are all zero")
    Gs = G / scale
    ts = target / scale
    n = len(ts)

    eta = np.full(G.shape[1], 1.0 / (k + 1))
    loss = _mse(Gs, eta, ts)
    step = beta
    backoffs = 0
    monotone = True
    trace = [loss] if keep_trace else None
    for _ in range(epochs):
        grad = (2.0 / n) * (Gs.T @ (Gs @ eta - ts))
        while True:
            cand = np.maximum(eta - step * grad, 0.0)
            cand_loss = _mse(Gs, cand, ts)
            if cand_loss <= loss + _LOSS_TOL * loss or backoffs >= MAX_BACKOFFS:
                break
            step *= 0.5
            backoffs += 1
        if cand_loss > loss + _LOSS_TOL * loss:
            monotone = False
        eta, loss = cand, cand_loss
        if trace is not None:
            trace.append(loss)
    if not monotone:
        log.warning("decomposition loss increased after %d step-size backoffs; beta=%g is too large", backoffs, beta)

    class_factors = eta[:k]
    unified_factor = float(eta[k]) if use_calibrator else 0.0
    mass = class_factors + unified_factor
    total = mass.sum()
    if total <= 0.0:
        raise DegenerateDecompositionError("all scalar factors are zero")
    composition = np.zeros(bases.class_count)
    composition[list(bases.classes)] = mass / total
    return DecompositionResult(
        composition=composition,
        classes=bases.classes,
        class_factors=class_factors.copy(),
        unified_factor=unified_factor,
        loss=loss * scale ** 2,
        backoffs=backoffs,
        monotone=monotone,
        loss_trace=np.array(trace) if trace is not None else None,
    )


def attack_single_round(
    record: RoundRecord,
    user: int,
    aux: AuxiliarySet,
    alpha: float,
    params: AttackParams = AttackParams(),
    truth: np.ndarray | None = None,
    *,
    basis_cache: Mapping[int, np.ndarray] | None = None,
) -> AttackReport:
    """Run the four-step pipeline on one user's update from one round.

    Degenerate inputs do not raise; they come back as a report whose
    ``anomaly`` field says what went wrong.
    """
    if not 0 <= user < len(record.local_models):
        raise IndexError(f"user {user} not present in round {record.round}")
    global_prev = record.global_model
    n = global_prev.class_count
    g = extract_gradient_change(record.local_models[user], global_prev, alpha, round=record.round, user=user)
    true_null = None if truth is None else frozenset(int(i) for i in np.flatnonzero(np.asarray(truth) == 0))
    try:
        report = remove_null_classes(g, params.threshold)
    except DegenerateInputError as exc:
        return AttackReport(user, record.round, params.mode, anomaly=f"degenerate-update: {exc}")
    c_miss = report.c_miss
    null_correct = None if true_null is None else c_miss == true_null
    assumed_null = c_miss if params.null_removal else frozenset()
    bases = construct_gradient_bases(global_prev, aux, assumed_null, alpha,
                                     unified_scale=params.unified_scale, cache=basis_cache)
    try:
        result = decompose(g, bases, params.beta, params.epochs, use_calibrator=params.calibrator)
    except DegenerateDecompositionError as exc:
        return AttackReport(user, record.round, params.mode, tuple(sorted(c_miss)),
                            null_correct=null_correct, anomaly=f"degenerate-decomposition: {exc}")
    eta = tuple(result.class_factors) + ((result.unified_factor,) if params.calibrator else ())
    dist = None if truth is None else distances(result.composition, truth)
    return AttackReport(
        user=user,
        round=record.round,
        mode=params.mode,
        c_miss=tuple(sorted(c_miss)),
        composition=result.composition,
        eta=eta,
        loss=result.loss,
        distances=dist,
        null_correct=null_correct,
    )


def attack_multi_round(entries: Sequence[AttackReport | np.ndarray]) -> np.ndarray:
    """Average ``k`` single-round compositions and renormalise to sum 1.

    Anomalous reports (no composition) are skipped.
    """
    comps = []
    for e in entries:
        comp = e.composition if isinstance(e, AttackReport) else np.asarray(e, dtype=float)
        if comp is not None:
            comps.append(comp)
    if not comps:
        raise ValueError("no usable single-round results to combine")
    if len({len(c) for c in comps}) != 1:
        raise ValueError("compositions have different class counts")
    if isinstance(entries[0], AttackReport) and len({e.user for e in entries}) != 1:
        raise ValueError("multi-round fusion needs results for a single user")
    mean = np.mean(comps, axis=0)
    return mean / mean.sum()


def attack_history(
    records: Sequence[RoundRecord],
    aux: AuxiliarySet,
    alpha: float,
    params: AttackParams = AttackParams(),
    truths: Sequence[np.ndarray] | None = None,
    *,
    rounds: Iterable[int] | None = None,
    users: Iterable[int] | None = None,
    threads: int = 1,
) -> list[AttackReport]:
    """Attack every requested (round, user); results are ordered by round, then user."""
    wanted_rounds = None if rounds is None else set(rounds)
    jobs = []
    for record in records:
        if wanted_rounds is not None and record.round not in wanted_rounds:
            continue
        cache = {c: class_basis(record.global_model, aux, c, alpha) for c in range(record.global_model.class_count)}
        targets = range(len(record.local_models)) if users is None else users
        for u in targets:
            jobs.append((record, u, cache))

    def work(job):
        record, u, cache = job
        truth = None if truths is None else truths[u]
        return attack_single_round(record, u, aux, alpha, params, truth, basis_cache=cache)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, jobs))
    return [work(j) for j in jobs]
