"""Accuracy, rounds-to-target, transmitted message size and forgetting traces."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .models import Model
from .tensor import Tensor, no_grad

INF = math.inf


@dataclass(frozen=True)
class RoundRecord:
    round: int
    global_test_acc: float
    per_client_val_acc: tuple[float | None, ...]
    cumulative_transmitted_params: int
    mean_weight_divergence: float
    wall_ms: int = 0


@dataclass(frozen=True)
class ForgettingTrace:
    """Rows of (visit index, trained client id, accuracy on every client's val set)."""

    num_clients: int
    rows: tuple[tuple[int, int, tuple[float | None, ...]], ...] = ()

    def accuracy(self, client: int) -> list[float | None]:
        return [accs[client] for _, _, accs in self.rows]


def record_forgetting(trace: ForgettingTrace, visit: int, client_id: int, accuracies: Sequence[float | None]) -> ForgettingTrace:
    if len(accuracies) != trace.num_clients:
        raise ValueError(f"expected {trace.num_clients} accuracies, got {len(accuracies)}")
    if trace.rows and visit <= trace.rows[-1][0]:
        raise ValueError(f"visit {visit} does not follow {trace.rows[-1][0]}")
    return ForgettingTrace(trace.num_clients, trace.rows + ((visit, client_id, tuple(accuracies)),))


def forgetting_drop(trace: ForgettingTrace, client: int) -> float:
    """Largest accuracy loss on ``client``'s val set between the end of its
    own visit and the end of the next visit."""
    worst = 0.0
    for (_, trained, accs), (_, _, nxt) in zip(trace.rows, trace.rows[1:]):
        if trained == client and accs[client] is not None and nxt[client] is not None:
            worst = max(worst, accs[client] - nxt[client])
    return worst


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample in eval mode (ties go to the lowest class id)."""
    was_training = model.training
    model.eval()
    try:
        out = []
        with no_grad():
            for start in range(0, images.shape[0], batch_size):
                logits = model(Tensor(images[start : start + batch_size]))
                out.append(np.argmax(logits.data, axis=1))
    finally:
        model.training = was_training
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    if labels.size == 0:
        raise ValueError("accuracy of an empty sample set is undefined")
    return float(np.count_nonzero(np.argmax(logits, axis=1) == labels)) / labels.size


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("evaluate needs a non-empty sample set")
    preds = predict(model, images, batch_size)
    return float(np.count_nonzero(preds == labels)) / labels.size


def rounds_to_target(trace: Sequence[float], target: float) -> float | int:
    """1-indexed first round whose accuracy reaches ``target``; ``inf`` if never."""
    if not 0 < target <= 1:
        raise ValueError("target must lie in (0, 1]")
    for r, acc in enumerate(trace, start=1):
        if acc >= target:
            return r
    return INF


def target_from_baseline(central_accuracy: float, ratio: float = 0.95) -> float:
    return ratio * central_accuracy


def transmitted_size(rounds: int | float, param_count: int, *, participants: int | Sequence[int] | None = None) -> int | float:
    """Headline cost ``rounds * param_count``.

    With ``participants`` (per round, or one value for every round) the
    detailed count ``2 * participants * param_count`` per round is returned
    instead, covering the download and upload of each sampled client.
    """
    if param_count < 0 or rounds < 0:
        raise ValueError("rounds and param_count must be >= 0")
    if rounds == INF:
        return INF
    rounds = int(rounds)
    if participants is None:
        return rounds * param_count
    per_round = [participants] * rounds if isinstance(participants, int) else list(participants)[:rounds]
    return sum(2 * p * param_count for p in per_round)


def format_number(x) -> str:
    """Shortest round-trip text for numbers; ``inf``/``nan`` spelled out."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return repr(x)
