"""Fitness evaluators.

An evaluator turns an :class:`ArchitecturePlan` into the average loss of a
short training probe (5 epochs by default). The GA negates that loss to get a
fitness. Three evaluators ship here:

* :class:`SyntheticLandscape` - a deterministic weighted-distance bowl with a
  known optimum, cheap enough to enumerate the whole gene space.
* :class:`LookupEvaluator` - returns losses from a table; unknown plans raise.
* :class:`TrainerBridge` - runs an external training program and talks to it
  with line-delimited JSON over stdin/stdout.
"""

from __future__ import annotations

import collections
import csv
import enum
import itertools
import json
import logging
import math
import queue
import random
import shlex
import subprocess
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Mapping, Sequence

from .chromosome import (
    DEFAULT_DOMAINS,
    ArchitecturePlan,
    Chromosome,
    GeneDomains,
    canonical_key,
    plan_to_chromosome,
)

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = 5


class Concurrency(enum.Enum):
    SERIAL = "serial"
    CONCURRENT = "concurrent"


class EvaluatorError(RuntimeError):
    """Raised when an evaluator cannot produce a loss for a plan."""


class FitnessEvaluator(ABC):
    """Contract for anything that scores a plan.

    ``evaluate`` returns a finite, non-negative average loss. Evaluators that
    declare :attr:`Concurrency.CONCURRENT` may be called from ``max_workers``
    threads at once.
    """

    concurrency: Concurrency = Concurrency.SERIAL
    max_workers: int = 1

    @abstractmethod
    def evaluate(self, plan: ArchitecturePlan, epochs: int = DEFAULT_EPOCHS) -> float:
        ...

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _check_loss(loss, plan: ArchitecturePlan) -> float:
    try:
        loss = float(loss)
    except (TypeError, ValueError):
        raise EvaluatorError(f"loss {loss!r} for {plan} is not a number") from None
    if not math.isfinite(loss) or loss < 0:
        raise EvaluatorError(f"loss {loss!r} for {plan} must be finite and non-negative")
    return loss


# ---------------------------------------------------------------------------
# synthetic landscape
# ---------------------------------------------------------------------------


def normalized_distances(a: Chromosome, b: Chromosome) -> tuple[float, float, float, float]:
    """Per-gene distance scaled to [0, 1] by the span of each gene's domain.

    Menu genes are compared by index, so one learning-rate step counts the same
    as one dropout step relative to the menu length.
    """
    d = a.domains

    def scaled(x, y, span):
        return abs(x - y) / span if span else 0.0

    inc_lo, inc_hi = d.included_layers_range
    frz_lo, frz_hi = d.frozen_layers_range
    return (
        scaled(a.included_layers, b.included_layers, inc_hi - inc_lo),
        scaled(a.frozen_layers, b.frozen_layers, frz_hi - frz_lo),
        scaled(a.learning_rate_index, b.learning_rate_index, len(d.learning_rate_menu) - 1),
        scaled(a.dropout_index, b.dropout_index, len(d.dropout_menu) - 1),
    )


@dataclass(frozen=True)
class SyntheticLandscape(FitnessEvaluator):
    """Loss = sum of weight * normalized distance from ``target``.

    With ``noise_amplitude > 0`` a uniform ``[0, amplitude)`` term is added.
    The noise is seeded from ``noise_seed`` and the plan itself, so repeated
    calls with the same plan still return the same loss.
    """

    target: Chromosome
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    noise_amplitude: float = 0.0
    noise_seed: int = 0

    concurrency = Concurrency.CONCURRENT
    max_workers = 1

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != 4 or any(w < 0 or not math.isfinite(w) for w in self.weights):
            raise ValueError(f"weights must be 4 non-negative reals, got {self.weights}")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be non-negative")

    @property
    def domains(self) -> GeneDomains:
        return self.target.domains

    def loss_of(self, c: Chromosome) -> float:
        loss = sum(w * dist for w, dist in zip(self.weights, normalized_distances(c, self.target)))
        if self.noise_amplitude:
            # str seeds hash with sha512, independent of PYTHONHASHSEED.
            rng = random.Random(f"{self.noise_seed}:{canonical_key(c)}")
            loss += self.noise_amplitude * rng.random()
        return loss

    def evaluate(self, plan: ArchitecturePlan, epochs: int = DEFAULT_EPOCHS) -> float:
        return self.loss_of(plan_to_chromosome(plan, self.domains))


def synthetic_evaluate(landscape: SyntheticLandscape, plan: ArchitecturePlan, epochs: int = DEFAULT_EPOCHS) -> float:
    return landscape.evaluate(plan, epochs)


# ---------------------------------------------------------------------------
# lookup table
# ---------------------------------------------------------------------------

LOOKUP_COLUMNS = ("included_layers", "frozen_layers", "learning_rate", "dropout", "avg_loss")


class LookupEvaluator(FitnessEvaluator):
    """Serve losses from a table keyed by :func:`canonical_key`."""

    concurrency = Concurrency.CONCURRENT

    def __init__(self, table: Mapping[tuple, float], domains: GeneDomains = DEFAULT_DOMAINS):
        self.table = dict(table)
        self.domains = domains

    @classmethod
    def from_losses(cls, losses: Mapping[Chromosome, float]) -> "LookupEvaluator":
        domains = next(iter(losses)).domains if losses else DEFAULT_DOMAINS
        return cls({canonical_key(c): loss for c, loss in losses.items()}, domains)

    @classmethod
    def from_csv(cls, path, domains: GeneDomains = DEFAULT_DOMAINS) -> "LookupEvaluator":
        """Load a table with columns ``included_layers, frozen_layers, learning_rate, dropout, avg_loss``."""
        table = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(LOOKUP_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                c = Chromosome.from_values(
                    int(row["included_layers"]),
                    int(row["frozen_layers"]),
                    float(row["learning_rate"]),
                    float(row["dropout"]),
                    domains,
                )
                table[canonical_key(c)] = float(row["avg_loss"])
        return cls(table, domains)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOOKUP_COLUMNS)
            for key in sorted(self.table):
                c = Chromosome(*key, self.domains)
                writer.writerow([*c.values, repr(self.table[key])])

    def evaluate(self, plan: ArchitecturePlan, epochs: int = DEFAULT_EPOCHS) -> float:
        key = canonical_key(plan_to_chromosome(plan, self.domains))
        try:
            return self.table[key]
        except KeyError:
            raise EvaluatorError(f"no loss recorded for {plan}") from None


def lookup_evaluate(table: Mapping[tuple, float], plan: ArchitecturePlan, domains: GeneDomains = DEFAULT_DOMAINS) -> float:
    return LookupEvaluator(table, domains).evaluate(plan)


# ---------------------------------------------------------------------------
# external trainer bridge
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainerBridgeConfig:
    command: Sequence[str]
    request_timeout: float = 3600.0
    max_retries: int = 1
    pool_size: int = 1
    cwd: str | None = None

    def __post_init__(self):
        if isinstance(self.command, str):
            object.__setattr__(self, "command", tuple(shlex.split(self.command)))
        else:
            object.__setattr__(self, "command", tuple(self.command))
        if not self.command:
            raise ValueError("command must not be empty")
        if not self.request_timeout > 0:
            raise ValueError("request_timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")


class _Malformed(Exception):
    pass


class _Timeout(Exception):
    pass


_EOF = object()


class _TrainerProcess:
    """One child trainer. Handles one request at a time."""

    def __init__(self, cfg: TrainerBridgeConfig):
        self.cfg = cfg
        self.proc = subprocess.Popen(
            list(cfg.command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            bufsize=1,
            cwd=cfg.cwd,
        )
        self.lines: queue.Queue = queue.Queue()
        self.stderr_tail: collections.deque = collections.deque(maxlen=50)
        threading.Thread(target=self._pump_stdout, daemon=True).start()
        threading.Thread(target=self._pump_stderr, daemon=True).start()

    def _pump_stdout(self):
        for line in self.proc.stdout:
            self.lines.put(line)
        self.lines.put(_EOF)

    def _pump_stderr(self):
        for line in self.proc.stderr:
            self.stderr_tail.append(line.rstrip("\n"))

    def diagnostics(self) -> str:
        return "\n".join(self.stderr_tail)

    def request(self, request_id: int, plan: ArchitecturePlan, epochs: int) -> float:
        line = json.dumps({"id": request_id, "epochs": epochs, "plan": plan.to_dict()})
        try:
            self.proc.stdin.write(line + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError):
            raise EvaluatorError(self._exit_message()) from None
        try:
            raw = self.lines.get(timeout=self.cfg.request_timeout)
        except queue.Empty:
            raise _Timeout() from None
        if raw is _EOF:
            raise EvaluatorError(self._exit_message())
        return self._parse(raw, request_id)

    def _exit_message(self) -> str:
        try:
            code = self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            code = None
        return f"trainer exited with status {code}; stderr:\n{self.diagnostics()}"

    @staticmethod
    def _parse(raw: str, request_id: int) -> float:
        try:
            msg = json.loads(raw)
        except json.JSONDecodeError:
            raise _Malformed(raw) from None
        if not isinstance(msg, dict) or msg.get("id") != request_id:
            raise _Malformed(raw)
        if "error" in msg:
            raise EvaluatorError(f"trainer reported error: {msg['error']}")
        loss = msg.get("avg_loss")
        if isinstance(loss, bool) or not isinstance(loss, (int, float)):
            raise _Malformed(raw)
        return float(loss)

    def alive(self) -> bool:
        return self.proc.poll() is None

    def kill(self):
        if self.proc.poll() is None:
            self.proc.kill()
        self.proc.wait()
        for stream in (self.proc.stdin, self.proc.stdout, self.proc.stderr):
            try:
                stream.close()
            except (OSError, ValueError):
                pass

    def close(self, grace: float = 5.0):
        try:
            self.proc.stdin.close()
        except (OSError, ValueError):
            pass
        try:
            self.proc.wait(timeout=grace)
        except subprocess.TimeoutExpired:
            pass
        self.kill()


class TrainerBridge(FitnessEvaluator):
    """Delegate evaluation to an external training program.

    Each request is one JSON line on the child's stdin::

        {"id": 7, "epochs": 5, "plan": {"block_layer_counts": [...], ...}}

    and the child answers with one line, ``{"id": 7, "avg_loss": 0.42}`` or
    ``{"id": 7, "error": "..."}``. Timeouts and malformed answers are retried
    up to ``max_retries`` times; a timed-out child is killed and replaced.
    Children are started lazily and kept alive between requests.
    """

    def __init__(self, cfg: TrainerBridgeConfig):
        self.cfg = cfg
        self.max_workers = cfg.pool_size
        self.concurrency = Concurrency.CONCURRENT if cfg.pool_size > 1 else Concurrency.SERIAL
        self._ids = itertools.count(1)
        self._id_lock = threading.Lock()
        self._idle: queue.LifoQueue = queue.LifoQueue()
        self._all: list[_TrainerProcess] = []
        self._all_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(cfg.pool_size)
        self._closed = False

    def _next_id(self) -> int:
        with self._id_lock:
            return next(self._ids)

    def _spawn(self) -> _TrainerProcess:
        try:
            worker = _TrainerProcess(self.cfg)
        except OSError as exc:
            raise EvaluatorError(f"cannot start trainer {list(self.cfg.command)}: {exc}") from exc
        with self._all_lock:
            self._all.append(worker)
        return worker

    def _discard(self, worker: _TrainerProcess):
        worker.kill()
        with self._all_lock:
            if worker in self._all:
                self._all.remove(worker)

    def _acquire(self) -> _TrainerProcess:
        try:
            worker = self._idle.get_nowait()
        except queue.Empty:
            return self._spawn()
        if worker.alive():
            return worker
        self._discard(worker)
        return self._spawn()

    def evaluate(self, plan: ArchitecturePlan, epochs: int = DEFAULT_EPOCHS) -> float:
        if self._closed:
            raise EvaluatorError("bridge is closed")
        with self._slots:
            worker = self._acquire()
            last_problem = ""
            try:
                for attempt in range(self.cfg.max_retries + 1):
                    request_id = self._next_id()
                    try:
                        loss = worker.request(request_id, plan, epochs)
                    except _Timeout:
                        last_problem = f"no response within {self.cfg.request_timeout}s"
                        log.warning("trainer timeout on attempt %d for %s", attempt + 1, plan)
                        self._discard(worker)
                        worker = self._spawn()
                        continue
                    except _Malformed as exc:
                        last_problem = f"malformed response line: {exc.args[0]!r}"
                        log.warning("malformed trainer response on attempt %d: %r", attempt + 1, exc.args[0])
                        continue
                    except EvaluatorError:
                        self._discard(worker)
                        worker = None
                        raise
                    self._idle.put(worker)
                    worker = None
                    return _check_loss(loss, plan)
                raise EvaluatorError(
                    f"trainer failed after {self.cfg.max_retries + 1} attempt(s): {last_problem}"
                )
            finally:
                if worker is not None:
                    # Retries exhausted: the child may still be mid-request.
                    self._discard(worker)

    def close(self) -> None:
        self._closed = True
        with self._all_lock:
            workers, self._all = self._all, []
        for worker in workers:
            worker.close()


def bridge_evaluate(cfg: TrainerBridgeConfig, plan: ArchitecturePlan, epochs: int = DEFAULT_EPOCHS) -> float:
    """One-shot evaluation through a fresh bridge."""
    with TrainerBridge(cfg) as bridge:
        return bridge.evaluate(plan, epochs)
