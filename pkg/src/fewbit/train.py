"""Training protocols: FeatComp-N runs, baselines, ablations, bit sweeps and code transfer."""
from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .estimators import OBJECTIVES, FewBitVideoQA, StoredBitsQA
from .featcomp import SWEEP_LEVELS
from .report import Report
from .tasks import VideoSet, gen_qa, gen_toy_videos, get_task
from .validation import check_batch_size

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("task", "objective", "n_bits", "seed", "accuracy")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    n_bits: int | None = 10
    epochs: int = 3
    batch_size: int = 32
    lr_featcomp: float = 1e-3
    lr_task_model: float = 1e-4
    lr_backbone: float = 1e-3
    objective: str = "task"
    train_backbone: bool = True
    recon_weight: float = 1.0
    precision: str = "float32"
    verbose: int = 0

    def __post_init__(self):
        check_batch_size(self.batch_size)
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.n_bits is not None and int(self.n_bits) < 1:
            raise ValueError("n_bits must be >= 1 or None")
        if int(self.epochs) < 1:
            raise ValueError("epochs must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def estimator(self, **overrides) -> FewBitVideoQA:
        params = dict(n_bits=self.n_bits, objective=self.objective, recon_weight=self.recon_weight,
                      epochs=self.epochs, batch_size=self.batch_size, lr_featcomp=self.lr_featcomp,
                      lr_task_model=self.lr_task_model, lr_backbone=self.lr_backbone,
                      train_backbone=self.train_backbone, random_state=self.seed,
                      precision=self.precision, verbose=self.verbose)
        params.update(overrides)
        return FewBitVideoQA(**params)


@dataclass
class ToyData:
    """Train/eval video sets; QA pairs are derived per task on demand."""

    train: VideoSet
    eval: VideoSet

    def arrays(self, task: str, split: str = "train"):
        videos = self.train if split == "train" else self.eval
        qa = gen_qa(videos, task)
        return videos.frames[qa.video_index], qa.answers, qa.questions


def make_data(seed: int = 0, n_train: int = 4000, n_eval: int = 1000, noise: float = 0.1) -> ToyData:
    return ToyData(gen_toy_videos(seed, n_train, noise=noise),
                   gen_toy_videos(seed, n_eval, noise=noise, start_id=n_train, split=1))


@dataclass
class RunResult:
    task: str
    objective: str
    n_bits: int | None
    seed: int
    accuracy: float
    model: object = None
    history: list = field(default_factory=list)

    def row(self) -> dict:
        return {"task": self.task, "objective": self.objective, "n_bits": self.n_bits,
                "seed": self.seed, "accuracy": self.accuracy}


def _fit_score(est, data: ToyData, task: str, objective: str, n_bits, seed) -> RunResult:
    get_task(task)
    est.fit(*data.arrays(task, "train"))
    acc = est.score(*data.arrays(task, "eval"))
    log.info("%s/%s n_bits=%s seed=%s: accuracy %.4f", task, objective, n_bits, seed, acc)
    return RunResult(task, objective, n_bits, seed, acc, est, list(est.history_))


def train_task(config: TrainConfig, data: ToyData, task: str) -> RunResult:
    """Joint training under the task loss; accuracy uses deterministic bits."""
    if config.objective != "task":
        raise ValueError("train_task needs objective='task'")
    return _fit_score(config.estimator(), data, task, "task", config.n_bits, config.seed)


def train_floats_baseline(config: TrainConfig, data: ToyData, task: str) -> RunResult:
    """Same network with the bottleneck removed."""
    est = config.estimator(n_bits=None, objective="task")
    return _fit_score(est, data, task, "floats", None, config.seed)


def train_q_only(config: TrainConfig, data: ToyData, task: str) -> RunResult:
    """Answer head fed a zero visual input; learns the per-question prior."""
    est = config.estimator(n_bits=None, objective="task", q_only=True)
    return _fit_score(est, data, task, "q_only", None, config.seed)


def random_guess(task: str) -> float:
    """Chance accuracy: mean over the task's question types of 1/(valid answers)."""
    return get_task(task).chance_accuracy


def train_r_only(config: TrainConfig, data: ToyData, task: str, backbone: FewBitVideoQA | None = None) -> RunResult:
    """Reconstruction-only bottleneck on a frozen Floats extractor, then a fresh head."""
    est = config.estimator(objective="r_only", backbone=backbone)
    return _fit_score(est, data, task, "r_only", config.n_bits, config.seed)


def train_task_plus_r(config: TrainConfig, data: ToyData, task: str) -> RunResult:
    est = config.estimator(objective="task_plus_r")
    return _fit_score(est, data, task, "task_plus_r", config.n_bits, config.seed)


# -- sweep --------------------------------------------------------------------------

def _sweep_job(args):
    kind, config, data, task, keep = args
    fn = {"featcomp": train_task, "floats": train_floats_baseline, "q_only": train_q_only}[kind]
    try:
        result = fn(config, data, task)
        if not keep:
            result.model = None  # keep results light when crossing process boundaries
        return result, None
    except Exception as exc:  # noqa: BLE001 - a failed run is recorded, the sweep goes on
        return None, f"{kind} n_bits={config.n_bits} seed={config.seed}: {type(exc).__name__}: {exc}"


def spearman(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return math.nan  # undefined for constant input
    rho = spearmanr(x, y).statistic
    return float(rho) if np.isfinite(rho) else math.nan


@dataclass
class SweepResult:
    task: str
    levels: tuple
    seeds: tuple
    rows: list
    runs: list
    failures: list
    spearman: float

    def run(self, objective: str, n_bits, seed: int) -> RunResult:
        for r in self.runs:
            if r.objective == objective and r.n_bits == n_bits and r.seed == seed:
                return r
        raise KeyError((objective, n_bits, seed))

    def mean(self, name) -> float:
        """Mean accuracy of a level (int) or baseline ("floats", "q_only", "random")."""
        for row in self.rows:
            if row["name"] == name:
                return row["mean_accuracy"]
        raise KeyError(name)

    def report(self) -> Report:
        rep = Report(REPORT_COLUMNS, [r.row() for r in self.runs],
                     {"task": self.task, "levels": list(self.levels), "seeds": list(self.seeds),
                      "spearman": self.spearman, "failures": list(self.failures)})
        return rep

    def summary(self) -> Report:
        return Report(("name", "n_bits", "mean_accuracy", "accuracies"), [
            {"name": r["name"], "n_bits": r["n_bits"], "mean_accuracy": r["mean_accuracy"],
             "accuracies": r["accuracies"]} for r in self.rows], {"spearman": self.spearman})


def bit_sweep(base_config: TrainConfig, data: ToyData, task: str, levels=SWEEP_LEVELS,
              seeds=(0, 1, 2), jobs: int = 1, keep_models: bool = False) -> SweepResult:
    """Train every (level, seed) plus the Floats and Q-only baselines.

    Results are aggregated in submission order, so ``jobs`` never changes
    the output.  ``keep_models`` retains fitted estimators on the runs
    (serial sweeps only).
    """
    keep = bool(keep_models) and jobs <= 1
    levels = tuple(int(n) for n in levels)
    seeds = tuple(int(s) for s in seeds)
    base = base_config.replace(objective="task")
    plan = [("featcomp", base.replace(n_bits=n, seed=s), data, task, keep) for n in levels for s in seeds]
    plan += [(kind, base.replace(seed=s), data, task, keep) for kind in ("floats", "q_only") for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_job, plan))
    else:
        outcomes = [_sweep_job(job) for job in plan]
    runs = [r for r, _ in outcomes if r is not None]
    failures = [f for _, f in outcomes if f is not None]
    for f in failures:
        log.warning("sweep run failed: %s", f)

    def collect(objective, n_bits=None):
        return [r.accuracy for r in runs if r.objective == objective and r.n_bits == n_bits]

    rows = []
    for n in levels:
        accs = collect("task", n)
        rows.append({"name": n, "n_bits": n, "accuracies": accs,
                     "mean_accuracy": float(np.mean(accs)) if accs else math.nan})
    for name in ("floats", "q_only"):
        accs = collect(name)
        rows.append({"name": name, "n_bits": None, "accuracies": accs,
                     "mean_accuracy": float(np.mean(accs)) if accs else math.nan})
    chance = random_guess(task)
    rows.append({"name": "random", "n_bits": None, "accuracies": [chance], "mean_accuracy": chance})
    runs.extend(RunResult(task, "random", None, s, chance) for s in seeds)
    level_means = [r["mean_accuracy"] for r in rows[:len(levels)]]
    ok = [i for i, m in enumerate(level_means) if np.isfinite(m)]
    rho = spearman([levels[i] for i in ok], [level_means[i] for i in ok]) if len(ok) > 1 else math.nan
    return SweepResult(task, levels, seeds, rows, runs, failures, rho)


# -- transfer -----------------------------------------------------------------------

def train_on_bits(bits_train, bits_eval, data: ToyData, target_task: str, config: TrainConfig,
                  source_task: str = "?") -> RunResult:
    """Fresh decoder + head on stored codes only; ``bits_*`` are indexed by video."""
    qa_tr = gen_qa(data.train, target_task)
    qa_ev = gen_qa(data.eval, target_task)
    est = StoredBitsQA(epochs=config.epochs, batch_size=config.batch_size, lr_decoder=config.lr_featcomp,
                       lr_task_model=config.lr_task_model, random_state=config.seed,
                       precision=config.precision, verbose=config.verbose)
    est.fit(np.asarray(bits_train)[qa_tr.video_index], qa_tr.answers, qa_tr.questions)
    acc = est.score(np.asarray(bits_eval)[qa_ev.video_index], qa_ev.answers, qa_ev.questions)
    n_bits = int(np.asarray(bits_train).shape[1])
    log.info("transfer %s -> %s (%d bits, seed %s): accuracy %.4f", source_task, target_task, n_bits,
             config.seed, acc)
    return RunResult(target_task, f"transfer:{source_task}", n_bits, config.seed, acc, est, list(est.history_))


def transfer_eval(source_model: FewBitVideoQA, target_task: str, config: TrainConfig, data: ToyData,
                  source_task: str = "?") -> RunResult:
    """Extract the source model's frozen codes for every video and learn the target task from them."""
    if getattr(source_model, "featcomp_", None) is None:
        raise ValueError("source model has no bottleneck")
    bits_train = source_model.transform(data.train.frames)
    bits_eval = source_model.transform(data.eval.frames)
    return train_on_bits(bits_train, bits_eval, data, target_task, config, source_task)


def transfer_matrix(config: TrainConfig, data: ToyData, tasks=("motion", "shape"),
                    sources: dict | None = None) -> tuple[dict, Report]:
    """Accuracy[source][target] for codes learned on each source task."""
    sources = dict(sources or {})
    for task in tasks:
        if task not in sources:
            sources[task] = train_task(config.replace(objective="task"), data, task).model
    matrix: dict = {s: {} for s in tasks}
    rep = Report(REPORT_COLUMNS + ("source",))
    for s in tasks:
        for t in tasks:
            res = transfer_eval(sources[s], t, config, data, source_task=s)
            matrix[s][t] = res.accuracy
            rep.add(**res.row(), source=s)
    return matrix, rep


def results_report(results, meta: dict | None = None) -> Report:
    return Report(REPORT_COLUMNS, [r.row() for r in results], dict(meta or {}))
