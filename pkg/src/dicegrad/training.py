"""Adam training loop, run records, and the four-loss comparison driver.

The loop is built for bitwise reproducibility: the sampler stream of step
t is derived from (seed, t) rather than from loop history, parameters are
updated in place through the model's parameter table, and the optimizer
moments travel inside checkpoints.  Resuming from a checkpoint at step k
therefore continues the exact arithmetic of the uninterrupted run.

The comparison driver trains one model per (loss kind, seed) cell on a
shared dataset, evaluates every cell on the same held-out cases, and
reduces the per-case Dice scores to the qualitative verdict of interest:
whether batch-pooled soft Dice beats cross-entropy and per-image soft
Dice on the smallest structures.
"""

from __future__ import annotations

import concurrent.futures
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint, metrics, model as model_mod, sampling, volume_io
from .errors import NumericError, ValidationError
from .losses import LossConfig, compute_loss
from .sampling import PatchDataset, SamplerConfig
from .tensor_core import Rng


@dataclass
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0          # 0: only the final checkpoint
    eval_every: int = 0                # 0: no evaluation during training
    holdout_cases: int = 5
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValidationError("adam betas must lie in (0, 1)")
        if self.steps < 0 or self.holdout_cases < 0:
            raise ValidationError("steps and holdout_cases must be >= 0")


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


@dataclass
class RunRecord:
    losses: list[tuple[int, float]] = field(default_factory=list)
    evals: list[tuple[int, dict[int, float]]] = field(default_factory=list)
    wall_clock: float = 0.0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """One in-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {t}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_eps)


def _mean_dsc_by_label(m: model_mod.SegModel,
                       holdout: list[tuple[str, volume_io.LabeledVolume]]):
    sums: dict[int, list[float]] = {}
    for _, vol in holdout:
        pred = model_mod.segment_volume(m, vol.intensities)
        report = metrics.evaluate_case(pred, vol, num_labels=m.cfg.num_labels)
        for label, lm in report.per_label.items():
            sums.setdefault(label, []).append(lm.dsc)
    return {label: float(np.mean(vals)) for label, vals in sorted(sums.items())}


def train(m: model_mod.SegModel, dataset: PatchDataset, cfg: TrainConfig,
          out_dir=None, holdout=None, state: AdamState | None = None):
    """Run the optimization loop; returns (model, RunRecord).

    With `state` from a loaded checkpoint, training resumes at state.step
    and reproduces the uninterrupted run bitwise (sampler streams are
    keyed by absolute step).  `out_dir`, when given, receives the loss
    curve, periodic checkpoints, and a final checkpoint.
    """
    params = m.param_table()
    if state is None:
        state = AdamState.fresh(params)
    sampler_rng = Rng(cfg.seed).child(0)
    record = RunRecord()
    started = time.monotonic()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    batch_size = cfg.sampler.batch_size
    for t in range(state.step, cfg.steps):
        batch = sampling.sample_balanced_batch(dataset, cfg.sampler, sampler_rng,
                                               start_index=t * batch_size)
        p, caches = model_mod.forward(m, batch.images, "train")
        res = compute_loss(p, batch.onehot, cfg.loss)
        if not np.isfinite(res.value):
            raise NumericError(f"loss became non-finite at step {t}")
        grads = model_mod.backward(m, caches, res.grad_p)
        adam_step(params, grads, state, cfg)
        record.losses.append((t, res.value))
        done = t + 1
        if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            checkpoint.save_checkpoint(
                m, state, os.path.join(out_dir, f"ckpt_{done:06d}.dgrd"))
        if holdout and cfg.eval_every and done % cfg.eval_every == 0:
            record.evals.append((done, _mean_dsc_by_label(m, holdout)))

    record.wall_clock = time.monotonic() - started
    if out_dir is not None:
        checkpoint.save_checkpoint(m, state, os.path.join(out_dir, "final.dgrd"))
        write_run_record(out_dir, record)
    return m, record


def write_run_record(out_dir, record: RunRecord) -> None:
    """Loss curve as line-delimited records plus a deterministic summary;
    wall-clock goes to its own file so the rest is bitwise reproducible."""
    with open(os.path.join(out_dir, "curve.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("step,loss\n")
        for step, value in record.losses:
            fh.write(f"{step},{value:.17g}\n")
    summary = {
        "steps_recorded": len(record.losses),
        "final_loss": record.losses[-1][1] if record.losses else None,
        "evals": [
            {"step": step, "mean_dsc": {str(k): v for k, v in by_label.items()}}
            for step, by_label in record.evals
        ],
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "timing.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(f"wall_clock_seconds={record.wall_clock:.3f}\n")


# ---------------------------------------------------------------------------
# four-loss comparison experiment
# ---------------------------------------------------------------------------

@dataclass
class CompareConfig:
    losses: tuple[str, ...] = ("ce", "wce", "sd", "bsd")
    seeds: tuple[int, ...] = (0, 1, 2)
    small_labels: tuple[int, ...] = (3, 4)     # cross and tube analogs


@dataclass
class CaseResult:
    loss_kind: str
    seed: int
    case_id: str
    label: int
    dsc: float
    asd_mm: float | None


@dataclass
class CompareReport:
    results: list[CaseResult]
    failed_cells: list[tuple[str, int, str]]
    verdicts: list[str]
    small_label_wins: dict[int, int]        # label -> seeds where bsd > ce
    bsd_beats_sd_mean: dict[int, bool]      # label -> bsd mean > sd mean


def load_split(data_dir, holdout_cases: int, num_labels: int):
    """Dataset split: all but the last `holdout_cases` manifest entries
    train; the tail is held out for evaluation."""
    refs = volume_io.read_manifest(data_dir)
    if holdout_cases >= len(refs):
        raise ValidationError(
            f"holdout_cases {holdout_cases} >= dataset size {len(refs)}"
        )
    cases = [(r.case_id, volume_io.load_case(data_dir, r)) for r in refs]
    split = len(cases) - holdout_cases
    train_ds = PatchDataset(cases[:split], num_labels)
    return train_ds, cases[split:]


def _run_cell(data_dir, model_cfg: model_mod.ModelConfig, cell_cfg: TrainConfig,
              cell_dir) -> list[CaseResult]:
    train_ds, holdout = load_split(data_dir, cell_cfg.holdout_cases,
                                   model_cfg.num_labels)
    m = model_mod.build_model(model_cfg, Rng(cell_cfg.seed).child(1))
    m, _ = train(m, train_ds, cell_cfg, out_dir=cell_dir, holdout=holdout)
    rows = []
    for case_id, vol in holdout:
        pred = model_mod.segment_volume(m, vol.intensities)
        report = metrics.evaluate_case(pred, vol, num_labels=model_cfg.num_labels)
        for label, lm in sorted(report.per_label.items()):
            rows.append(CaseResult(cell_cfg.loss.kind, cell_cfg.seed, case_id,
                                   label, lm.dsc, lm.asd_mm))
    return rows


def _mean_dsc(results, loss_kind: str, label: int, seed: int | None = None):
    vals = [r.dsc for r in results
            if r.loss_kind == loss_kind and r.label == label
            and (seed is None or r.seed == seed)]
    return float(np.mean(vals)) if vals else float("nan")


def run_loss_comparison(data_dir, model_cfg: model_mod.ModelConfig,
                        base_cfg: TrainConfig, cmp_cfg: CompareConfig,
                        out_dir, max_workers: int = 1) -> CompareReport:
    """Train every (loss, seed) cell, evaluate on the shared holdout, and
    summarize whether batch-pooled Dice wins on the small structures."""
    os.makedirs(out_dir, exist_ok=True)
    cells = [(kind, seed) for kind in cmp_cfg.losses for seed in cmp_cfg.seeds]
    jobs = {}
    for kind, seed in cells:
        cell_cfg = replace(base_cfg, seed=seed, loss=replace(base_cfg.loss, kind=kind))
        cell_dir = os.path.join(out_dir, f"{kind}_s{seed}")
        jobs[(kind, seed)] = (data_dir, model_cfg, cell_cfg, cell_dir)

    results: list[CaseResult] = []
    failed: list[tuple[str, int, str]] = []
    if max_workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=max_workers) as pool:
            futures = {key: pool.submit(_run_cell, *args) for key, args in jobs.items()}
            for (kind, seed), fut in futures.items():
                try:
                    results.extend(fut.result())
                except Exception as exc:       # a failed cell must not sink the rest
                    failed.append((kind, seed, f"{type(exc).__name__}: {exc}"))
    else:
        for (kind, seed), args in jobs.items():
            try:
                results.extend(_run_cell(*args))
            except Exception as exc:
                failed.append((kind, seed, f"{type(exc).__name__}: {exc}"))
    results.sort(key=lambda r: (r.loss_kind, r.seed, r.case_id, r.label))

    verdicts = []
    wins: dict[int, int] = {}
    bsd_beats_sd: dict[int, bool] = {}
    for label in cmp_cfg.small_labels:
        n_win = sum(
            1 for seed in cmp_cfg.seeds
            if _mean_dsc(results, "bsd", label, seed) > _mean_dsc(results, "ce", label, seed)
        )
        wins[label] = n_win
        bsd_mean = _mean_dsc(results, "bsd", label)
        sd_mean = _mean_dsc(results, "sd", label)
        ce_mean = _mean_dsc(results, "ce", label)
        bsd_beats_sd[label] = bool(bsd_mean > sd_mean)
        verdicts.append(
            f"label {label}: bsd>ce in {n_win}/{len(cmp_cfg.seeds)} seeds "
            f"(mean dsc bsd {bsd_mean:.3f}, sd {sd_mean:.3f}, ce {ce_mean:.3f}); "
            f"bsd mean > sd mean: {'yes' if bsd_beats_sd[label] else 'no'}"
        )
    return CompareReport(results, failed, verdicts, wins, bsd_beats_sd)


def write_comparison_csv(path, results: list[CaseResult]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("loss,seed,case_id,label,dsc,asd_mm\n")
        for r in results:
            asd = "" if r.asd_mm is None else f"{r.asd_mm:.17g}"
            fh.write(f"{r.loss_kind},{r.seed},{r.case_id},{r.label},{r.dsc:.17g},{asd}\n")
