"""Adam optimizer, training loop determinism, resume, and run records."""

import json
import math

import numpy as np
import pytest

from dicegrad import checkpoint, training
from dicegrad.errors import NumericError, ValidationError
from dicegrad.losses import LossConfig
from dicegrad.model import ModelConfig, build_model
from dicegrad.phantom import PhantomSpec, generate_phantom
from dicegrad.sampling import PatchDataset, SamplerConfig
from dicegrad.tensor_core import Rng
from dicegrad.training import (AdamState, TrainConfig, adam_step, train,
                               write_run_record)


@pytest.fixture(scope="module")
def tiny_world():
    """Three small phantom cases, a tiny model config, and a fast TrainConfig."""
    spec = PhantomSpec()
    cases = [(f"case_{i:03d}", generate_phantom(spec, 500 + i)) for i in range(3)]
    dataset = PatchDataset(cases[:2], num_labels=7)
    holdout = cases[2:]
    model_cfg = ModelConfig(num_labels=7, depth=1, base_channels=2, patch_size=16)
    return dataset, holdout, model_cfg


def fast_cfg(**kw):
    defaults = dict(
        steps=12,
        learning_rate=1e-3,
        seed=0,
        loss=LossConfig(kind="bsd", dice_label_mode="per_label_mean"),
        sampler=SamplerConfig(patch_size=16, batch_size=4, num_labels=7,
                              center_jitter_px=4, elastic_sigma=3.0,
                              elastic_alpha=1.0),
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState.fresh(params)
    before = params["w"].copy()
    adam_step(params, {"w": np.zeros(3)}, state, fast_cfg())
    assert np.array_equal(params["w"], before)
    assert state.step == 1


def test_adam_single_step_oracle():
    cfg = fast_cfg(learning_rate=0.01)
    g = 0.7
    params = {"w": np.array([2.0])}
    state = AdamState.fresh(params)
    adam_step(params, {"w": np.array([g])}, state, cfg)
    # bias-corrected first step: m_hat = g, v_hat = g^2
    want = 2.0 - cfg.learning_rate * g / (math.sqrt(g * g) + cfg.adam_eps)
    assert abs(params["w"][0] - want) < 1e-15


def test_adam_sequence_matches_scalar_reference():
    # five steps on one weight against a plain-float transcription of the
    # textbook recurrence
    cfg = fast_cfg(learning_rate=0.05)
    grads = [0.3, -0.2, 0.11, 0.9, -0.5]
    params = {"w": np.array([1.0])}
    state = AdamState.fresh(params)
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        adam_step(params, {"w": np.array([g])}, state, cfg)
        m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * g * g
        m_hat = m / (1 - cfg.adam_beta1 ** t)
        v_hat = v / (1 - cfg.adam_beta2 ** t)
        w -= cfg.learning_rate * m_hat / (math.sqrt(v_hat) + cfg.adam_eps)
        assert abs(params["w"][0] - w) < 1e-12, t


def test_adam_rejects_non_finite_gradient():
    params = {"w": np.array([1.0])}
    state = AdamState.fresh(params)
    with pytest.raises(NumericError, match="'w'"):
        adam_step(params, {"w": np.array([np.nan])}, state, fast_cfg())


def test_train_config_validation():
    with pytest.raises(ValidationError):
        fast_cfg(learning_rate=0.0)
    with pytest.raises(ValidationError):
        fast_cfg(adam_beta1=1.0)
    with pytest.raises(ValidationError):
        fast_cfg(steps=-1)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_training_descends_and_is_deterministic(tiny_world):
    dataset, _, model_cfg = tiny_world
    cfg = fast_cfg(steps=25)

    def run():
        m = build_model(model_cfg, Rng(cfg.seed).child(1))
        return train(m, dataset, cfg)

    m1, rec1 = run()
    m2, rec2 = run()
    assert rec1.losses == rec2.losses
    for name, p in m1.param_table().items():
        assert np.array_equal(p, m2.param_table()[name]), name
    first = np.mean([v for _, v in rec1.losses[:5]])
    last = np.mean([v for _, v in rec1.losses[-5:]])
    assert last < first


def test_zero_steps_writes_empty_record(tiny_world, tmp_path):
    dataset, _, model_cfg = tiny_world
    m = build_model(model_cfg, Rng(0))
    _, rec = train(m, dataset, fast_cfg(steps=0), out_dir=tmp_path)
    assert rec.losses == []
    assert (tmp_path / "final.dgrd").exists()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["final_loss"] is None
    assert summary["steps_recorded"] == 0


def test_periodic_eval_and_outputs(tiny_world, tmp_path):
    dataset, holdout, model_cfg = tiny_world
    cfg = fast_cfg(steps=4, eval_every=2, checkpoint_every=2)
    m = build_model(model_cfg, Rng(3))
    _, rec = train(m, dataset, cfg, out_dir=tmp_path, holdout=holdout)
    assert [step for step, _ in rec.evals] == [2, 4]
    for _, by_label in rec.evals:
        assert sorted(by_label) == [1, 2, 3, 4, 5, 6]
        assert all(0.0 <= v <= 1.0 for v in by_label.values())
    assert (tmp_path / "ckpt_000002.dgrd").exists()
    assert (tmp_path / "ckpt_000004.dgrd").exists()
    assert (tmp_path / "curve.csv").exists()
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 5
    step, value = lines[1].split(",")
    assert (int(step), float(value)) == rec.losses[0]


def test_resume_reproduces_uninterrupted_run(tiny_world, tmp_path):
    dataset, _, model_cfg = tiny_world
    cfg = fast_cfg(steps=10, checkpoint_every=5)

    full_dir = tmp_path / "full"
    m_full = build_model(model_cfg, Rng(cfg.seed).child(1))
    m_full, rec_full = train(m_full, dataset, cfg, out_dir=full_dir)

    m_back, state = checkpoint.load_checkpoint(full_dir / "ckpt_000005.dgrd")
    assert state is not None and state.step == 5
    resumed_dir = tmp_path / "resumed"
    m_back, rec_resumed = train(m_back, dataset, cfg, out_dir=resumed_dir,
                                state=state)
    # the resumed tail must be the exact bits of the uninterrupted run
    assert rec_resumed.losses == rec_full.losses[5:]
    for name, p in m_full.param_table().items():
        assert np.array_equal(p, m_back.param_table()[name]), name
    assert ((full_dir / "final.dgrd").read_bytes()
            == (resumed_dir / "final.dgrd").read_bytes())


def test_run_record_is_bitwise_reproducible(tiny_world, tmp_path):
    dataset, _, model_cfg = tiny_world
    cfg = fast_cfg(steps=6)
    dirs = []
    for tag in ("a", "b"):
        d = tmp_path / tag
        m = build_model(model_cfg, Rng(cfg.seed).child(1))
        train(m, dataset, cfg, out_dir=d)
        dirs.append(d)
    a, b = dirs
    assert (a / "curve.csv").read_bytes() == (b / "curve.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    assert (a / "final.dgrd").read_bytes() == (b / "final.dgrd").read_bytes()
    # timing may differ between runs; it lives outside the reproducible set
    assert (a / "timing.txt").exists()


def test_write_run_record_roundtrip(tmp_path):
    rec = training.RunRecord(
        losses=[(0, 1.5), (1, 1.25)],
        evals=[(2, {1: 0.5, 2: 0.75})],
        wall_clock=3.25,
    )
    write_run_record(tmp_path, rec)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["final_loss"] == 1.25
    assert summary["evals"] == [{"step": 2, "mean_dsc": {"1": 0.5, "2": 0.75}}]
    assert (tmp_path / "timing.txt").read_text() == "wall_clock_seconds=3.250\n"


# ---------------------------------------------------------------------------
# comparison driver
# ---------------------------------------------------------------------------

def synthetic_results():
    """bsd wins label 3 in 2 of 3 seeds and on the seed-mean over sd;
    label 4 goes to ce everywhere."""
    rows = []
    dsc = {
        ("bsd", 3): [0.70, 0.60, 0.20],
        ("ce", 3): [0.30, 0.20, 0.40],
        ("sd", 3): [0.40, 0.30, 0.35],
        ("bsd", 4): [0.10, 0.10, 0.10],
        ("ce", 4): [0.50, 0.50, 0.50],
        ("sd", 4): [0.20, 0.20, 0.20],
    }
    for (kind, label), vals in dsc.items():
        for seed, v in enumerate(vals):
            rows.append(training.CaseResult(kind, seed, "case_000", label, v, None))
    return rows


def test_mean_dsc_filters():
    rows = synthetic_results()
    assert training._mean_dsc(rows, "bsd", 3, seed=0) == 0.70
    assert abs(training._mean_dsc(rows, "bsd", 3) - 0.5) < 1e-12
    assert math.isnan(training._mean_dsc(rows, "wce", 3))


def test_comparison_csv_roundtrip(tmp_path):
    rows = synthetic_results()
    path = tmp_path / "compare_results.csv"
    training.write_comparison_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "loss,seed,case_id,label,dsc,asd_mm"
    assert len(lines) == len(rows) + 1
    kind, seed, case_id, label, dsc, asd = lines[1].split(",")
    assert (kind, int(seed), case_id, int(label)) == ("bsd", 0, "case_000", 3)
    assert float(dsc) == 0.70
    assert asd == ""                      # None serializes as empty


def _dataset_dir(tmp_path):
    from dicegrad import volume_io

    tmp_path.mkdir(parents=True, exist_ok=True)
    spec = PhantomSpec()
    refs = []
    for i in range(3):
        vol = generate_phantom(spec, 900 + i)
        refs.append(volume_io.save_case(tmp_path, f"case_{i:03d}", vol, 900 + i))
    volume_io.write_manifest(tmp_path, refs)
    return tmp_path


def test_load_split(tmp_path):
    data_dir = _dataset_dir(tmp_path)
    ds, holdout = training.load_split(data_dir, 1, num_labels=7)
    assert len(ds.cases) == 2
    assert [cid for cid, _ in holdout] == ["case_002"]
    with pytest.raises(ValidationError):
        training.load_split(data_dir, 3, num_labels=7)


def test_run_loss_comparison_sequential_and_parallel(tmp_path):
    data_dir = _dataset_dir(tmp_path / "data")
    model_cfg = ModelConfig(num_labels=7, depth=1, base_channels=2, patch_size=16)
    base = fast_cfg(steps=2, holdout_cases=1)
    cmp_cfg = training.CompareConfig(losses=("ce", "bsd"), seeds=(0,),
                                     small_labels=(3, 4))

    seq = training.run_loss_comparison(data_dir, model_cfg, base, cmp_cfg,
                                       tmp_path / "seq", max_workers=1)
    assert seq.failed_cells == []
    # two cells x one holdout case x six foreground labels
    assert len(seq.results) == 2 * 1 * 6
    assert (tmp_path / "seq" / "ce_s0" / "final.dgrd").exists()
    assert (tmp_path / "seq" / "bsd_s0" / "final.dgrd").exists()
    assert len(seq.verdicts) == 2
    assert set(seq.small_label_wins) == {3, 4}

    par = training.run_loss_comparison(data_dir, model_cfg, base, cmp_cfg,
                                       tmp_path / "par", max_workers=2)
    # worker scheduling must not change any result
    assert par.results == seq.results


def test_run_loss_comparison_collects_cell_failures(tmp_path):
    data_dir = _dataset_dir(tmp_path / "data")
    model_cfg = ModelConfig(num_labels=7, depth=1, base_channels=2, patch_size=16)
    base = fast_cfg(steps=1, holdout_cases=3)     # >= dataset size: every cell fails
    cmp_cfg = training.CompareConfig(losses=("ce",), seeds=(0, 1), small_labels=(3,))
    report = training.run_loss_comparison(data_dir, model_cfg, base, cmp_cfg,
                                          tmp_path / "out", max_workers=1)
    assert report.results == []
    assert {(k, s) for k, s, _ in report.failed_cells} == {("ce", 0), ("ce", 1)}
    assert all("ValidationError" in msg for _, _, msg in report.failed_cells)
