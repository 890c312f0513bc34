"""Stage mechanics: reversal schedule, inactive-parameter invariant,
inheritance, determinism, traces, and divergence guards."""

import csv
import math

import pytest
import torch

from conftest import tiny_run_config
from pairalign.checkpoint import fresh_checkpoint, load_checkpoint, save_checkpoint
from pairalign.config import GrlSchedule
from pairalign.curriculum import grl_coeff, run_curriculum, train_stage
from pairalign.errors import (InputError, SequencingError,
                              TrainingDivergedError)


def test_grl_coeff_ramp_endpoints():
    sched = GrlSchedule(kind="ramp", max_value=3.0)
    assert grl_coeff(0, sched, 100) == 0.0
    end = grl_coeff(100, sched, 100)
    assert abs(end - 3.0 * (2.0 / (1.0 + math.exp(-10.0)) - 1.0)) < 1e-12
    assert end > 2.99


def test_grl_coeff_ramp_monotone():
    sched = GrlSchedule(kind="ramp", max_value=2.0)
    vals = [grl_coeff(s, sched, 50) for s in range(51)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_grl_coeff_constant_and_errors():
    sched = GrlSchedule(kind="constant", max_value=1.5)
    assert grl_coeff(0, sched, 100) == 1.5
    assert grl_coeff(99, sched, 100) == 1.5
    with pytest.raises(InputError):
        grl_coeff(-1, sched, 100)


def test_stage1_leaves_inactive_parameters_bit_unchanged(small_corpus):
    config = tiny_run_config(steps=2)
    init = fresh_checkpoint(config)
    before = {k: v.clone() for k, v in init.model_state.items()}
    result = train_stage(config.curriculum.stages[0], small_corpus, init, config)
    inactive = ("student.contrast_head.", "domain.", "dec_he.", "dec_sim.")
    changed_active = 0
    for key, tensor in result.model_state.items():
        if key.startswith(inactive):
            assert torch.equal(tensor, before[key]), f"{key} moved in stage 1"
        elif key.startswith("student.backbone."):
            changed_active += int(not torch.equal(tensor, before[key]))
    assert changed_active > 0  # the active path really trained


def test_stage2_touches_domain_but_not_contrast(small_corpus):
    config = tiny_run_config(steps=2)
    s1 = train_stage(config.curriculum.stages[0], small_corpus,
                     fresh_checkpoint(config), config)
    before = {k: v.clone() for k, v in s1.model_state.items()}
    s2 = train_stage(config.curriculum.stages[1], small_corpus, s1, config)
    assert any(not torch.equal(s2.model_state[k], before[k])
               for k in before if k.startswith("domain."))
    for key in before:
        if key.startswith(("student.contrast_head.", "dec_he.", "dec_sim.")):
            assert torch.equal(s2.model_state[key], before[key]), key


def test_stage_sequencing_enforced(small_corpus):
    config = tiny_run_config(steps=1)
    init = fresh_checkpoint(config)
    with pytest.raises(SequencingError):
        train_stage(config.curriculum.stages[1], small_corpus, init, config)


def test_paired_stage_needs_both_modalities(small_corpus):
    config = tiny_run_config(steps=1)
    s1 = train_stage(config.curriculum.stages[0], small_corpus,
                     fresh_checkpoint(config), config, modalities=("sim",))
    s2 = train_stage(config.curriculum.stages[1], small_corpus, s1, config,
                     modalities=("sim",))
    with pytest.raises(InputError, match="both modalities"):
        train_stage(config.curriculum.stages[2], small_corpus, s2, config,
                    modalities=("sim",))


def test_run_curriculum_fixed_seed_is_bit_reproducible(small_corpus, tmp_path):
    config = tiny_run_config(steps=3, seed=11)
    run_curriculum(config, small_corpus, tmp_path / "a", through_stage=2)
    run_curriculum(config, small_corpus, tmp_path / "b", through_stage=2)
    trace_a = (tmp_path / "a/loss_trace.csv").read_text()
    trace_b = (tmp_path / "b/loss_trace.csv").read_text()
    assert trace_a == trace_b
    ck_a = load_checkpoint(tmp_path / "a/stage2.ckpt")
    ck_b = load_checkpoint(tmp_path / "b/stage2.ckpt")
    for key, tensor in ck_a.model_state.items():
        assert torch.equal(tensor, ck_b.model_state[key]), key


def test_checkpoint_chain_inherits_weights_bit_exactly(small_corpus, tmp_path):
    config = tiny_run_config(steps=2)
    s1 = train_stage(config.curriculum.stages[0], small_corpus,
                     fresh_checkpoint(config), config)
    save_checkpoint(s1, tmp_path / "stage1.ckpt")
    reloaded = load_checkpoint(tmp_path / "stage1.ckpt")
    for key, tensor in s1.model_state.items():
        assert torch.equal(reloaded.model_state[key], tensor), key
    s2 = train_stage(config.curriculum.stages[1], small_corpus, reloaded, config)
    assert s2.stage_id == 2 and s2.step == s1.step + 2


def test_trace_columns_and_stage_activation(small_corpus, tmp_path):
    config = tiny_run_config(steps=2)
    run_curriculum(config, small_corpus, tmp_path / "run", through_stage=3)
    with open(tmp_path / "run/loss_trace.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 6
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4, 5, 6]
    by_stage = {int(r["stage"]): r for r in rows}
    assert float(by_stage[1]["l_domain"]) == 0.0  # inactive loss logs 0
    assert float(by_stage[2]["l_domain"]) != 0.0
    assert float(by_stage[2]["l_contrast"]) == 0.0
    assert float(by_stage[3]["l_contrast"]) != 0.0
    assert float(by_stage[1]["l_dino"]) > 0.0


def test_run_curriculum_resume_reuses_checkpoints(small_corpus, tmp_path):
    config = tiny_run_config(steps=2)
    first = run_curriculum(config, small_corpus, tmp_path / "r", through_stage=2)
    stamp = (tmp_path / "r/stage1.ckpt").stat().st_mtime_ns
    second = run_curriculum(config, small_corpus, tmp_path / "r", through_stage=2,
                            resume=True)
    assert (tmp_path / "r/stage1.ckpt").stat().st_mtime_ns == stamp
    for key, tensor in first[-1].model_state.items():
        assert torch.equal(second[-1].model_state[key], tensor), key


def test_run_curriculum_resume_rejects_config_drift(small_corpus, tmp_path):
    run_curriculum(tiny_run_config(steps=2), small_corpus, tmp_path / "r",
                   through_stage=1)
    with pytest.raises(SequencingError, match="different config"):
        run_curriculum(tiny_run_config(steps=3), small_corpus, tmp_path / "r",
                       through_stage=1, resume=True)


def test_run_curriculum_unknown_stage(small_corpus):
    with pytest.raises(InputError, match="no stage"):
        run_curriculum(tiny_run_config(), small_corpus, None, through_stage=7)


def test_non_finite_loss_aborts(small_corpus, monkeypatch):
    import pairalign.curriculum as cur_mod
    config = tiny_run_config(steps=2)

    def poisoned(*args, **kwargs):
        return torch.tensor(float("nan"), requires_grad=True)

    monkeypatch.setattr(cur_mod, "dino_loss", poisoned)
    with pytest.raises(TrainingDivergedError) as err:
        train_stage(config.curriculum.stages[0], small_corpus,
                    fresh_checkpoint(config), config)
    assert err.value.diagnostics["stage"] == 1
