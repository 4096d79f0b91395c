import numpy as np
import pytest

from modmirror.baselines import (
    StrategyError,
    prepare,
    run_harmony,
    run_modality_mirror,
    run_multifl,
    run_strategy,
    run_unifl,
    unifl_quota,
)
from modmirror.datagen import Modality
from modmirror.flcore import init_params
from modmirror.metrics import rounds_csv

from conftest import tiny_config


def _run(fn, cfg):
    return fn(cfg, *prepare(cfg))


def test_unifl_quota():
    assert unifl_quota(10, 3, 7) == (3, 7)
    assert unifl_quota(10, 1, 99) == (1, 9)
    assert unifl_quota(10, 99, 1) == (9, 1)
    assert unifl_quota(10, 10, 0) == (10, 0)
    assert unifl_quota(5, 2, 2) == (2, 2)
    assert unifl_quota(10, 5, 5) == (5, 5)


def test_unifl_all_audio_equals_multifl():
    cfg = tiny_config(missing_rate=1.0)
    uni = _run(run_unifl, cfg)
    multi = _run(run_multifl, cfg)
    assert [(m.audio_top1, m.audio_topk) for m in uni.history] == [(m.audio_top1, m.audio_topk) for m in multi.history]
    assert uni.audio_model.equals(multi.audio_model)
    assert uni.multimodal_model is None


def test_unifl_without_audio_clients_fails():
    with pytest.raises(StrategyError, match="audio-only"):
        _run(run_unifl, tiny_config(missing_rate=0.0))


def test_unifl_cohort_purity():
    cfg = tiny_config(missing_rate=0.5, rounds=4)
    _, part, mods = prepare(cfg)
    res = _run(run_unifl, cfg)
    audio_ids = {i for i, m in enumerate(mods) if m is Modality.AUDIO_ONLY}
    assert res.audit.contributors["audio_model"] <= audio_ids
    assert not res.audit.contributors["multimodal_model"] & audio_ids
    assert res.audit.visual_to_audio_only == 0


def test_multifl_is_stage1_of_modality_mirror():
    cfg = tiny_config()
    multi = _run(run_multifl, cfg)
    mm = _run(run_modality_mirror, cfg)
    assert rounds_csv(multi.history) == rounds_csv(mm.stage1_history)
    assert multi.multimodal_model.equals(mm.multimodal_model)
    assert len(multi.history) == cfg.rounds


def test_multifl_zero_rounds_returns_initial_model():
    cfg = tiny_config(rounds=0)
    res = _run(run_multifl, cfg)
    assert res.history == []
    assert res.audio_model.equals(init_params(cfg.topology, cfg.seed).audio_part())


def test_harmony_audio_history_ignores_missing_rate():
    base = tiny_config(rounds=3)
    hists = []
    for r in (0.1, 0.3, 0.5):
        res = _run(run_harmony, base.replace(missing_rate=r))
        hists.append([(m.round, m.audio_top1, m.audio_topk, m.train_loss) for m in res.stage1_history])
        assert res.audio_model.equals(_run(run_harmony, base.replace(missing_rate=r)).audio_model)
    assert hists[0] == hists[1] == hists[2]


def test_harmony_fusion_starts_from_stage1_encoders():
    cfg = tiny_config(rounds=2)
    res = _run(run_harmony, cfg)
    init = res.fusion_init
    assert np.array_equal(init.audio_encoder, res.audio_model.audio_encoder)
    assert init.visual_encoder is not None
    # fine-tuning moved the fusion model away from that initialisation
    assert not np.array_equal(res.multimodal_model.fusion_head, init.fusion_head)
    assert [m.stage for m in res.history] == [1, 1, 2, 2]
    assert all(m.multimodal_top1 is not None for m in res.history if m.stage == 2)


def test_harmony_freeze_encoders_keeps_encoder_bytes():
    cfg = tiny_config(rounds=2, harmony_freeze_encoders=True)
    res = _run(run_harmony, cfg)
    assert np.array_equal(res.multimodal_model.audio_encoder, res.fusion_init.audio_encoder)
    assert np.array_equal(res.multimodal_model.visual_encoder, res.fusion_init.visual_encoder)


def test_run_strategy_dispatch_and_fair_inputs():
    cfg = tiny_config(rounds=1)
    names = {run_strategy(cfg.replace(strategy=s)).strategy for s in ("modality_mirror", "multifl", "unifl", "harmony")}
    assert names == {"modality_mirror", "multifl", "unifl", "harmony"}
    with pytest.raises(StrategyError):
        run_strategy(cfg.replace(strategy="creamfl"))
    # partition does not depend on strategy or missing rate
    _, p1, _ = prepare(cfg.replace(missing_rate=0.1, strategy="unifl"))
    _, p2, _ = prepare(cfg.replace(missing_rate=0.9))
    assert p1 == p2
