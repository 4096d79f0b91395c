"""Measured comparative claims on the benchmark scenario beyond the acceptance set.

Runs are shared with test_acceptance through its cache.
"""
import numpy as np
import pytest

from test_acceptance import SEEDS, final_top1, run


def test_distillation_improves_on_stage1_audio_model():
    for s in SEEDS:
        res = run("modality_mirror", 0.3, s)
        assert res.history[-1].audio_top1 > res.stage1_history[-1].audio_top1


def test_harmony_fusion_beats_its_audio_model():
    for s in SEEDS:
        res = run("harmony", 0.3, s)
        assert res.history[-1].multimodal_top1 > res.stage1_history[-1].audio_top1


@pytest.mark.xfail(
    strict=True,
    reason="on the synthetic benchmark the audio-only cohort model edges out the shared-encoder "
    "audio model at r=0.3 (about +3pp); the expected ordering is dataset dependent",
)
def test_unifl_below_multifl_at_r03():
    uni = np.mean([final_top1("unifl", 0.3, s) for s in SEEDS])
    multi = np.mean([final_top1("multifl", 0.3, s) for s in SEEDS])
    assert uni < multi
