"""Comparison strategies built on the flcore engine, plus a single dispatch point."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import flcore
from .config import RunConfig
from .datagen import (
    Modality,
    MultimodalDataset,
    assign_modalities,
    dirichlet_partition,
    generate_dataset,
)
from .flcore import (
    STAGE1,
    TAG_MODALITY,
    TAG_PARTITION,
    TAG_SAMPLE,
    Audit,
    ClientSpec,
    ClientUpdate,
    Federation,
    ParamSet,
    aggregate_stage1,
    build_federation,
    derive_rng,
    draw_ids,
    evaluate_round,
    init_params,
    local_train_audio,
    local_train_multimodal,
    run_tasks,
    sample_round_clients,
)
from .metrics import RoundMetrics, topk_accuracy
from .nnkit import AudioModel, DenseNet

# stage tags private to the baselines
HARMONY_AUDIO = 21
HARMONY_VISUAL = 22
HARMONY_FUSION = 23
UNIFL_MM_COHORT = 1


class StrategyError(RuntimeError):
    """A strategy cannot run on the given population."""


@dataclass
class StrategyResult:
    strategy: str
    audio_model: ParamSet
    history: list[RoundMetrics]
    multimodal_model: Optional[ParamSet] = None
    audit: Optional[Audit] = None
    stage1_history: Optional[list[RoundMetrics]] = None
    # Harmony only: the fusion model before any fine-tuning step
    fusion_init: Optional[ParamSet] = None


def _mean_loss(updates) -> float:
    return float(np.mean([u.loss for u in sorted(updates, key=lambda u: u.client_id)])) if updates else float("nan")


def run_multifl(cfg: RunConfig, data: MultimodalDataset, partition, modalities) -> StrategyResult:
    """Modality-aware FL alone; the audio model is the global audio encoder + audio head."""
    fed = build_federation(cfg, data, partition, modalities)
    params, history = flcore.run_stage1(fed, init_params(cfg.topology, cfg.seed))
    return StrategyResult("multifl", params.audio_part(), history, params, fed.audit, history)


def run_modality_mirror(cfg: RunConfig, data: MultimodalDataset, partition, modalities) -> StrategyResult:
    res = flcore.run_modality_mirror(cfg, data, partition, modalities)
    return StrategyResult("modality_mirror", res.audio_model, res.history, res.teacher, res.audit, res.stage1_history)


def unifl_quota(k: int, n_audio: int, n_multi: int) -> tuple[int, int]:
    """Split the per-round client budget between cohorts in proportion to size."""
    n = n_audio + n_multi
    k_a = int(round(k * n_audio / n)) if n_audio else 0
    if n_audio:
        k_a = max(1, k_a)
    k_m = k - k_a
    if n_multi:
        k_m = max(1, k_m)
    if k_a + k_m > k and k_a > 1:
        k_a -= 1
    return min(k_a, n_audio), min(k_m, n_multi)


def run_unifl(cfg: RunConfig, data: MultimodalDataset, partition, modalities) -> StrategyResult:
    """Two disjoint federations: audio-only clients train the audio model among
    themselves, multimodal clients train a late-fusion model among themselves."""
    fed = build_federation(cfg, data, partition, modalities)
    a_ids = fed.ids(Modality.AUDIO_ONLY)
    m_ids = fed.ids(Modality.MULTIMODAL)
    if not a_ids:
        raise StrategyError("UniFL needs at least one audio-only client (missing_rate is 0)")
    k_a, k_m = unifl_quota(cfg.clients_per_round, len(a_ids), len(m_ids))
    by_id = fed.by_id
    train, test = data.train, data.test
    start = init_params(cfg.topology, cfg.seed)
    audio = start.audio_part()
    mm = start.with_blocks(audio_head=None)
    history = []
    for t in range(cfg.rounds):
        s_a = draw_ids(a_ids, k_a, derive_rng(cfg.seed, TAG_SAMPLE, STAGE1, t))
        s_m = draw_ids(m_ids, k_m, derive_rng(cfg.seed, TAG_SAMPLE, STAGE1, t, UNIFL_MM_COHORT)) if k_m else []

        def work(c: ClientSpec) -> ClientUpdate:
            if c.audio_only:
                return local_train_audio(fed.audit.broadcast(audio, c), c, train, cfg, t, STAGE1)
            return local_train_multimodal(fed.audit.broadcast(mm, c), c, train, cfg, t, STAGE1)

        updates = run_tasks(work, [by_id[i] for i in sorted(s_a + s_m)], cfg.workers)
        a_up = [u for u in updates if by_id[u.client_id].audio_only]
        m_up = [u for u in updates if not by_id[u.client_id].audio_only]
        audio = aggregate_stage1(audio, a_up, [], cfg.aggregation)
        fed.audit.contributed("audio_model", s_a)
        if m_up:
            mm = aggregate_stage1(mm, [], m_up, cfg.aggregation)
            fed.audit.contributed("multimodal_model", s_m)
        mm_eval = mm if m_ids else None
        history.append(evaluate_round(t, 1, audio, cfg, test, mm_eval, _mean_loss(updates)))
    return StrategyResult("unifl", audio, history, mm if m_ids else None, fed.audit, history)


def _visual_classifier(cfg: RunConfig, flat: np.ndarray) -> AudioModel:
    # encoder + linear head classifier reused for the visual modality
    topo = cfg.topology
    n_enc = topo.block_sizes()["visual_encoder"]
    return AudioModel(
        DenseNet.from_flat(topo.visual_encoder_shape, flat[:n_enc]),
        DenseNet.from_flat(topo.audio_head_shape, flat[n_enc:]),
    )


def _train_visual(fed: Federation, visual: ParamSet, client: ClientSpec, t: int) -> ClientUpdate:
    cfg, train = fed.cfg, fed.data.train
    flat0 = np.concatenate([visual.visual_encoder, visual.audio_head])
    rng = derive_rng(cfg.seed, HARMONY_VISUAL, t, client.id)
    flat, loss = flcore.train_classifier(
        flat0, lambda p: _visual_classifier(cfg, p), train.visual, train.labels, client.shard, cfg, rng
    )
    n_enc = cfg.topology.block_sizes()["visual_encoder"]
    # the temporary visual head travels in the audio_head slot
    return ClientUpdate(client.id, ParamSet(visual_encoder=flat[:n_enc], audio_head=flat[n_enc:]), len(client.shard), loss)


def run_harmony(cfg: RunConfig, data: MultimodalDataset, partition, modalities) -> StrategyResult:
    """Per-modality FedAvg, then fusion fine-tuning among multimodal clients.

    Stage 1: every sampled client trains an audio classifier; sampled
    multimodal clients also train a visual classifier with a throwaway head.
    Stage 2: multimodal clients fine-tune a late-fusion model initialised
    from the stage-1 encoders. The reported audio model is the stage-1 one.
    """
    fed = build_federation(cfg, data, partition, modalities)
    by_id = fed.by_id
    train, test = data.train, data.test
    topo = cfg.topology
    start = init_params(topo, cfg.seed)
    rng = derive_rng(cfg.seed, HARMONY_VISUAL)
    visual_head = DenseNet.init([topo.embed_dim, topo.num_classes], ["identity"], rng).flatten()
    audio = start.audio_part()
    visual = ParamSet(visual_encoder=start.visual_encoder, audio_head=visual_head)
    h1 = []
    for t in range(cfg.rounds):
        s_a, s_m = sample_round_clients(t, fed.clients, cfg.clients_per_round, cfg.seed, HARMONY_AUDIO)
        everyone = [by_id[i] for i in sorted(s_a + s_m)]
        a_up = run_tasks(
            lambda c: local_train_audio(fed.audit.broadcast(audio, c), c, train, cfg, t, HARMONY_AUDIO),
            everyone,
            cfg.workers,
        )
        v_up = run_tasks(lambda c: _train_visual(fed, visual, c, t), [by_id[i] for i in s_m], cfg.workers)
        audio = aggregate_stage1(audio, a_up, [], cfg.aggregation)
        fed.audit.contributed("audio_model", s_a + s_m)
        if v_up:
            visual = ParamSet(
                visual_encoder=flcore.running_mean(
                    [u.params.visual_encoder for u in v_up],
                    [u.n_samples for u in v_up] if cfg.aggregation == "size" else None,
                ),
                audio_head=flcore.running_mean(
                    [u.params.audio_head for u in v_up],
                    [u.n_samples for u in v_up] if cfg.aggregation == "size" else None,
                ),
            )
            fed.audit.contributed("visual_model", s_m)
        # only audio training enters the loss column, keeping stage 1 independent of r
        h1.append(evaluate_round(t, 1, audio, cfg, test, None, _mean_loss(a_up)))

    fusion = ParamSet(
        audio_encoder=audio.audio_encoder,
        visual_encoder=visual.visual_encoder,
        audio_head=audio.audio_head,
        fusion_head=start.fusion_head,
    )
    fusion_init = fusion
    h2 = []
    last = h1[-1] if h1 else evaluate_round(-1, 1, audio, cfg, test)
    for t in range(cfg.rounds):
        _, s_m = sample_round_clients(t, fed.clients, cfg.clients_per_round, cfg.seed, HARMONY_FUSION)
        updates = run_tasks(
            lambda c: local_train_multimodal(
                fed.audit.broadcast(fusion, c), c, train, cfg, t, HARMONY_FUSION, cfg.harmony_freeze_encoders
            ),
            [by_id[i] for i in s_m],
            cfg.workers,
        )
        if updates:
            # fusion heads and both encoders are averaged over the multimodal cohort
            fusion = aggregate_stage1(fusion, [], updates, cfg.aggregation)
            fed.audit.contributed("fusion_model", s_m)
        h2.append(
            RoundMetrics(
                round=t,
                stage=2,
                audio_top1=last.audio_top1,
                audio_topk=last.audio_topk,
                multimodal_top1=topk_accuracy(flcore.multimodal_logits(fusion, topo, test), test.labels, 1),
                train_loss=_mean_loss(updates),
            )
        )
    return StrategyResult("harmony", audio, h1 + h2, fusion, fed.audit, h1, fusion_init)


STRATEGY_FUNCS = {
    "modality_mirror": run_modality_mirror,
    "multifl": run_multifl,
    "unifl": run_unifl,
    "harmony": run_harmony,
}


def prepare(cfg: RunConfig, data: MultimodalDataset | None = None):
    """Dataset, partition and modality assignment shared by every strategy.

    The partition depends only on the master seed (never on the missing rate
    or strategy), so strategies and missing rates are compared on the same
    shards.
    """
    if data is None:
        data = generate_dataset(cfg.dataset)
    part_seed = int(derive_rng(cfg.seed, TAG_PARTITION).integers(2**63))
    mod_seed = int(derive_rng(cfg.seed, TAG_MODALITY).integers(2**63))
    partition = dirichlet_partition(data.train.labels, cfg.n_clients, cfg.alpha, part_seed)
    modalities = assign_modalities(cfg.n_clients, cfg.missing_rate, mod_seed)
    return data, partition, modalities


def run_strategy(cfg: RunConfig, data: MultimodalDataset | None = None) -> StrategyResult:
    data, partition, modalities = prepare(cfg, data)
    try:
        fn = STRATEGY_FUNCS[cfg.strategy]
    except KeyError:
        raise StrategyError(f"unknown strategy {cfg.strategy!r}") from None
    return fn(cfg, data, partition, modalities)
