"""Round-based engine: modality-aware FL followed by federated distillation.

Clients are simulated in-process. Each local-training task is a pure function
of the broadcast parameters and a per-client RNG derived from
``(seed, stage, round, client_id)``, so results do not depend on how many
workers execute a round. Aggregation always consumes updates in ascending
client-id order.
"""
from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import nnkit
from .config import RunConfig
from .datagen import Modality, MultimodalDataset, Split
from .metrics import RoundMetrics, topk_accuracy
from .nnkit import AudioModel, DenseNet, InvalidInput, MultimodalModel, Topology

BLOCKS = ("audio_encoder", "visual_encoder", "audio_head", "fusion_head")
AUDIO_BLOCKS = ("audio_encoder", "audio_head")
VISUAL_BLOCKS = ("visual_encoder", "fusion_head")

# RNG stream tags
TAG_INIT = 1
TAG_PARTITION = 2
TAG_MODALITY = 3
TAG_SAMPLE = 4
STAGE1 = 1
STAGE2 = 2


class InvalidState(RuntimeError):
    """An operation was invoked on a client or model in the wrong state."""


class ContractViolation(RuntimeError):
    """A caller broke a protocol rule (e.g. asked an audio-only client to distill)."""


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for a (seed, tag...) coordinate."""
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


@dataclass(frozen=True)
class ParamSet:
    """Named flat parameter blocks; absent blocks are ``None``."""

    audio_encoder: Optional[np.ndarray] = None
    visual_encoder: Optional[np.ndarray] = None
    audio_head: Optional[np.ndarray] = None
    fusion_head: Optional[np.ndarray] = None

    def blocks(self) -> dict[str, np.ndarray]:
        return {b: getattr(self, b) for b in BLOCKS if getattr(self, b) is not None}

    def audio_part(self) -> "ParamSet":
        return ParamSet(audio_encoder=self.audio_encoder, audio_head=self.audio_head)

    def with_blocks(self, **blocks) -> "ParamSet":
        return replace(self, **blocks)

    def has_visual(self) -> bool:
        return self.visual_encoder is not None or self.fusion_head is not None

    def flat(self) -> np.ndarray:
        return np.concatenate(list(self.blocks().values()))

    def equals(self, other: "ParamSet") -> bool:
        a, b = self.blocks(), other.blocks()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

    def check(self, topo: Topology) -> None:
        sizes = topo.block_sizes()
        for name, vec in self.blocks().items():
            if vec.shape != (sizes[name],):
                raise InvalidInput(f"block {name} has {vec.size} entries, topology needs {sizes[name]}")

    def audio_model(self, topo: Topology) -> AudioModel:
        return AudioModel(
            DenseNet.from_flat(topo.audio_encoder_shape, self.audio_encoder),
            DenseNet.from_flat(topo.audio_head_shape, self.audio_head),
        )

    def multimodal_model(self, topo: Topology) -> MultimodalModel:
        return MultimodalModel(
            DenseNet.from_flat(topo.audio_encoder_shape, self.audio_encoder),
            DenseNet.from_flat(topo.visual_encoder_shape, self.visual_encoder),
            DenseNet.from_flat(topo.fusion_head_shape, self.fusion_head),
        )


def init_params(topo: Topology, seed: int) -> ParamSet:
    rng = derive_rng(seed, TAG_INIT)
    h, e = topo.hidden_dim, topo.embed_dim
    enc = ["relu", "identity"]
    return ParamSet(
        audio_encoder=DenseNet.init([topo.audio_dim, h, e], enc, rng).flatten(),
        visual_encoder=DenseNet.init([topo.visual_dim, h, e], enc, rng).flatten(),
        audio_head=DenseNet.init([e, topo.num_classes], ["identity"], rng).flatten(),
        fusion_head=DenseNet.init([2 * e, topo.num_classes], ["identity"], rng).flatten(),
    )


def save_checkpoint(params: ParamSet, topo: Topology, path) -> None:
    """Write ``<path>.bin`` (little-endian float64, canonical order) plus a JSON sidecar."""
    path = Path(path)
    blocks, offset = [], 0
    for name, vec in params.blocks().items():
        blocks.append({"name": name, "offset": offset, "length": int(vec.size)})
        offset += vec.size
    params.flat().astype("<f8").tofile(path.with_suffix(".bin"))
    sidecar = {
        "dtype": "float64-le",
        "blocks": blocks,
        "topology": {
            "audio_dim": topo.audio_dim,
            "visual_dim": topo.visual_dim,
            "num_classes": topo.num_classes,
            "hidden_dim": topo.hidden_dim,
            "embed_dim": topo.embed_dim,
        },
        "layout": "per layer: weight (fan_in x fan_out) row-major, then bias",
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_checkpoint(path) -> tuple[ParamSet, Topology]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8").astype(np.float64)
    blocks = {b["name"]: flat[b["offset"] : b["offset"] + b["length"]].copy() for b in meta["blocks"]}
    topo = Topology(**meta["topology"])
    params = ParamSet(**blocks)
    params.check(topo)
    return params, topo


# ---------------------------------------------------------------------------
# clients and the simulated channel


@dataclass(frozen=True)
class ClientSpec:
    id: int
    modality: Modality
    shard: np.ndarray

    @property
    def audio_only(self) -> bool:
        return self.modality == Modality.AUDIO_ONLY


def make_clients(partition: Sequence[Sequence[int]], modalities: Sequence[Modality]) -> list[ClientSpec]:
    if len(partition) != len(modalities):
        raise InvalidInput("partition and modality list differ in length")
    return [
        ClientSpec(i, Modality(m), np.asarray(shard, dtype=np.int64))
        for i, (shard, m) in enumerate(zip(partition, modalities))
    ]


@dataclass
class Audit:
    """Counts what crossed the simulated server/client channel.

    ``delivered[(modality, block)]`` counts broadcasts; ``contributors[key]``
    records which client ids were averaged into a named global model block.
    """

    delivered: Counter = field(default_factory=Counter)
    contributors: dict = field(default_factory=lambda: defaultdict(set))

    def broadcast(self, params: ParamSet, client: ClientSpec) -> ParamSet:
        payload = params.audio_part() if client.audio_only else params
        for name in payload.blocks():
            self.delivered[(client.modality.value, name)] += 1
        return payload

    def contributed(self, key: str, ids: Iterable[int]) -> None:
        self.contributors[key].update(ids)

    @property
    def visual_to_audio_only(self) -> int:
        return sum(self.delivered[(Modality.AUDIO_ONLY.value, b)] for b in VISUAL_BLOCKS)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: ParamSet
    n_samples: int
    loss: float


def run_tasks(fn: Callable, items: Sequence, workers: int) -> list:
    """Map ``fn`` over ``items`` in order, optionally on a thread pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# scheduling


def draw_ids(pool: Sequence[int], k: int, rng: np.random.Generator) -> list[int]:
    pool = np.asarray(sorted(pool), dtype=np.int64)
    if k > len(pool):
        raise InvalidInput(f"cannot draw {k} clients from a pool of {len(pool)}")
    picked = rng.choice(len(pool), size=k, replace=False)
    return sorted(int(pool[i]) for i in picked)


def sample_round_clients(
    round: int, clients: Sequence[ClientSpec], k: int, seed: int, stage: int = STAGE1
) -> tuple[list[int], list[int]]:
    """Draw ``k`` distinct clients uniformly; return (audio-only ids, multimodal ids)."""
    ids = draw_ids([c.id for c in clients], k, derive_rng(seed, TAG_SAMPLE, stage, round))
    by_id = {c.id: c for c in clients}
    s_a = [i for i in ids if by_id[i].audio_only]
    s_m = [i for i in ids if not by_id[i].audio_only]
    return s_a, s_m


def sample_multimodal_clients(
    round: int, clients: Sequence[ClientSpec], k: int, seed: int, stage: int = STAGE2
) -> list[int]:
    """Draw up to ``k`` distinct multimodal clients (all of them when fewer exist)."""
    pool = [c.id for c in clients if not c.audio_only]
    return draw_ids(pool, min(k, len(pool)), derive_rng(seed, TAG_SAMPLE, stage, round, 1))


def _batches(shard: np.ndarray, cfg: RunConfig, rng: np.random.Generator):
    for _ in range(cfg.local_epochs):
        order = shard[rng.permutation(len(shard))]
        for s in range(0, len(order), cfg.batch_size):
            yield order[s : s + cfg.batch_size]


def _require_shard(client: ClientSpec):
    if len(client.shard) == 0:
        raise InvalidState(f"client {client.id} has an empty shard")


# ---------------------------------------------------------------------------
# local training


def train_classifier(
    flat: np.ndarray,
    build: Callable[[np.ndarray], AudioModel],
    inputs: np.ndarray,
    labels: np.ndarray,
    shard: np.ndarray,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Mini-batch SGD on cross-entropy for an encoder + head classifier."""
    losses = []
    for idx in _batches(shard, cfg, rng):
        loss, g = nnkit.loss_and_grad_ce(build(flat), (inputs[idx], labels[idx]))
        flat = nnkit.sgd_step(flat, g, cfg.lr)
        losses.append(loss)
    return flat, float(np.mean(losses))


def local_train_audio(
    global_params: ParamSet,
    client: ClientSpec,
    data: Split,
    cfg: RunConfig,
    round: int,
    stage: int = STAGE1,
) -> ClientUpdate:
    """Train the audio encoder + audio head on the client's audio samples."""
    _require_shard(client)
    topo = cfg.topology
    n_enc = topo.block_sizes()["audio_encoder"]
    flat0 = np.concatenate([global_params.audio_encoder, global_params.audio_head])
    rng = derive_rng(cfg.seed, stage, round, client.id)
    flat, loss = train_classifier(
        flat0, lambda p: AudioModel.from_flat(topo, p), data.audio, data.labels, client.shard, cfg, rng
    )
    params = ParamSet(audio_encoder=flat[:n_enc], audio_head=flat[n_enc:])
    return ClientUpdate(client.id, params, len(client.shard), loss)


def local_train_multimodal(
    global_params: ParamSet,
    client: ClientSpec,
    data: Split,
    cfg: RunConfig,
    round: int,
    stage: int = STAGE1,
    freeze_encoders: bool = False,
) -> ClientUpdate:
    """Train both encoders and the fusion head jointly on late-fusion CE.

    The audio head is passed back untouched.
    """
    if client.audio_only:
        raise ContractViolation(f"client {client.id} has no visual modality")
    _require_shard(client)
    topo = cfg.topology
    sizes = topo.block_sizes()
    a = sizes["audio_encoder"]
    v = a + sizes["visual_encoder"]
    flat = np.concatenate(
        [global_params.audio_encoder, global_params.visual_encoder, global_params.fusion_head]
    )
    rng = derive_rng(cfg.seed, stage, round, client.id)
    losses = []
    for idx in _batches(client.shard, cfg, rng):
        model = MultimodalModel.from_flat(topo, flat)
        loss, g = nnkit.loss_and_grad_ce(model, (data.audio[idx], data.visual[idx], data.labels[idx]))
        if freeze_encoders:
            g[:v] = 0.0
        flat = nnkit.sgd_step(flat, g, cfg.lr)
        losses.append(loss)
    params = ParamSet(
        audio_encoder=flat[:a],
        visual_encoder=flat[a:v],
        audio_head=global_params.audio_head,
        fusion_head=flat[v:],
    )
    return ClientUpdate(client.id, params, len(client.shard), float(np.mean(losses)))


def distill_local(
    student_global: ParamSet,
    teacher: ParamSet,
    client: ClientSpec,
    data: Split,
    cfg: RunConfig,
    round: int,
    stage: int = STAGE2,
) -> ClientUpdate:
    """Train the audio student against the frozen late-fusion teacher.

    Loss per batch: ``CE(p_student, y) + kl_weight * KL(temper(p_student) || temper(p_teacher))``.
    """
    if client.audio_only:
        raise ContractViolation(f"client {client.id} is audio-only and cannot run distillation")
    if any(getattr(teacher, b) is None for b in BLOCKS if b != "audio_head"):
        raise InvalidInput("teacher must carry both encoders and the fusion head")
    _require_shard(client)
    topo = cfg.topology
    n_enc = topo.block_sizes()["audio_encoder"]
    teacher_model = teacher.multimodal_model(topo)
    flat = np.concatenate([student_global.audio_encoder, student_global.audio_head])
    rng = derive_rng(cfg.seed, stage, round, client.id)
    losses = []
    for idx in _batches(client.shard, cfg, rng):
        t_logits, _ = nnkit.forward_multimodal(teacher_model, data.audio[idx], data.visual[idx])
        t_probs = nnkit.softmax(t_logits)
        loss, g = nnkit.loss_and_grad_distill(
            AudioModel.from_flat(topo, flat),
            t_probs,
            (data.audio[idx], data.labels[idx]),
            cfg.temperature,
            cfg.kl_weight,
        )
        flat = nnkit.sgd_step(flat, g, cfg.lr)
        losses.append(loss)
    params = ParamSet(audio_encoder=flat[:n_enc], audio_head=flat[n_enc:])
    return ClientUpdate(client.id, params, len(client.shard), float(np.mean(losses)))


# ---------------------------------------------------------------------------
# aggregation


def running_mean(vectors: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted mean accumulated incrementally in the given order.

    The incremental form returns identical inputs bit-exactly and keeps the
    result inside the per-coordinate input range.
    """
    if not vectors:
        raise InvalidInput("nothing to average")
    weights = [1.0] * len(vectors) if weights is None else list(weights)
    m = np.array(vectors[0], dtype=np.float64)
    total = float(weights[0])
    for x, w in zip(vectors[1:], weights[1:]):
        total += w
        m = m + (w / total) * (x - m)
    return m


def _ordered(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise InvalidInput("duplicate client ids in update list")
    return sorted(updates, key=lambda u: u.client_id)


def _block_mean(updates: Sequence[ClientUpdate], block: str, weighting: str) -> np.ndarray:
    vecs = [getattr(u.params, block) for u in updates]
    if any(v is None for v in vecs):
        raise InvalidInput(f"an update lacks the {block} block")
    weights = [float(u.n_samples) for u in updates] if weighting == "size" else None
    return running_mean(vecs, weights)


def aggregate_stage1(
    previous: ParamSet,
    audio_updates: Sequence[ClientUpdate],
    multimodal_updates: Sequence[ClientUpdate],
    weighting: str = "uniform",
) -> ParamSet:
    """Modality-aware FedAvg.

    * audio encoder: mean over every sampled client (audio-only and multimodal)
    * audio head: mean over audio-only clients
    * visual encoder, fusion head: mean over multimodal clients

    A block with no contributors keeps its previous value.
    """
    audio_updates = _ordered(audio_updates)
    multimodal_updates = _ordered(multimodal_updates)
    everyone = _ordered(list(audio_updates) + list(multimodal_updates))
    if not everyone:
        raise InvalidInput("aggregate_stage1 needs at least one update")
    out = {"audio_encoder": _block_mean(everyone, "audio_encoder", weighting)}
    if audio_updates:
        out["audio_head"] = _block_mean(audio_updates, "audio_head", weighting)
    if multimodal_updates:
        for b in VISUAL_BLOCKS:
            out[b] = _block_mean(multimodal_updates, b, weighting)
    return previous.with_blocks(**out)


def aggregate_stage2(
    student_updates: Sequence[ClientUpdate], weighting: str = "uniform", divisor: int | None = None
) -> ParamSet:
    """Average the distilled audio blocks over contributing multimodal clients.

    With ``divisor`` set, the plain sum is divided by it instead (the literal
    reading that normalises by the audio-only draw size).
    """
    updates = _ordered(student_updates)
    if not updates:
        raise InvalidInput("aggregate_stage2 needs at least one update")
    if divisor is not None:
        if divisor < 1:
            raise InvalidInput("divisor must be >= 1")
        out = {}
        for b in AUDIO_BLOCKS:
            acc = np.zeros_like(getattr(updates[0].params, b))
            for u in updates:
                acc = acc + getattr(u.params, b)
            out[b] = acc / divisor
        return ParamSet(**out)
    return ParamSet(**{b: _block_mean(updates, b, weighting) for b in AUDIO_BLOCKS})


# ---------------------------------------------------------------------------
# evaluation


def audio_logits(params: ParamSet, topo: Topology, split: Split) -> np.ndarray:
    return nnkit.forward_audio(params.audio_model(topo), split.audio)[0]


def multimodal_logits(params: ParamSet, topo: Topology, split: Split) -> np.ndarray:
    return nnkit.forward_multimodal(params.multimodal_model(topo), split.audio, split.visual)[0]


def evaluate_round(
    round: int,
    stage: int,
    audio_params: ParamSet,
    cfg: RunConfig,
    test: Split,
    multimodal_params: ParamSet | None = None,
    loss: float = math.nan,
) -> RoundMetrics:
    topo = cfg.topology
    z = audio_logits(audio_params, topo, test)
    mm = None
    if multimodal_params is not None:
        mm = topk_accuracy(multimodal_logits(multimodal_params, topo, test), test.labels, 1)
    return RoundMetrics(
        round=round,
        stage=stage,
        audio_top1=topk_accuracy(z, test.labels, 1),
        audio_topk=topk_accuracy(z, test.labels, cfg.topk),
        multimodal_top1=mm,
        train_loss=loss,
    )


def _mean_loss(updates: Sequence[ClientUpdate]) -> float:
    return float(np.mean([u.loss for u in _ordered(updates)])) if updates else math.nan


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class Federation:
    """Everything a strategy needs: config, data, clients and the audit trail."""

    cfg: RunConfig
    data: MultimodalDataset
    clients: list[ClientSpec]
    audit: Audit = field(default_factory=Audit)

    @property
    def by_id(self) -> dict[int, ClientSpec]:
        return {c.id: c for c in self.clients}

    def ids(self, modality: Modality) -> list[int]:
        return [c.id for c in self.clients if c.modality == modality]


def build_federation(cfg: RunConfig, data: MultimodalDataset, partition, modalities) -> Federation:
    clients = make_clients(partition, modalities)
    if len(clients) != cfg.n_clients:
        raise InvalidInput(f"partition has {len(clients)} shards but n_clients = {cfg.n_clients}")
    n = len(data.train)
    for c in clients:
        if c.shard.size and (c.shard.min() < 0 or c.shard.max() >= n):
            raise InvalidInput(f"client {c.id} references samples outside the training split")
    return Federation(cfg, data, clients)


def run_stage1(fed: Federation, start: ParamSet) -> tuple[ParamSet, list[RoundMetrics]]:
    """Modality-aware FL for ``cfg.rounds`` rounds starting from ``start``."""
    cfg, train, test = fed.cfg, fed.data.train, fed.data.test
    by_id = fed.by_id
    params, history = start, []
    for t in range(cfg.rounds):
        s_a, s_m = sample_round_clients(t, fed.clients, cfg.clients_per_round, cfg.seed, STAGE1)
        sampled = [by_id[i] for i in sorted(s_a + s_m)]
        payloads = {c.id: fed.audit.broadcast(params, c) for c in sampled}

        def work(c: ClientSpec) -> ClientUpdate:
            if c.audio_only:
                return local_train_audio(payloads[c.id], c, train, cfg, t, STAGE1)
            return local_train_multimodal(payloads[c.id], c, train, cfg, t, STAGE1)

        updates = run_tasks(work, sampled, cfg.workers)
        a_up = [u for u in updates if by_id[u.client_id].audio_only]
        m_up = [u for u in updates if not by_id[u.client_id].audio_only]
        params = aggregate_stage1(params, a_up, m_up, cfg.aggregation)
        fed.audit.contributed("audio_encoder", s_a + s_m)
        fed.audit.contributed("audio_head", s_a)
        fed.audit.contributed("visual", s_m)
        history.append(evaluate_round(t, 1, params, cfg, test, params, _mean_loss(updates)))
    return params, history


def run_stage2(
    fed: Federation, teacher: ParamSet, student: ParamSet
) -> tuple[ParamSet, list[RoundMetrics]]:
    """Federated distillation among sampled multimodal clients."""
    cfg, train, test = fed.cfg, fed.data.train, fed.data.test
    by_id = fed.by_id
    student = student.audio_part()
    history = []
    for t in range(cfg.rounds):
        s_m = sample_multimodal_clients(t, fed.clients, cfg.clients_per_round, cfg.seed, STAGE2)
        sampled = [by_id[i] for i in s_m]

        def work(c: ClientSpec) -> ClientUpdate:
            payload = fed.audit.broadcast(student, c)
            return distill_local(payload, teacher, c, train, cfg, t, STAGE2)

        updates = run_tasks(work, sampled, cfg.workers)
        if updates:
            divisor = None
            if cfg.stage2_divisor == "literal":
                s_a, _ = sample_round_clients(t, fed.clients, cfg.clients_per_round, cfg.seed, STAGE2)
                if not s_a:
                    raise InvalidState(f"round {t}: literal stage-2 divisor needs a nonempty audio-only draw")
                divisor = len(s_a)
            student = aggregate_stage2(updates, cfg.aggregation, divisor)
            fed.audit.contributed("student", s_m)
        history.append(evaluate_round(t, 2, student, cfg, test, None, _mean_loss(updates)))
    return student, history


@dataclass
class ModalityMirrorResult:
    audio_model: ParamSet
    teacher: ParamSet
    history: list[RoundMetrics]
    stage1_history: list[RoundMetrics]
    audit: Audit


def run_modality_mirror(
    cfg: RunConfig, data: MultimodalDataset, partition, modalities
) -> ModalityMirrorResult:
    """Stage 1 (modality-aware FL) then stage 2 (distillation from the frozen stage-1 model)."""
    fed = build_federation(cfg, data, partition, modalities)
    start = init_params(cfg.topology, cfg.seed)
    teacher, h1 = run_stage1(fed, start)
    student0 = teacher.audio_part() if cfg.warm_start else start.audio_part()
    student, h2 = run_stage2(fed, teacher, student0)
    return ModalityMirrorResult(student, teacher, h1 + h2, h1, fed.audit)
