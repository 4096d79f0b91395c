"""Synthetic audio-visual datasets and non-IID client partitioning."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .nnkit import InvalidInput

FORMAT_VERSION = 1
CENTER_RADIUS = 5.0
TEST_FRACTION = 0.2


def n_test_samples(samples_per_class: int) -> int:
    return max(1, int(round(TEST_FRACTION * samples_per_class)))


class Modality(str, Enum):
    AUDIO_ONLY = "audio_only"
    MULTIMODAL = "multimodal"


@dataclass(frozen=True)
class DatasetSpec:
    """Class-conditional Gaussian clusters with engineered audio confusions.

    Classes listed together in ``audio_ambiguous_pairs`` share one audio
    center but keep distinct visual centers.
    """

    num_classes: int = 10
    audio_dim: int = 16
    visual_dim: int = 16
    samples_per_class: int = 200
    audio_ambiguous_pairs: tuple[tuple[int, int], ...] = ((0, 1), (2, 3))
    audio_noise_sigma: float = 1.0
    visual_noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "audio_ambiguous_pairs", tuple(tuple(int(i) for i in p) for p in self.audio_ambiguous_pairs)
        )

    def validate(self) -> None:
        if self.num_classes < 2:
            raise InvalidInput("num_classes must be >= 2")
        if self.audio_dim < 2 or self.visual_dim < 2:
            raise InvalidInput("audio_dim and visual_dim must be >= 2")
        if self.samples_per_class < 2:
            raise InvalidInput("samples_per_class must be >= 2")
        if not (self.audio_noise_sigma > 0 and self.visual_noise_sigma > 0):
            raise InvalidInput("noise sigmas must be positive")
        seen: set[int] = set()
        for pair in self.audio_ambiguous_pairs:
            if len(pair) != 2 or pair[0] == pair[1]:
                raise InvalidInput(f"ambiguous pair {pair} must name two different classes")
            for c in pair:
                if not 0 <= c < self.num_classes:
                    raise InvalidInput(f"ambiguous pair {pair} has a class index out of range")
                if c in seen:
                    raise InvalidInput(f"class {c} appears in more than one ambiguous pair")
                seen.add(c)


@dataclass(frozen=True)
class Split:
    audio: np.ndarray  # (n, audio_dim)
    visual: np.ndarray  # (n, visual_dim)
    labels: np.ndarray  # (n,)

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class MultimodalDataset:
    spec: DatasetSpec
    train: Split
    test: Split
    audio_centers: np.ndarray = field(repr=False)
    visual_centers: np.ndarray = field(repr=False)

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps_dataset(self).encode()).hexdigest()


def _sphere(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.normal(size=(n, dim))
    return CENTER_RADIUS * v / np.linalg.norm(v, axis=1, keepdims=True)


def _pairwise(c: np.ndarray) -> np.ndarray:
    return np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)


def _place_visual_centers(raw: np.ndarray, pairs, num_classes: int) -> np.ndarray:
    # Ambiguous pairs greedily take the most distant remaining centers, so
    # their visual separation is never the bottleneck.
    dist = _pairwise(raw)
    free = list(range(num_classes))
    order = np.empty(num_classes, dtype=np.int64)
    paired = {c for p in pairs for c in p}
    for a, b in pairs:
        sub = dist[np.ix_(free, free)]
        i, j = np.unravel_index(np.argmax(sub), sub.shape)
        ci, cj = free[i], free[j]
        order[a], order[b] = ci, cj
        free = [c for c in free if c not in (ci, cj)]
    for cls, c in zip([k for k in range(num_classes) if k not in paired], free):
        order[cls] = c
    return raw[order]


def _ambiguity_holds(visual: np.ndarray, pairs) -> bool:
    if not pairs:
        return True
    dist = _pairwise(visual)
    amb = {frozenset(p) for p in pairs}
    n = len(visual)
    others = [dist[i, j] for i in range(n) for j in range(i + 1, n) if frozenset((i, j)) not in amb]
    if not others:
        return True
    floor = min(others)
    return all(dist[a, b] >= floor for a, b in pairs)


def generate_dataset(spec: DatasetSpec) -> MultimodalDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = spec.num_classes
    audio_c = _sphere(rng, k, spec.audio_dim)
    for a, b in spec.audio_ambiguous_pairs:
        mid = 0.5 * (audio_c[a] + audio_c[b])
        audio_c[a] = mid
        audio_c[b] = mid
    for _ in range(100):
        visual_c = _place_visual_centers(_sphere(rng, k, spec.visual_dim), spec.audio_ambiguous_pairs, k)
        if _ambiguity_holds(visual_c, spec.audio_ambiguous_pairs):
            break
    else:
        raise InvalidInput("could not place visual centers with the ambiguous pairs well separated")

    n_test = n_test_samples(spec.samples_per_class)
    n = spec.samples_per_class
    tr, te = [], []
    for c in range(k):
        xa = audio_c[c] + spec.audio_noise_sigma * rng.normal(size=(n, spec.audio_dim))
        xv = visual_c[c] + spec.visual_noise_sigma * rng.normal(size=(n, spec.visual_dim))
        y = np.full(n, c, dtype=np.int64)
        tr.append((xa[n_test:], xv[n_test:], y[n_test:]))
        te.append((xa[:n_test], xv[:n_test], y[:n_test]))

    def stack(parts) -> Split:
        return Split(*(np.concatenate(col) for col in zip(*parts)))

    return MultimodalDataset(spec, stack(tr), stack(te), audio_c, visual_c)


# ---------------------------------------------------------------------------
# partitioning


def dirichlet_partition(labels, n_clients: int, alpha: float, seed: int) -> list[list[int]]:
    """Split sample indices across clients with per-class Dirichlet proportions.

    Empty shards are repaired by moving one sample from the current largest
    shard (lowest id on ties), so every client ends up with data.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InvalidInput("cannot partition an empty label list")
    if n_clients < 1:
        raise InvalidInput("n_clients must be >= 1")
    if not alpha > 0:
        raise InvalidInput("alpha must be positive")
    if labels.size < n_clients:
        raise InvalidInput(f"{labels.size} samples cannot fill {n_clients} nonempty shards")
    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        props = rng.dirichlet(np.full(n_clients, float(alpha)))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for shard, part in zip(shards, np.split(idx, cuts)):
            shard.extend(int(i) for i in part)
    for i in range(n_clients):
        if not shards[i]:
            donor = max(range(n_clients), key=lambda j: (len(shards[j]), -j))
            shards[i].append(shards[donor].pop())
    return [sorted(s) for s in shards]


def audio_only_count(n_clients: int, r: float) -> int:
    """Nearest integer to ``r * n_clients``; exact halves go to audio-only."""
    return int(math.floor(round(r * n_clients, 9) + 0.5))


def assign_modalities(n_clients: int, r: float, seed: int) -> list[Modality]:
    if not 0.0 <= r <= 1.0:
        raise InvalidInput(f"missing rate must lie in [0, 1], got {r}")
    n_audio = audio_only_count(n_clients, r)
    perm = np.random.default_rng(seed).permutation(n_clients)
    out = [Modality.MULTIMODAL] * n_clients
    for i in perm[:n_audio]:
        out[int(i)] = Modality.AUDIO_ONLY
    return out


# ---------------------------------------------------------------------------
# serialization
#
# NDJSON: line 1 is a header object, then one record per sample:
#   {"split": "train"|"test", "label": int, "audio": [...], "visual": [...]}
# Floats are written with repr precision so a load reproduces the arrays
# bit-for-bit.


def _header(ds: MultimodalDataset) -> dict:
    spec = asdict(ds.spec)
    spec["audio_ambiguous_pairs"] = [list(p) for p in ds.spec.audio_ambiguous_pairs]
    return {
        "format": "modmirror-dataset",
        "version": FORMAT_VERSION,
        "num_classes": ds.spec.num_classes,
        "audio_dim": ds.spec.audio_dim,
        "visual_dim": ds.spec.visual_dim,
        "train_size": len(ds.train),
        "test_size": len(ds.test),
        "spec": spec,
        "audio_centers": ds.audio_centers.tolist(),
        "visual_centers": ds.visual_centers.tolist(),
    }


def dumps_dataset(ds: MultimodalDataset) -> str:
    lines = [json.dumps(_header(ds), sort_keys=True)]
    for name, split in (("train", ds.train), ("test", ds.test)):
        for xa, xv, y in zip(split.audio, split.visual, split.labels):
            rec = {"split": name, "label": int(y), "audio": xa.tolist(), "visual": xv.tolist()}
            lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def save_dataset(ds: MultimodalDataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds))


def load_dataset(path) -> MultimodalDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "modmirror-dataset":
            raise InvalidInput(f"{path} is not a dataset file")
        rows: dict[str, list] = {"train": [], "test": []}
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rows[rec["split"]].append(rec)

    def split(recs) -> Split:
        return Split(
            np.array([r["audio"] for r in recs], dtype=np.float64).reshape(len(recs), header["audio_dim"]),
            np.array([r["visual"] for r in recs], dtype=np.float64).reshape(len(recs), header["visual_dim"]),
            np.array([r["label"] for r in recs], dtype=np.int64),
        )

    spec = header["spec"]
    spec["audio_ambiguous_pairs"] = tuple(tuple(p) for p in spec["audio_ambiguous_pairs"])
    return MultimodalDataset(
        DatasetSpec(**spec),
        split(rows["train"]),
        split(rows["test"]),
        np.array(header["audio_centers"]),
        np.array(header["visual_centers"]),
    )


def export_csv(ds: MultimodalDataset, path) -> None:
    a, v = ds.spec.audio_dim, ds.spec.visual_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "label"] + [f"a{i}" for i in range(a)] + [f"v{i}" for i in range(v)])
        for name, split in (("train", ds.train), ("test", ds.test)):
            for xa, xv, y in zip(split.audio, split.visual, split.labels):
                w.writerow([name, int(y)] + [repr(float(x)) for x in xa] + [repr(float(x)) for x in xv])
