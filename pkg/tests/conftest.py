import numpy as np
import pytest

from modmirror.config import RunConfig
from modmirror.datagen import DatasetSpec
from modmirror.nnkit import AudioModel, DenseNet, MultimodalModel, Topology

# encoder 8 -> 16 -> 8, four classes
SMALL = Topology(audio_dim=8, visual_dim=8, num_classes=4, hidden_dim=16, embed_dim=8)


def random_audio(seed, topo=SMALL):
    rng = np.random.default_rng(seed)
    enc = DenseNet.init([topo.audio_dim, topo.hidden_dim, topo.embed_dim], ["relu", "identity"], rng)
    head = DenseNet.init([topo.embed_dim, topo.num_classes], ["identity"], rng)
    # nonzero biases so the bias gradients are exercised
    flat = AudioModel(enc, head).flatten() + 0.05 * rng.standard_normal(enc.size + head.size)
    return AudioModel.from_flat(topo, flat)


def random_multimodal(seed, topo=SMALL):
    rng = np.random.default_rng(seed)
    n = sum(topo.block_sizes()[b] for b in ("audio_encoder", "visual_encoder", "fusion_head"))
    return MultimodalModel.from_flat(topo, 0.4 * rng.standard_normal(n))


def central_diff(f, x, h=1e-5):
    """Independent finite-difference oracle (kept separate from the library helper)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, n, atol=1e-8):
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    small = scale <= atol
    if np.any(small & (diff > atol)):
        return np.inf
    return float(np.max(np.where(small, 0.0, diff / np.where(small, 1.0, scale)), initial=0.0))


def tiny_config(**kw):
    """Small but complete federation used across flcore/baselines/cli tests."""
    base = RunConfig(
        n_clients=10,
        missing_rate=0.3,
        rounds=3,
        clients_per_round=5,
        lr=0.05,
        batch_size=8,
        hidden_dim=16,
        embed_dim=8,
        dataset=DatasetSpec(num_classes=6, audio_dim=6, visual_dim=6, samples_per_class=40, audio_ambiguous_pairs=((0, 1),)),
    )
    return base.replace(**kw)


@pytest.fixture
def small_topo():
    return SMALL


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)
