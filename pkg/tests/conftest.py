import numpy as np
import pytest

from waveicl.dataset import SynthSpec, synthesize_dataset
from waveicl.embeddings import EmbeddingStore
from waveicl.render import RenderConfig


@pytest.fixture(scope="session")
def small_manifest():
    """4 subjects x (6 + 6) trials, tiny trials so rendering stays cheap."""
    spec = SynthSpec(subjects=4, trials_per_class=6, channels=3,
                     sampling_rate=50.0, trial_duration_s=1.0, warmup_nontask=2)
    return synthesize_dataset(spec, seed=11)


@pytest.fixture
def small_render_config():
    return RenderConfig(width_px=120, height_px=160, alpha=10.0, delta=32.0,
                        stroke_px=2, draw_labels=False)


@pytest.fixture
def store(tmp_path):
    return EmbeddingStore(tmp_path / "store")


def make_store_with_vectors(root, vectors: dict[str, np.ndarray],
                            provider_id="test", model_id="test-model"):
    """Store fixture helper: vectors keyed by fake image digest."""
    s = EmbeddingStore(root)
    dim = len(next(iter(vectors.values())))
    s.set_meta(provider_id, model_id, dim)
    for digest, vec in vectors.items():
        s.put(digest, np.asarray(vec, dtype=np.float32))
    return s
