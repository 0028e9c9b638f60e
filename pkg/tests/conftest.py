import numpy as np
import pytest

from splatface.features import load_feature_sequence
from splatface.oracle import OracleConfig, generate_dataset


def small_oracle_config(**overrides):
    base = dict(seed=11, n_splats=150, image_size=48, frames_per_clip=6,
                n_mouth=20, n_eye=8)
    base.update(overrides)
    return OracleConfig(**base)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """One small generated dataset shared by the module tests."""
    out = tmp_path_factory.mktemp("oracle_small")
    cfg = small_oracle_config()
    manifests = generate_dataset(cfg, str(out))
    return {"dir": str(out), "cfg": cfg, "manifests": manifests}


@pytest.fixture(scope="session")
def neutral_sequence(small_dataset):
    return load_feature_sequence(small_dataset["manifests"]["neutral"])


@pytest.fixture(scope="session")
def tiny_pipeline(tmp_path_factory):
    """Tiny CLI-driven gen-data + 3-stage training run shared by CLI/service tests."""
    from splatface.cli import main

    base = tmp_path_factory.mktemp("pipeline")
    data = str(base / "data")
    runs = str(base / "runs")
    assert main(["gen-data", "--out", data, "--splats", "120", "--size", "40",
                 "--frames", "6", "--seed", "3"]) == 0
    assert main(["train", "--stage", "neutral", "--data", data, "--out", runs,
                 "--iterations", "5", "--heldout-every", "3"]) == 0
    assert main(["train", "--stage", "emotion", "--data", data, "--out", runs,
                 "--iterations", "4", "--heldout-every", "3",
                 "--init-from", f"{runs}/neutral.esgc"]) == 0
    assert main(["train", "--stage", "stylization", "--data", data, "--out", runs,
                 "--iterations", "4", "--heldout-every", "3",
                 "--init-from", f"{runs}/emotion.esgc"]) == 0
    return {
        "base": str(base), "data": data, "runs": runs,
        "manifest": f"{data}/manifest_neutral.json",
        "neutral": f"{runs}/neutral.esgc",
        "emotion": f"{runs}/emotion.esgc",
        "stylization": f"{runs}/stylization.esgc",
    }


def random_splat_arrays(rng, n, k=1, spread=0.4, depth=2.0):
    """Random but well-conditioned splat parameter arrays for render tests."""
    mu = rng.uniform(-spread, spread, (n, 3))
    mu[:, 2] += depth
    s = rng.uniform(np.log(0.03), np.log(0.12), (n, 3))
    q = rng.normal(0.0, 1.0, (n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    m = 3 * (k + 1) ** 2
    sh = rng.normal(0.0, 0.3, (n, m))
    alpha_raw = rng.normal(0.5, 1.0, n)
    return mu, s, q, sh, alpha_raw
