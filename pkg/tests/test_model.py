import numpy as np
import pytest

from mainet import config as C
from mainet.model import MAINet, ModelConfig, describe
from mainet.tensor import ConfigurationError, no_grad

ROWS = [
    dict(modalities=(2,), interaction="none", decision="single"),
    dict(modalities=(0, 1), interaction="dafn2", decision="er"),
    dict(interaction="none", decision="concat"),
    dict(interaction="arpm", primaries=(0,), decision="concat"),
    dict(interaction="none", decision="er"),
    dict(interaction="arpm", primaries=(0, 1, 2), decision="er"),
    dict(interaction="arpm", primaries=(0, 1, 2), decision="er", alpha="w"),
]


@pytest.fixture(scope="module")
def cfg():
    return C.resolve("smoke")


def batch(rng, n=3, size=16):
    return [rng.normal(size=(n, c, size, size)) for c in (3, 2, 1)]


class TestForward:
    @pytest.mark.parametrize("kw", ROWS, ids=lambda kw: describe(ModelConfig(**kw)))
    def test_joint_is_distribution(self, cfg, rng, kw):
        model = MAINet(C.build_model(cfg, **kw), np.random.default_rng(0))
        with no_grad():
            out = model(batch(rng))
        assert out.joint.shape == (3, 3)
        np.testing.assert_allclose(out.joint.data.sum(-1), 1.0, atol=1e-12)
        assert (out.joint.data >= 0).all()
        if kw["decision"] == "er":
            assert out.stacked().shape == (3, len(kw.get("modalities", (0, 1, 2))), 3)

    def test_single_joint_is_head(self, cfg, rng):
        model = MAINet(C.build_model(cfg, **ROWS[0]), np.random.default_rng(0))
        with no_grad():
            out = model(batch(rng))
        np.testing.assert_array_equal(out.joint.data, out.probs[2].data)

    def test_unused_modality_ignored(self, cfg, rng):
        model = MAINet(C.build_model(cfg, **ROWS[1]), np.random.default_rng(0))
        maps = batch(rng)
        with no_grad():
            a = model(maps).joint.data
            maps[2] = maps[2] * 100.0
            b = model(maps).joint.data
        np.testing.assert_array_equal(a, b)

    def test_seeded_init_identical(self, cfg):
        a = MAINet(C.build_model(cfg), np.random.default_rng(5)).state_dict()
        b = MAINet(C.build_model(cfg), np.random.default_rng(5)).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestModelConfig:
    @pytest.mark.parametrize("kw", [
        dict(modalities=()), dict(modalities=(0, 3)), dict(interaction="x"), dict(decision="x"),
        dict(modalities=(0, 1), interaction="arpm"), dict(modalities=(0,), interaction="dafn2"),
        dict(modalities=(0,), decision="er", interaction="none"), dict(primaries=()),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigurationError):
            ModelConfig(**kw)

    def test_describe(self):
        assert describe(ModelConfig(primaries=(1,), decision="concat")) == "image+audio+wave arpm[audio] concat"
