# tests/test_network.py

from __future__ import annotations

import numpy as np
import pytest

from attention_reid.autograd import Tape
from attention_reid.backbone import BACKBONE_PREFIX, init_backbone_params
from attention_reid.errors import ConfigurationError
from attention_reid.models import AttentionConfig, BackboneConfig, PoolingMode
from attention_reid.network import FC_HEAD_PREFIX, IDENTITY_HEAD, ReidNetwork


def _make_network(pooling: PoolingMode = PoolingMode.ATTENTION, classes: int = 3) -> ReidNetwork:
    return ReidNetwork(
        BackboneConfig.micro(),
        AttentionConfig(hidden_size=3, glimpses=3, steps=(2, 3), pooling=pooling),
        num_classes=classes,
    )


def _images(n: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(size=(n, 8, 8, 3))


@pytest.mark.parametrize("pooling", list(PoolingMode))
def test_every_pooling_mode_embeds_to_unit_rows(pooling):
    network = _make_network(pooling)
    params = network.init_params(np.random.default_rng(0))
    out = network.embed(params, list(_images(5)))
    assert out.shape == (5, network.embedding_dim)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-10)


def test_fc_head_has_no_attention_parameters():
    network = _make_network(PoolingMode.FC_HEAD)
    params = network.init_params(np.random.default_rng(0))
    assert any(k.startswith(FC_HEAD_PREFIX) for k in params)
    assert not any(k.startswith("attn.") for k in params)
    with pytest.raises(ConfigurationError):
        network.attention_maps(params, _images(1)[0])


def test_identity_head_shape():
    network = _make_network(classes=4)
    params = network.init_params(np.random.default_rng(0))
    assert params[IDENTITY_HEAD].shape == (6, 4)


def test_pretrained_backbone_is_taken_as_given():
    network = _make_network()
    backbone = init_backbone_params(network.backbone, np.random.default_rng(9))
    params = network.init_params(np.random.default_rng(0), backbone_params=backbone)
    for name, value in backbone.items():
        assert np.array_equal(params[name], value)


def test_check_params_reports_missing_and_misshapen():
    network = _make_network()
    params = network.init_params(np.random.default_rng(0))
    broken = dict(params)
    del broken[IDENTITY_HEAD]
    with pytest.raises(ConfigurationError, match="missing"):
        network.check_params(broken)
    broken = dict(params)
    broken[IDENTITY_HEAD] = np.zeros((6, 9))
    with pytest.raises(ConfigurationError, match="shape"):
        network.check_params(broken)


def test_embedding_of_an_image_does_not_depend_on_its_batch():
    network = _make_network()
    params = network.init_params(np.random.default_rng(1))
    images = list(_images(4, seed=2))
    together = network.embed(params, images)
    alone = np.concatenate([network.embed(params, [im]) for im in images])
    assert np.allclose(together, alone, atol=1e-12)


def test_attention_maps_are_t_by_k_by_k_distributions():
    network = _make_network()
    params = network.init_params(np.random.default_rng(1))
    maps = network.attention_maps(params, _images(1)[0])
    assert maps.shape == (3, 2, 2)
    assert np.allclose(maps.sum(axis=(1, 2)), 1.0, atol=1e-10)


def test_dead_model_still_gives_uniform_attention_maps():
    network = _make_network()
    params = {k: np.zeros_like(v) for k, v in network.init_params(np.random.default_rng(0)).items()}
    maps = network.attention_maps(params, np.full((8, 8, 3), 0.5))
    assert maps.shape == (3, 2, 2)
    assert np.allclose(maps, 1.0 / 4, atol=1e-12)


def test_attention_maps_match_the_forward_trace():
    network = _make_network()
    params = network.init_params(np.random.default_rng(4))
    image = _images(1, seed=5)[0]
    tape = Tape()
    out = network.forward(tape.constant(image[None]), tape.bind(params, trainable=False))
    expected = np.stack([m.grid()[0] for m in out.trace.attention_maps])
    assert np.array_equal(network.attention_maps(params, image), expected)


def test_frozen_backbone_binds_without_gradients():
    network = _make_network()
    params = network.init_params(np.random.default_rng(0))
    tape = Tape()
    bound = tape.bind(params, network.trainable(freeze_backbone=True))
    assert all(not t.requires_grad for k, t in bound.items() if k.startswith(BACKBONE_PREFIX))
    assert all(t.requires_grad for k, t in bound.items() if not k.startswith(BACKBONE_PREFIX))


def test_description_round_trips():
    network = _make_network(PoolingMode.MAX_POOL, classes=7)
    again = ReidNetwork.from_description(network.describe())
    assert again.describe() == network.describe()
    assert again.pooling is PoolingMode.MAX_POOL
