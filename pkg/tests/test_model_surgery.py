import copy

import pytest
import torch

from backbone import BackboneConfig, build_backbone, load_backbone, save_backbone
from errors import ConfigurationError, DimensionError, GatingError, StateError
import model_surgery
from lora_adapters import TwinAdaptedLinear, count_trainable
from model_surgery import PRESETS, InjectionConfig, inject, site_of, strip


def _fill_adapters(model, seed=1):
    generator = torch.Generator()
    generator.manual_seed(seed)
    with torch.no_grad():
        for p in model.adapter_parameters():
            p.copy_(torch.randn(p.shape, generator=generator) * 0.1)


def test_site_of_layer_ids():
    assert site_of('blocks.0.attn.qkv') == 'attention_qkv'
    assert site_of('blocks.1.attn.proj') == 'attention_proj'
    assert site_of('blocks.0.mlp.fc2') == 'mlp'
    assert site_of('reductions.0.reduce') == 'patch_reduction'
    assert site_of('head') == 'feature_head'
    assert site_of('patch_embed') is None


def test_backbone_is_seeded(tiny_config, tiny_images):
    a = build_backbone(tiny_config, seed=3)
    b = build_backbone(tiny_config, seed=3)
    assert torch.equal(a(tiny_images), b(tiny_images))
    assert a(tiny_images).shape == (4, tiny_config.embedding_dim)


def test_backbone_rejects_wrong_image_shape(tiny_backbone):
    with pytest.raises(DimensionError):
        tiny_backbone(torch.rand(2, 1, 16, 16))


def test_backbone_config_validation():
    with pytest.raises(ConfigurationError):
        BackboneConfig(image_size=30, patch_size=8)
    with pytest.raises(ConfigurationError):
        BackboneConfig(attention_dim=10, num_heads=3)


def test_backbone_file_round_trip(tmp_path, tiny_backbone, tiny_images):
    path = save_backbone(tmp_path / 'backbone.pt', tiny_backbone)
    restored = load_backbone(path)
    assert restored.config == tiny_backbone.config
    assert torch.equal(restored(tiny_images), tiny_backbone(tiny_images))


def test_injection_at_init_is_transparent(tiny_config):
    pristine = build_backbone(tiny_config, seed=0).eval()
    model = inject(build_backbone(tiny_config, seed=0),
                   InjectionConfig.from_preset('attention-mlp-proj-reduction-feature'), seed=0).eval()
    generator = torch.Generator()
    generator.manual_seed(0)
    with torch.no_grad():
        for _ in range(100):
            images = torch.rand(3, 1, 32, 32, generator=generator)
            alpha = torch.rand(3, generator=generator)
            reference = pristine(images)
            out = model(images, alpha)
            assert torch.allclose(out, reference, rtol=1e-6, atol=1e-6)


def test_inject_wraps_only_configured_sites(tiny_backbone):
    model = inject(tiny_backbone, InjectionConfig.from_preset('paper-best'), seed=0)
    assert model.layer_ids == ['blocks.0.attn.qkv', 'blocks.1.attn.qkv', 'head']
    for layer_id, layer in model.adapter_layers().items():
        assert isinstance(layer, TwinAdaptedLinear)
        assert layer.is_twin
    assert not isinstance(tiny_backbone.blocks[0].mlp.fc1, TwinAdaptedLinear)


def test_only_adapters_are_trainable(tiny_backbone):
    model = inject(tiny_backbone, InjectionConfig.from_preset('paper-best', rank=4), seed=0)
    adapter_ids = {id(p) for p in model.adapter_parameters()}
    for name, p in model.named_parameters():
        assert p.requires_grad == (id(p) in adapter_ids), name
    expected = sum(2 * 4 * (m + n) for m, n in model.layer_shapes.values())
    _, trainable = count_trainable(model)
    assert trainable == expected
    walked = sum(p.numel() for p in model.parameters() if p.requires_grad)
    assert trainable == walked


def test_trainable_count_is_linear_in_rank(tiny_config):
    counts = []
    for rank in (2, 4, 8):
        model = inject(build_backbone(tiny_config), InjectionConfig.from_preset('attention-feature', rank=rank))
        counts.append(count_trainable(model)[1])
    assert counts[1] == 2 * counts[0]
    assert counts[2] == 4 * counts[0]


def test_presets_are_nested_in_count(tiny_config):
    small = count_trainable(inject(build_backbone(tiny_config), InjectionConfig.from_preset('attention')))[1]
    large = count_trainable(inject(build_backbone(tiny_config), InjectionConfig.from_preset('attention-feature')))[1]
    assert small < large
    assert PRESETS['attention'] < PRESETS['attention-feature']


def test_single_mode_shares_adapter_hi_with_twin(tiny_config):
    twin = inject(build_backbone(tiny_config), InjectionConfig(mode='twin'), seed=5)
    single = inject(build_backbone(tiny_config), InjectionConfig(mode='single'), seed=5)
    for layer_id in twin.layer_ids:
        t, s = twin.adapter_layers()[layer_id], single.adapter_layers()[layer_id]
        assert s.adapter_lo is None
        assert torch.equal(t.adapter_hi.down_weights, s.adapter_hi.down_weights)


def test_twin_model_needs_alpha_or_gate(tiny_backbone, tiny_images):
    model = inject(tiny_backbone, InjectionConfig(), seed=0)
    with pytest.raises(GatingError):
        model(tiny_images)


def test_twin_model_uses_gate_alpha(tiny_config, tiny_gate, tiny_images):
    model = inject(build_backbone(tiny_config), InjectionConfig(), gate=tiny_gate, seed=0).eval()
    _fill_adapters(model)
    alpha = tiny_gate.alpha_for_images(tiny_images)
    assert torch.equal(model(tiny_images), model(tiny_images, alpha))


def test_every_adapted_layer_receives_the_gate_alpha(tiny_config, tiny_gate, tiny_images):
    model = inject(build_backbone(tiny_config), InjectionConfig.from_preset('attention-mlp-proj-reduction-feature'),
                   gate=tiny_gate, seed=0).eval()
    expected = model.compute_alpha(tiny_images)
    seen = {}

    def record(layer_id):
        def hook(module, args):
            seen[layer_id] = args[1]
        return hook

    handles = [layer.register_forward_pre_hook(record(layer_id))
               for layer_id, layer in model.adapter_layers().items()]
    model(tiny_images)
    for handle in handles:
        handle.remove()

    assert set(seen) == set(model.layer_ids)
    for layer_id, alpha in seen.items():
        assert alpha.shape == (tiny_images.shape[0],), layer_id
        assert torch.equal(alpha.to(expected.dtype), expected), layer_id


def test_double_injection_is_rejected(tiny_backbone):
    inject(tiny_backbone, InjectionConfig(), seed=0)
    with pytest.raises(ConfigurationError):
        inject(tiny_backbone, InjectionConfig(), seed=0)


def test_missing_site_is_rejected_and_backbone_untouched(tiny_config):
    config = BackboneConfig(**{**tiny_config.to_dict(), 'patch_reduction': False})
    backbone = build_backbone(config)
    with pytest.raises(ConfigurationError):
        inject(backbone, InjectionConfig.from_preset('attention-mlp-proj-reduction-feature'))
    assert all(p.requires_grad for p in backbone.parameters())
    assert not any(isinstance(m, TwinAdaptedLinear) for m in backbone.modules())


def test_oversized_rank_is_rejected_before_any_layer_is_wrapped():
    backbone = build_backbone(BackboneConfig(), seed=0)
    pristine = copy.deepcopy(backbone.state_dict())
    with pytest.raises(ConfigurationError, match='blocks.0.attn.proj'):
        inject(backbone, InjectionConfig.from_preset('attention-mlp-proj-feature', rank=40))
    assert not any(isinstance(m, TwinAdaptedLinear) for m in backbone.modules())
    assert all(p.requires_grad for p in backbone.parameters())
    assert all(torch.equal(pristine[k], v) for k, v in backbone.state_dict().items())
    model = inject(backbone, InjectionConfig.from_preset('paper-best', rank=4), seed=0)
    assert model.layer_ids


def test_failure_while_wrapping_restores_backbone(tiny_backbone, monkeypatch):
    calls = []
    real_init = model_surgery.init_adapter

    def failing_init(*args, **kwargs):
        calls.append(1)
        if len(calls) > 2:
            raise RuntimeError("allocation failed")
        return real_init(*args, **kwargs)

    monkeypatch.setattr(model_surgery, 'init_adapter', failing_init)
    names = [name for name, _ in tiny_backbone.named_parameters()]
    with pytest.raises(RuntimeError):
        inject(tiny_backbone, InjectionConfig.from_preset('paper-best', rank=2))
    assert not any(isinstance(m, TwinAdaptedLinear) for m in tiny_backbone.modules())
    assert [name for name, _ in tiny_backbone.named_parameters()] == names
    assert all(p.requires_grad for p in tiny_backbone.parameters())

    monkeypatch.setattr(model_surgery, 'init_adapter', real_init)
    inject(tiny_backbone, InjectionConfig.from_preset('paper-best', rank=2))


def test_injection_config_validation():
    with pytest.raises(ConfigurationError):
        InjectionConfig(sites=frozenset({'attention_qkv', 'conv'}))
    with pytest.raises(ConfigurationError):
        InjectionConfig(sites=frozenset(), mode='twin')
    with pytest.raises(ConfigurationError):
        InjectionConfig.from_preset('everything')
    config = InjectionConfig.from_preset('attention-mlp-feature', rank=4, mode='single')
    assert InjectionConfig.from_dict(config.to_dict()) == config


def test_strip_restores_pristine_outputs(tiny_config, tiny_images):
    pristine = build_backbone(tiny_config, seed=0).eval()
    backbone = copy.deepcopy(pristine)
    model = inject(backbone, InjectionConfig.from_preset('attention-mlp-feature'), seed=0)
    _fill_adapters(model)
    alpha = torch.full((4,), 0.3)
    assert not torch.allclose(model.eval()(tiny_images, alpha), pristine(tiny_images))
    restored = strip(model)
    assert torch.equal(restored(tiny_images), pristine(tiny_images))
    assert all(p.requires_grad for p in restored.parameters())
    with pytest.raises(StateError):
        model(tiny_images, alpha)
    with pytest.raises(StateError):
        strip(model)
    # stripped backbones can be injected again
    inject(restored, InjectionConfig(), seed=0)


def test_injection_digest_tracks_config(tiny_config):
    a = inject(build_backbone(tiny_config), InjectionConfig(rank=4))
    b = inject(build_backbone(tiny_config), InjectionConfig(rank=4))
    c = inject(build_backbone(tiny_config), InjectionConfig(rank=2))
    assert a.injection_digest == b.injection_digest
    assert a.injection_digest != c.injection_digest
