import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denomae import rng as drng
from denomae.model import (
    MODALITIES,
    BatchPlan,
    ClassifierConfig,
    ConfigError,
    DenoMAE,
    DenoMAEConfig,
    MaskPlan,
    batch_plans,
    denoise,
    masked_count,
    patchify,
    pretrain_loss,
    sample_mask,
    unpatchify,
)
from denomae.numerics import Tape, Tensor, adamw_step, gradient_check, no_grad, ops


def tiny(**kw) -> DenoMAEConfig:
    base = dict(image_side=16, patch_size=8, d_model=16, heads=2, encoder_layers=1, decoder_layers=1,
                classifier=ClassifierConfig(hidden=8, n_classes=3))
    base.update(kw)
    return DenoMAEConfig.desk(**base)


def random_images(cfg, b, seed=0):
    return np.random.default_rng(seed).random((b, cfg.channels, cfg.image_side, cfg.image_side)).astype(np.float32)


def plans_for(cfg, b, seed=0):
    return batch_plans(cfg, b, drng.stream(seed, "test-mask"))


# ------------------------------------------------------------------ config


def test_presets():
    full, desk = DenoMAEConfig.full(), DenoMAEConfig.desk()
    assert (full.patch_size, full.d_model, full.encoder_layers, full.decoder_layers, full.heads) == (16, 768, 12, 4, 12)
    assert (desk.image_side, desk.patch_size, desk.d_model, desk.encoder_layers, desk.decoder_layers, desk.heads) == \
        (32, 8, 64, 2, 1, 4)
    assert full.mask_ratio == desk.mask_ratio == 0.75
    assert full.classifier == ClassifierConfig(hidden=512, dropout=0.5, n_classes=10)
    assert desk.modality_weights == (1.0,) * 5


@pytest.mark.parametrize("kw", [{"image_side": 30}, {"d_model": 66}, {"mask_ratio": 1.0}, {"mask_ratio": 0.0},
                                {"modality_weights": (1, 1, 1, 1, 0)}, {"modalities": ("noise", "noise")},
                                {"modalities": ("rgb",)}])
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        DenoMAEConfig.desk(**kw)


def test_config_dict_round_trip():
    cfg = tiny(modalities=("clean_constellation", "noise"), shared_mask=True)
    assert DenoMAEConfig.from_dict(cfg.to_dict()) == cfg


# Counted from the layer list: embeddings, 2+1 blocks, shared projections,
# output projections and the 64->512->10 head.
DESK_PARAMETERS = 339_402
DESK_TENSORS = 90


def test_desk_parameter_count():
    model = DenoMAE(DenoMAEConfig.desk())
    assert len(model.params) == DESK_TENSORS
    assert sum(p.size for p in model.params.values()) == DESK_PARAMETERS
    assert all(p.data.dtype == np.float32 for p in model.params.values())


def test_init_is_seeded():
    a, b, c = DenoMAE(tiny(), seed=1), DenoMAE(tiny(), seed=1), DenoMAE(tiny(), seed=2)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    assert a.params["mask_token"].data.tobytes() != c.params["mask_token"].data.tobytes()
    w = a.params["embed.noise.proj.w"].data
    assert np.abs(w).max() <= 0.04 + 1e-7  # truncated at two standard deviations
    assert not a.params["enc.0.attn.qkv.b"].data.any()
    assert np.all(a.params["enc.0.ln1.g"].data == 1)


# ----------------------------------------------------------------- patches


def test_patch_counts():
    assert patchify(np.zeros((3, 224, 224)), 16).shape == (196, 768)
    assert patchify(np.zeros((3, 32, 32)), 8).shape == (16, 192)


def test_patch_layout_against_loops():
    x = np.arange(3 * 16 * 16, dtype=np.float32).reshape(3, 16, 16)
    p = patchify(x, 8)
    for n in range(4):
        r, c = divmod(n, 2)  # row-major over the patch grid
        np.testing.assert_array_equal(p[n], x[:, 8 * r:8 * r + 8, 8 * c:8 * c + 8].reshape(-1))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([(1, 8), (2, 4), (3, 8), (4, 2)]), st.integers(1, 3), st.integers(0, 1000))
def test_unpatchify_inverts_patchify(grid_p, batch, seed):
    g, p = grid_p
    x = np.random.default_rng(seed).normal(size=(batch, 3, g * p, g * p)).astype(np.float32)
    assert unpatchify(patchify(x, p), p).tobytes() == x.tobytes()
    assert unpatchify(patchify(x[0], p), p).tobytes() == x[0].tobytes()


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((3, 30, 30)), 8)


# ----------------------------------------------------------------- masking


def test_mask_counts():
    plan = sample_mask(196, 0.75, seed=0)
    assert plan.masked.size == 147 and plan.visible.size == 49
    plan = sample_mask(16, 0.75, seed=0)
    assert plan.masked.size == 12 and plan.visible.size == 4


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 400), st.floats(0.01, 0.99), st.integers(0, 2**32))
def test_mask_plan_partitions_indices(n, ratio, seed):
    plan = sample_mask(n, ratio, seed)
    assert plan.masked.size == masked_count(n, ratio) == math.floor(ratio * n + 1e-9)
    both = np.concatenate([plan.visible, plan.masked])
    assert sorted(both.tolist()) == list(range(n))
    assert np.all(np.diff(plan.visible) > 0) and np.all(np.diff(plan.masked) > 0)


def test_mask_is_seeded_and_uniform():
    a, b = sample_mask(16, 0.75, 5), sample_mask(16, 0.75, 5)
    assert a.masked.tobytes() == b.masked.tobytes()
    gen = np.random.default_rng(0)
    counts = np.zeros(16)
    for _ in range(10_000):
        counts[sample_mask(16, 0.75, gen).masked] += 1
    assert np.all(np.abs(counts / 10_000 - 0.75) < 0.02)


def test_mask_errors():
    with pytest.raises(ValueError):
        sample_mask(1, 0.5, 0)
    with pytest.raises(ValueError):
        sample_mask(16, 1.0, 0)


def test_independent_and_shared_masks():
    cfg = tiny(image_side=32)
    plans = plans_for(cfg, 4)
    assert len(plans) == 5 and all(p.n_masked == 12 for p in plans)
    assert any(plans[0].masked.tobytes() != p.masked.tobytes() for p in plans[1:])
    shared = plans_for(dataclasses.replace(cfg, shared_mask=True), 4)
    assert all(p is shared[0] for p in shared)


# ------------------------------------------------------------------- embed


def test_embedding_of_zero_patches_is_zero():
    model = DenoMAE(tiny())
    model.params["embed.noise.pos"].data[:] = 0
    model.params["embed.noise.modality"].data[:] = 0
    out = model.embed_modality(np.zeros((4, 192), np.float32), model.modality_index("noise"))
    assert out.shape == (4, 16) and not out.data.any()


def test_modality_ids_differ_by_modality_embedding():
    model = DenoMAE(tiny())
    a, b = "noisy_signal", "clean_signal"
    model.params[f"embed.{b}.proj.w"].data = model.params[f"embed.{a}.proj.w"].data.copy()
    model.params[f"embed.{b}.pos"].data = model.params[f"embed.{a}.pos"].data.copy()
    x = patchify(random_images(model.config, 1)[0], 8)
    ea = model.embed_modality(x, model.modality_index(a)).data
    eb = model.embed_modality(x, model.modality_index(b)).data
    diff = model.params[f"embed.{a}.modality"].data - model.params[f"embed.{b}.modality"].data
    np.testing.assert_allclose(ea - eb, np.broadcast_to(diff, ea.shape), atol=1e-6)


def test_embed_rejects_unknown_modality_id():
    model = DenoMAE(tiny())
    with pytest.raises(ConfigError):
        model.embed_modality(np.zeros((4, 192)), 5)


# ----------------------------------------------------------------- encoder


def test_encoder_preserves_token_count():
    cfg = tiny(image_side=56, patch_size=8)  # 49 patches
    model = DenoMAE(cfg)
    tokens = model.embed_modality(patchify(random_images(cfg, 2), 8), 0)
    assert model.encode_modality(tokens).shape == (2, 49, 16)
    with pytest.raises(ValueError):
        model.encode_modality(Tensor(np.zeros((2, 0, 16))))


def test_encoder_is_permutation_equivariant():
    cfg = tiny(encoder_layers=2)
    model = DenoMAE(cfg, seed=3)
    tokens = np.random.default_rng(1).normal(size=(2, 7, 16)).astype(np.float32)
    perm = np.random.default_rng(2).permutation(7)
    out = model.encode_modality(Tensor(tokens)).data
    out_perm = model.encode_modality(Tensor(tokens[:, perm])).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-5)


def test_single_token_attention_is_value_projection():
    model = DenoMAE(tiny(), seed=4)
    x = np.random.default_rng(0).normal(size=(1, 1, 16)).astype(np.float32)
    got = model._attention(Tensor(x), "enc.0.attn").data
    p = model.params
    qkv = x @ p["enc.0.attn.qkv.w"].data + p["enc.0.attn.qkv.b"].data
    v = qkv[..., 32:]  # q, k, v blocks of width D
    want = v @ p["enc.0.attn.out.w"].data + p["enc.0.attn.out.b"].data
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_encoder_weights_are_shared_across_modalities():
    model = DenoMAE(tiny())
    enc = [k for k in model.params if k.startswith("enc.")]
    assert enc and not any(m in k for k in enc for m in MODALITIES)
    # Every modality's reconstruction depends on the same encoder tensor.
    cfg = model.config
    x = [patchify(random_images(cfg, 2, seed=j), 8) for j in range(5)]
    plans = plans_for(cfg, 2)
    for j in range(5):
        model.zero_grad()
        with Tape() as tape:
            preds = model.forward_pretrain(x, plans)
            w = [1.0 if i == j else 1e-30 for i in range(5)]
            loss, _ = pretrain_loss(preds, x, plans, w)
        tape.backward(loss)
        assert np.abs(model.params["enc.0.mlp.fc1.w"].grad).max() > 0


# ------------------------------------------------------------------ shared


def test_shared_projection_shapes_and_order():
    cfg = tiny(image_side=112, patch_size=8, d_model=8)  # N=196, 49 visible
    model = DenoMAE(cfg)
    h = [Tensor(np.random.default_rng(j).normal(size=(1, 49, 8))) for j in range(5)]
    z, blocks = model.project_to_shared(h)
    assert z.shape == (1, 245, 8)
    for j in range(5):
        np.testing.assert_array_equal(z.data[:, 49 * j:49 * (j + 1)], blocks[j].data)
    with pytest.raises(ConfigError):
        model.project_to_shared(h[:4])


def test_identity_projection_reduces_to_layer_norm():
    model = DenoMAE(tiny())
    for m in MODALITIES:
        model.params[f"shared.{m}.proj.w"].data = np.eye(16, dtype=np.float32)
    h = Tensor(np.random.default_rng(0).normal(size=(2, 3, 16)))
    _, blocks = model.project_to_shared([h] * 5)
    np.testing.assert_allclose(blocks[2].data, ops.layer_norm(h).data, atol=1e-6)


def test_reordering_modalities_reorders_blocks():
    cfg = tiny()
    model = DenoMAE(cfg)
    rev = DenoMAE(dataclasses.replace(cfg, modalities=tuple(reversed(MODALITIES))))
    for k in rev.params:
        rev.params[k].data = model.params[k].data.copy()
    h = [Tensor(np.random.default_rng(j).normal(size=(1, 3, 16))) for j in range(5)]
    _, fwd = model.project_to_shared(h)
    _, back = rev.project_to_shared(h[::-1])
    for j in range(5):
        np.testing.assert_array_equal(fwd[j].data, back[4 - j].data)


# ------------------------------------------------------------------ decoder


def test_decoder_outputs_and_sequence_length():
    cfg = tiny(image_side=32)
    model = DenoMAE(cfg)
    seen = []
    block = model._block
    model._block = lambda x, prefix: (seen.append((prefix, x.shape)), block(x, prefix))[1]
    x = [patchify(random_images(cfg, 2, seed=j), 8) for j in range(5)]
    preds = model.forward_pretrain(x, plans_for(cfg, 2))
    assert [p.shape for p in preds] == [(2, 16, 192)] * 5
    assert [unpatchify(p.data, 8).shape for p in preds] == [(2, 3, 32, 32)] * 5
    assert ("dec.0", (2, 5 * 16, 16)) in seen
    assert ("enc.0", (10, 4, 16)) in seen  # five modalities stacked on the batch axis


def test_projection_only_decoder_is_affine_in_latents():
    cfg = tiny(decoder_layers=0)
    model = DenoMAE(cfg, seed=2)
    assert "dec.norm" not in model.params
    plans = plans_for(cfg, 1)
    gen = np.random.default_rng(0)

    def f(blocks):
        return np.concatenate([o.data for o in model.decode_all([Tensor(b) for b in blocks], plans)], axis=1)

    a = [gen.normal(size=(1, p.n_visible, 16)) for p in plans]
    b = [gen.normal(size=(1, p.n_visible, 16)) for p in plans]
    zero = [np.zeros_like(x) for x in a]
    lhs = f([x + y for x, y in zip(a, b)]) + f(zero)
    np.testing.assert_allclose(lhs, f(a) + f(b), atol=1e-5)


def test_decoder_rejects_inconsistent_plan():
    cfg = tiny()
    model = DenoMAE(cfg)
    plans = plans_for(cfg, 1)
    blocks = [Tensor(np.zeros((1, 3, 16)))] * 5  # plans have 1 visible token
    with pytest.raises(ValueError, match="visible"):
        model.decode_all(blocks, plans)


# -------------------------------------------------------------------- loss


def _loss_setup(seed=0, b=2):
    cfg = tiny()
    plans = plans_for(cfg, b, seed)
    gen = np.random.default_rng(seed)
    targets = [gen.random((b, 4, 192)).astype(np.float32) for _ in range(5)]
    return cfg, plans, targets


def test_perfect_reconstruction_has_zero_loss():
    cfg, plans, targets = _loss_setup()
    total, parts = pretrain_loss([Tensor(t) for t in targets], targets, plans, cfg.modality_weights)
    assert float(total.data) == 0.0 and parts == [0.0] * 5


def test_constant_offset_gives_c_squared():
    cfg, plans, targets = _loss_setup()
    _, parts = pretrain_loss([Tensor(t + 0.3) for t in targets], targets, plans, cfg.modality_weights)
    np.testing.assert_allclose(parts, 0.09, rtol=1e-6)


def test_losses_one_to_five_sum_to_fifteen():
    cfg, plans, targets = _loss_setup()
    preds = [Tensor(t + math.sqrt(k + 1)) for k, t in enumerate(targets)]
    total, parts = pretrain_loss(preds, targets, plans, (1, 1, 1, 1, 1))
    np.testing.assert_allclose(parts, [1, 2, 3, 4, 5], rtol=1e-5)
    assert float(total.data) == pytest.approx(15.0, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(0.01, 10.0), min_size=5, max_size=5))
def test_total_is_weighted_sum(seed, weights):
    cfg, plans, targets = _loss_setup(seed)
    gen = np.random.default_rng(seed + 1)
    preds = [Tensor(gen.random(t.shape)) for t in targets]
    total, parts = pretrain_loss(preds, targets, plans, weights)
    assert abs(float(total.data) - sum(w * l for w, l in zip(weights, parts))) <= 1e-6 * max(1.0, float(total.data))


def test_visible_patches_do_not_affect_loss():
    cfg, plans, targets = _loss_setup(3)
    preds = [t + 0.1 for t in targets]
    base, _ = pretrain_loss([Tensor(p) for p in preds], targets, plans, cfg.modality_weights)
    for p, plan in zip(preds, plans):
        p[np.arange(2)[:, None], plan.visible] += 100.0
    moved, _ = pretrain_loss([Tensor(p) for p in preds], targets, plans, cfg.modality_weights)
    assert float(moved.data) == float(base.data)


def test_shuffling_masked_indices_keeps_loss():
    cfg, plans, targets = _loss_setup(4)
    gen = np.random.default_rng(0)
    preds = [Tensor(gen.random(t.shape)) for t in targets]
    shuffled = [BatchPlan(p.visible, np.stack([gen.permutation(row) for row in p.masked])) for p in plans]
    a, _ = pretrain_loss(preds, targets, plans, cfg.modality_weights)
    b, _ = pretrain_loss(preds, targets, shuffled, cfg.modality_weights)
    assert float(a.data) == float(b.data)


def test_loss_needs_masked_patches():
    plan = BatchPlan.stack([MaskPlan(np.arange(4), np.zeros(0, dtype=np.int64))])
    with pytest.raises(ValueError, match="masked"):
        pretrain_loss([Tensor(np.zeros((1, 4, 3)))], [np.zeros((1, 4, 3))], [plan], [1.0])


def test_pretrain_loss_gradients_on_two_patch_model():
    cfg = tiny(image_side=16, patch_size=8, mask_ratio=0.5, modalities=("noisy_signal", "clean_signal"))
    cfg = dataclasses.replace(cfg, image_side=8, patch_size=4)  # 2x2 grid
    model = DenoMAE(cfg, seed=1)
    for p in model.params.values():
        p.data = p.data + np.random.default_rng(0).normal(scale=0.05, size=p.shape).astype(np.float32)
    x = [patchify(random_images(cfg, 2, seed=j), 4) for j in range(2)]
    plans = plans_for(cfg, 2)
    params = {k: p for k, p in model.params.items() if not k.startswith("head.")}

    def f():
        return pretrain_loss(model.forward_pretrain(x, plans), x, plans, cfg.modality_weights)[0]

    report = gradient_check(f, params, max_entries=4)
    assert report.passed, report.worst()


# ---------------------------------------------------------------- classify


def test_classifier_logit_shape_and_eval_determinism():
    cfg = tiny()
    model = DenoMAE(cfg)
    imgs = random_images(cfg, 3)
    a = model.forward_classify(imgs).data
    b = model.forward_classify(imgs).data
    assert a.shape == (3, 3) and a.tobytes() == b.tobytes()
    c = model.forward_classify(imgs, training=True, rng=np.random.default_rng(0)).data
    assert c.tobytes() != a.tobytes()


def test_full_scale_logits_have_ten_classes():
    cfg = DenoMAEConfig.full(encoder_layers=1, decoder_layers=1)
    model = DenoMAE(cfg)
    with no_grad():
        logits = model.forward_classify(random_images(cfg, 1))
    assert logits.shape == (1, 10)


def test_pooling_of_identical_tokens_returns_the_token():
    cfg = tiny()
    model = DenoMAE(cfg)
    v = np.random.default_rng(0).normal(size=16).astype(np.float32)
    model.encode_modality = lambda tokens: Tensor(np.broadcast_to(v, (tokens.shape[0], tokens.shape[1], 16)).copy())
    got = model.forward_classify(random_images(cfg, 1)).data
    p = model.params
    hid = ops.gelu(Tensor(v[None] @ p["head.fc1.w"].data + p["head.fc1.b"].data)).data
    np.testing.assert_allclose(got, hid @ p["head.fc2.w"].data + p["head.fc2.b"].data, atol=1e-6)


def test_classifier_rejects_wrong_image_shape():
    with pytest.raises(ConfigError):
        DenoMAE(tiny()).forward_classify(np.zeros((1, 3, 32, 32)))


def test_classifier_gradients():
    cfg = tiny()
    model = DenoMAE(cfg, seed=5)
    imgs = random_images(cfg, 4)
    labels = np.array([0, 2, 1, 2])
    params = {k: p for k, p in model.params.items() if k.startswith(("embed.noisy_constellation", "enc.", "head."))}
    report = gradient_check(lambda: ops.cross_entropy(model.forward_classify(imgs), labels), params, max_entries=4)
    assert report.passed, report.worst()


# ----------------------------------------------------------------- denoise


def test_denoise_shapes_and_determinism():
    cfg = tiny()
    model = DenoMAE(cfg)
    noisy = random_images(cfg, 1)[0]
    out = denoise(model, {"noisy_constellation": noisy}, seed=3)
    assert set(out) == set(MODALITIES)
    assert out["clean_constellation"].shape == (3, 16, 16)
    again = denoise(model, {"noisy_constellation": noisy}, seed=3)
    assert out["clean_constellation"].tobytes() == again["clean_constellation"].tobytes()
    with pytest.raises(ValueError, match="fully masked"):
        denoise(model, {})


def test_denoise_after_overfitting_one_sample():
    cfg = tiny()
    model = DenoMAE(cfg, seed=0)
    imgs = [random_images(cfg, 1, seed=j) for j in range(5)]
    x = [patchify(i, 8) for i in imgs]
    for step in range(300):
        plans = plans_for(cfg, 1, seed=step)
        with Tape() as tape:
            loss, parts = pretrain_loss(model.forward_pretrain(x, plans), x, plans, cfg.modality_weights)
        model.zero_grad()
        tape.backward(loss)
        adamw_step(model.parameters(), 3e-3)
    assert float(loss.data) < 0.01
    inputs = {m: imgs[j][0] for j, m in enumerate(MODALITIES) if m.startswith("noisy")}
    out = denoise(model, inputs)
    err = np.mean((out["clean_constellation"] - imgs[1][0]) ** 2)
    assert err < 0.01
