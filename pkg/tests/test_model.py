import math

import pytest
import torch

from msatl.batching import BatcherConfig, plan_epoch
from msatl.data import ToyConfig, generate_toy_corpus
from msatl.model import (
    PER_SAMPLE_REPLICATE,
    LossBreakdown,
    ModelConfig,
    MsatlModel,
    build_model,
    checkpoint_bytes,
    compute_loss,
    domain_logit,
    domain_loss,
    encode,
    extract_features,
    fuse_and_predict,
    images_to_tensor,
    infer,
    load_checkpoint,
    save_checkpoint,
    segmentation_loss,
)

TINY = dict(image_size=16, depth=2, base_width=4, classifier_hidden=8)


@pytest.fixture(scope="module")
def tiny_corpus():
    return generate_toy_corpus(ToyConfig(image_size=32, n_target=6, n_source=6), seed=3)


def tiny_model(seed=0, **kw):
    return build_model(ModelConfig(**{**TINY, **kw}), seed=seed)


def set_mu(model, value):
    with torch.no_grad():
        for sn in model.subnets:
            sn.attention.mu.fill_(value)


def test_default_shapes():
    model = build_model(seed=0)
    assert (model.N, model.cfg.image_size, model.cfg.depth, model.cfg.base_width) == (2, 64, 4, 8)
    b, skips = extract_features(model, 1, torch.rand(1, 3, 64, 64))
    # Oracle: 64 / 2^4 = 4 -> K = 16 positions.
    assert b.shape == (1, 128, 4, 4)
    assert [s.shape[-1] for s in skips] == [64, 32, 16, 8]
    assert model.lam == 0.3


def test_single_source_model():
    model = tiny_model(N=1)
    assert len(model.subnets) == 1
    assert infer(model, torch.rand(2, 3, 16, 16)).shape == (2, 2, 16, 16)


def test_indivisible_size():
    with pytest.raises(ValueError, match="divisible"):
        build_model(ModelConfig(image_size=60, depth=4))


def test_subnet_index_bounds():
    model = tiny_model()
    with pytest.raises(IndexError):
        extract_features(model, 0, torch.rand(1, 3, 16, 16))
    with pytest.raises(IndexError):
        extract_features(model, 3, torch.rand(1, 3, 16, 16))


def test_features_at_init_equal_raw_encoder():
    model = tiny_model().eval()
    x = torch.rand(2, 3, 16, 16)
    b, _ = extract_features(model, 1, x)
    raw, _ = encode(model, 1, x)
    assert torch.equal(b, raw)


def test_identical_seeds_identical_subnetworks():
    model = MsatlModel(ModelConfig(**TINY), subnet_seeds=[7, 7]).eval()
    x = torch.rand(2, 3, 16, 16)
    b1, s1 = extract_features(model, 1, x)
    b2, s2 = extract_features(model, 2, x)
    assert torch.equal(b1, b2) and all(torch.equal(a, b) for a, b in zip(s1, s2))
    assert not torch.equal(tiny_model().subnets[0].encoder.down[0][0].weight,
                           tiny_model().subnets[1].encoder.down[0][0].weight)


def test_batch_equals_concatenated_singles():
    model = tiny_model().eval()
    set_mu(model, 0.5)
    x = torch.rand(2, 3, 16, 16)
    with torch.no_grad():
        both, _ = extract_features(model, 2, x)
        one, _ = extract_features(model, 2, x[:1])
        two, _ = extract_features(model, 2, x[1:])
    assert torch.allclose(both, torch.cat([one, two]), atol=1e-6, rtol=1e-5)


def test_wrong_input_shape():
    model = tiny_model()
    with pytest.raises(ValueError):
        infer(model, torch.rand(1, 1, 16, 16))
    with pytest.raises(ValueError):
        infer(model, torch.rand(1, 3, 32, 32))


def test_domain_logit_zero_is_half():
    assert torch.sigmoid(torch.tensor(0.0)).item() == 0.5
    assert domain_loss(torch.zeros(4), torch.tensor([0, 0, 1, 1])).item() == pytest.approx(math.log(2))


def test_grl_forward_identity():
    model = tiny_model().eval()
    b, _ = extract_features(model, 1, torch.rand(3, 3, 16, 16))
    assert torch.equal(domain_logit(model, 1, b), domain_logit(model, 1, b, reverse=False))


def grads_of_domain_loss(model, x, labels, reverse):
    model.zero_grad()
    b, _ = extract_features(model, 1, x)
    domain_loss(domain_logit(model, 1, b, reverse=reverse), labels).backward()
    sn = model.subnet(1)
    upstream = [p.grad.clone() for p in [*sn.encoder.parameters(), *sn.attention.parameters()]]
    downstream = [p.grad.clone() for p in sn.classifier.parameters()]
    return upstream, downstream


def test_grl_backward_scales_by_minus_lambda():
    model = build_model(ModelConfig(**TINY, lam=0.3), seed=1).double()
    set_mu(model, 0.4)
    x = torch.rand(4, 3, 16, 16, dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1])
    up_rev, down_rev = grads_of_domain_loss(model, x, labels, reverse=True)
    up, down = grads_of_domain_loss(model, x, labels, reverse=False)
    for g_rev, g in zip(up_rev, up):
        assert torch.allclose(g_rev, -0.3 * g, atol=1e-9, rtol=0)
    for g_rev, g in zip(down_rev, down):
        assert torch.equal(g_rev, g)
    assert any(g.abs().sum() > 0 for g in up)


def test_fusion_single_subnetwork_is_identity():
    model = tiny_model(N=1).eval()
    x = torch.rand(1, 3, 16, 16)
    feats = extract_features(model, 1, x)
    assert torch.equal(fuse_and_predict(model, [feats]), model.predictor(*feats))


def test_fusion_additive_identity():
    model = tiny_model().eval()
    b, skips = extract_features(model, 1, torch.rand(1, 3, 16, 16))
    zeros = (torch.zeros_like(b), [torch.zeros_like(s) for s in skips])
    assert torch.equal(fuse_and_predict(model, [(b, skips), zeros]), model.predictor(b, skips))


def test_fusion_sums_constant_maps():
    model = tiny_model().eval()
    seen = {}
    model.predictor.register_forward_pre_hook(lambda m, args: seen.setdefault("in", args))
    b, skips = extract_features(model, 1, torch.rand(1, 3, 16, 16))
    c1 = (torch.full_like(b, 1.25), [torch.full_like(s, 0.5) for s in skips])
    c2 = (torch.full_like(b, -3.0), [torch.full_like(s, 2.0) for s in skips])
    fuse_and_predict(model, [c1, c2])
    bott, sk = seen["in"]
    assert torch.equal(bott, torch.full_like(b, 1.25 + -3.0))
    assert all(torch.equal(s, torch.full_like(s, 2.5)) for s in sk)


def test_fusion_shape_mismatch():
    model = tiny_model().eval()
    f1 = extract_features(model, 1, torch.rand(1, 3, 16, 16))
    f2 = extract_features(model, 2, torch.rand(2, 3, 16, 16))
    with pytest.raises(ValueError):
        fuse_and_predict(model, [f1, f2])
    with pytest.raises(ValueError):
        fuse_and_predict(model, [f1])


def test_infer_probabilities_normalized():
    model = tiny_model().eval()
    set_mu(model, 1.3)
    probs = infer(model, torch.rand(3, 3, 16, 16))
    assert torch.allclose(probs.sum(1), torch.ones(3, 16, 16), atol=1e-6)
    mask = probs[:, 1] > 0.5
    assert mask.dtype == torch.bool and mask.shape == (3, 16, 16)


def test_hand_cross_entropy_two_pixels():
    logits = torch.tensor([[[[2.0, -1.0]], [[0.5, 1.0]]]], dtype=torch.float64)  # 1x2x1x2
    masks = torch.tensor([[[0, 1]]])
    # Pixel 1: class 0 with logits (2, 0.5); pixel 2: class 1 with logits (-1, 1).
    p1 = -(2.0 - math.log(math.exp(2.0) + math.exp(0.5)))
    p2 = -(1.0 - math.log(math.exp(-1.0) + math.exp(1.0)))
    assert segmentation_loss(logits, masks).item() == pytest.approx((p1 + p2) / 2, abs=1e-12)


def test_loss_bookkeeping_arithmetic():
    lb = LossBreakdown(torch.tensor(1.0, dtype=torch.float64),
                       [torch.tensor(0.2, dtype=torch.float64), torch.tensor(0.3, dtype=torch.float64)],
                       0.3)
    assert lb.total == pytest.approx(0.85, abs=1e-12)
    assert lb.surrogate.item() == pytest.approx(1.5, abs=1e-12)


def test_loss_limits():
    masks = torch.tensor([[[0, 1, 1, 0]]])
    logits = torch.zeros(1, 2, 1, 4)
    logits[:, 1] = torch.where(masks.bool(), 50.0, -50.0)
    assert segmentation_loss(logits, masks).item() < 1e-12
    assert domain_loss(torch.zeros(2), torch.tensor([0, 1])).item() == pytest.approx(math.log(2))


def test_compute_loss_on_batch(tiny_corpus):
    target, sources = tiny_corpus
    model = build_model(ModelConfig(image_size=32, depth=2, base_width=4), seed=0)
    batch = next(plan_epoch(target, sources, BatcherConfig(n_b=8, N=2)))
    lb = compute_loss(model, batch)
    assert len(lb.l_adv) == 2
    assert lb.total == pytest.approx(lb.l_p.item() - 0.3 * sum(l.item() for l in lb.l_adv), abs=1e-12)
    assert lb.target_logits.shape == (2, 2, 32, 32)
    lb.surrogate.backward()
    assert all(torch.isfinite(p.grad).all() for p in model.parameters() if p.grad is not None)
    rep = compute_loss(model, batch, PER_SAMPLE_REPLICATE)
    assert torch.isfinite(rep.l_p)
    with pytest.raises(ValueError):
        compute_loss(model, batch, "nope")


@pytest.mark.parametrize("where, reaches_attention", [("encoder", False), ("attended", True)])
def test_classifier_input_controls_adversarial_reach(tiny_corpus, where, reaches_attention):
    target, sources = tiny_corpus
    model = build_model(ModelConfig(image_size=32, depth=2, base_width=4, classifier_input=where), seed=0)
    set_mu(model, 0.5)
    batch = next(plan_epoch(target, sources, BatcherConfig(n_b=8, N=2)))
    torch.stack(compute_loss(model, batch).l_adv).sum().backward()
    for sn in model.subnets:
        att = [p.grad for p in sn.attention.parameters()]
        touched = any(g is not None and g.abs().sum() > 0 for g in att)
        assert touched == reaches_attention
        assert any(p.grad.abs().sum() > 0 for p in sn.encoder.parameters())


def test_classifier_input_validated():
    with pytest.raises(ValueError):
        build_model(ModelConfig(**TINY, classifier_input="decoder"))


def test_non_finite_loss_names_term():
    lb = LossBreakdown(torch.tensor(0.5), [torch.tensor(0.1), torch.tensor(float("nan"))], 0.3)
    with pytest.raises(FloatingPointError, match=r"l_adv\[2\]"):
        lb.check_finite()
    lb = LossBreakdown(torch.tensor(float("inf")), [torch.tensor(0.1)], 0.3)
    with pytest.raises(FloatingPointError, match="l_p"):
        lb.check_finite()


def test_checkpoint_roundtrip(tmp_path):
    model = tiny_model(seed=4)
    set_mu(model, 0.25)
    save_checkpoint(model, tmp_path / "c.pt", {"epoch": 3})
    back = load_checkpoint(tmp_path / "c.pt")
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(infer(model.eval(), x), infer(back, x))
    assert checkpoint_bytes(model) == checkpoint_bytes(back)
    keys = list(back.state_dict())
    assert "subnets.1.encoder.down.0.0.weight" in keys and "subnets.0.attention.mu" in keys
    with pytest.raises(ValueError, match="does not match"):
        load_checkpoint(tmp_path / "c.pt", expected=ModelConfig(**{**TINY, "base_width": 8}))
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


def test_no_attention_model_freezes_attention():
    model = tiny_model(use_attention=False)
    ids = {id(p) for p in model.optimizable_parameters()}
    assert all(id(p) not in ids for sn in model.subnets for p in sn.attention.parameters())
    set_mu(model, 2.0)
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(extract_features(model, 1, x)[0], encode(model, 1, x)[0])


def test_images_to_tensor_scaling(tiny_corpus):
    target, _ = tiny_corpus
    x = images_to_tensor(target.samples[:2])
    assert x.shape == (2, 3, 32, 32) and x.dtype == torch.float32
    assert 0.0 <= x.min() and x.max() <= 1.0
