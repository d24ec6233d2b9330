import numpy as np
import pytest

from mixmask import autodiff as ad
from mixmask.autodiff import Tensor, backward
from mixmask.mechanisms import MechanismConfig
from mixmask.networks import ActorCritic, ArchitectureConfig

ARCHS = ["separated", "shared_backbone", "mix_ac", "mask_ac", "mixmask_ac"]


def build(arch, seed=0, **mech_kw):
    mech = MechanismConfig(**mech_kw) if mech_kw else None
    cfg = ArchitectureConfig(arch=arch, mechanism=mech)
    return ActorCritic(cfg, np.random.default_rng(seed))


def rand_states(n=7, seed=5):
    return np.random.default_rng(seed).uniform(-0.05, 0.05, size=(n, 4))


@pytest.mark.parametrize("arch", ARCHS)
def test_policy_probs_form_a_simplex(arch):
    net = build(arch)
    out = net.forward_batch(rand_states())
    assert (out.probs.data >= 0).all()
    assert np.allclose(out.probs.data.sum(axis=-1), 1.0, atol=1e-9)
    assert np.isfinite(out.values.data).all()


@pytest.mark.parametrize("arch", ARCHS)
def test_trace_has_one_entry_per_hidden_layer(arch):
    net = build(arch)
    out = net.forward_batch(rand_states())
    depth = len(net.config.trunk_hidden) if arch in ("separated", "mix_ac") else 2
    assert len(out.trace.policy_layers) == depth
    assert len(out.trace.value_layers) == depth
    ids = [id(t) for t in out.trace.policy_layers]
    assert len(set(ids)) == depth  # no layer recorded twice


def test_non_finite_state_rejected():
    net = build("separated")
    bad = np.array([[0.0, np.nan, 0.0, 0.0]])
    with pytest.raises(ValueError):
        net.forward_batch(bad)


def test_single_state_forward():
    net = build("shared_backbone")
    probs, value, trace = net.forward(np.zeros(4))
    assert probs.shape == (2,)
    assert np.isclose(probs.sum(), 1.0)
    assert isinstance(value, float)


def test_mask_identity_equals_shared_backbone():
    shared = build("shared_backbone", seed=3)
    masked = build("mask_ac", seed=3)
    eye = np.eye(64)
    masked.registry.get("mask.pi.l0.w").data = eye.copy()
    masked.registry.get("mask.pi.l0.b").data[:] = 0.0
    masked.registry.get("mask.v.l0.w").data = eye.copy()
    masked.registry.get("mask.v.l0.b").data[:] = 0.0
    states = rand_states(9)
    a = shared.forward_batch(states)
    b = masked.forward_batch(states)
    assert np.allclose(a.probs.data, b.probs.data)
    assert np.allclose(a.values.data, b.values.data)


def test_auxiliary_mix_equals_separated():
    sep = build("separated", seed=4)
    aux = build("mix_ac", seed=4, kind="mix", auxiliary=True)
    states = rand_states(9)
    a = sep.forward_batch(states)
    b = aux.forward_batch(states)
    assert np.array_equal(a.probs.data, b.probs.data)
    assert np.array_equal(a.values.data, b.values.data)


def _policy_loss(net, states):
    out = net.forward_batch(states)
    return ad.tmean(out.log_probs[:, 0])


def test_separated_policy_loss_never_touches_value_params():
    net = build("separated")
    backward(_policy_loss(net, rand_states()))
    assert np.allclose(net.registry.grad_vector("value"), 0.0)
    assert np.abs(net.registry.grad_vector("policy")).max() > 0.0


def test_mix_policy_loss_reaches_pre_mechanism_value_params():
    net = build("mix_ac", kind="mix")
    backward(_policy_loss(net, rand_states()))
    g = net.registry.get("value.h0.w").grad
    assert g is not None and np.abs(g).max() > 0.0


def test_auxiliary_main_loss_skips_mechanism_params():
    net = build("mix_ac", kind="mix", auxiliary=True)
    out = net.forward_batch(rand_states())
    loss = ad.add(ad.tmean(out.log_probs[:, 0]), ad.tmean(out.values))
    backward(loss)
    assert np.allclose(net.registry.grad_vector("mechanism"), 0.0)


def test_auxiliary_penalty_skips_post_extraction_params():
    from mixmask.objectives import cosine_similarity
    net = build("mix_ac", kind="mix", auxiliary=True)
    out = net.forward_batch(rand_states())
    view = net.mechanism_view("mix", out.trace, detach_inputs=False)
    backward(cosine_similarity(view.out_pi, view.out_v))
    # penalty reaches the preceding trunk parameters...
    assert np.abs(net.registry.get("policy.h0.w").grad).max() > 0.0
    assert np.abs(net.registry.get("value.h0.w").grad).max() > 0.0
    # ...but never the post-extraction main path on either head
    for name in ("policy.h1.w", "policy.out.w", "value.h1.w", "value.out.w"):
        assert net.registry.get(name).grad is None


def test_standard_penalty_routing_only_mechanism():
    from mixmask.objectives import cosine_similarity
    net = build("mix_ac", kind="mix")
    out = net.forward_batch(rand_states())
    view = net.mechanism_view("mix", out.trace, detach_inputs=True)
    backward(cosine_similarity(view.out_pi, view.out_v))
    assert np.abs(net.registry.grad_vector("mechanism")).max() > 0.0
    assert np.allclose(net.registry.grad_vector("policy"), 0.0)
    assert np.allclose(net.registry.grad_vector("value"), 0.0)


def test_stochastic_forward_reparameterizes_gradients():
    net = build("mix_ac", kind="mix", stochastic="diagonal",
                penalty_measure="j_divergence")
    rng = np.random.default_rng(0)
    out = net.forward_batch(rand_states(), mech_rng=rng)
    backward(ad.tmean(out.values))
    cov_grad = net.registry.get("mix.sigma_v.covparam").grad
    assert cov_grad is not None and np.abs(cov_grad).max() > 0.0


def test_stochastic_forward_requires_noise_source():
    net = build("mix_ac", kind="mix", stochastic="diagonal",
                penalty_measure="j_divergence")
    with pytest.raises(ValueError):
        net.forward_batch(rand_states())


def test_dense_skip_adjusts_downstream_widths():
    net = build("mix_ac", kind="mix", skip="dense")
    out = net.forward_batch(rand_states())
    assert out.probs.shape == (7, 2)
    assert net.registry.get("policy.h1.w").shape == (128, 64)


def test_mixmask_has_both_mechanisms():
    net = build("mixmask_ac", kind="mix_and_mask")
    assert set(net.mechanisms) == {"mix", "mask"}
    out = net.forward_batch(rand_states())
    assert "mix" in out.trace.mech and "mask" in out.trace.mech


def test_contrastive_builds_momentum_copy_and_bilinear():
    net = build("mask_ac", kind="mask", contrastive=True)
    assert "mask" in net.momentum_mechanisms
    live = net._mech_params("mask")
    mom = net._mech_params("momentum.mask")
    assert len(live) == len(mom)
    for a, b in zip(live, mom):
        assert np.array_equal(a.data, b.data)  # starts aligned
        assert not b.requires_grad
    assert net.bilinear["mask"].shape == (64, 64)


def test_momentum_step_blends_toward_live():
    net = build("mask_ac", kind="mask", contrastive=True, momentum=0.5)
    live = net._mech_params("mask")
    live[0].data += 1.0
    before = net._mech_params("momentum.mask")[0].data.copy()
    net.momentum_step()
    after = net._mech_params("momentum.mask")[0].data
    assert np.allclose(after - before, 0.5 * (live[0].data - before))
