"""Actor-critic architectures: separated, shared-backbone, and the three
mechanism-coupled variants.

Every architecture exposes policy probabilities, a value estimate, and a
`LatentTrace` of per-layer hidden activations plus mechanism inputs and
outputs, which the penalty objectives and the similarity-delta experiment
consume. Parameters are registered into routing groups so objective terms
can be restricted to the parameters they are allowed to update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterRegistry, Tensor
from .layers import Linear
from .mechanisms import (MechanismConfig, MechOut, MixMechanism, MaskMechanism,
                         apply_skip, momentum_update)

ARCHITECTURES = ("separated", "shared_backbone", "mix_ac", "mask_ac", "mixmask_ac")

POLICY_OUT_GAIN = 0.01
VALUE_OUT_GAIN = 1.0


@dataclass
class ArchitectureConfig:
    arch: str
    obs_dim: int = 4
    n_actions: int = 2
    trunk_hidden: tuple = (64, 64)  # separated / mix trunks
    backbone_width: int = 64  # backbone-style architectures
    head_hidden: int = 64  # hidden width of backbone-style heads
    extraction_point: int = 1  # mix inserted after this trunk hidden layer (1-based)
    mechanism: MechanismConfig | None = None

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture: {self.arch!r}")
        self.trunk_hidden = tuple(self.trunk_hidden)
        if self.arch == "mix_ac" and not 1 <= self.extraction_point <= len(self.trunk_hidden):
            raise ValueError(f"extraction_point {self.extraction_point} invalid for "
                             f"trunk of depth {len(self.trunk_hidden)}")
        if self.arch in ("mix_ac", "mask_ac", "mixmask_ac") and self.mechanism is None:
            self.mechanism = MechanismConfig(kind=_default_kind(self.arch))


def _default_kind(arch: str) -> str:
    return {"mix_ac": "mix", "mask_ac": "mask", "mixmask_ac": "mix_and_mask"}[arch]


@dataclass
class LatentTrace:
    """Per-layer hidden activations and the mechanism's inputs/outputs."""

    policy_layers: list[Tensor] = field(default_factory=list)
    value_layers: list[Tensor] = field(default_factory=list)
    mech_in: dict[str, tuple[Tensor, ...]] = field(default_factory=dict)
    mech: dict[str, MechOut] = field(default_factory=dict)


@dataclass
class ForwardOut:
    probs: Tensor  # (B, n_actions)
    log_probs: Tensor  # (B, n_actions)
    values: Tensor  # (B,)
    trace: LatentTrace
    mech_noise: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


class ActorCritic:
    """One of the five architectures, built from a seeded rng.

    `forward_batch` is the training path (graph recorded, reparameterized
    mechanism sampling); wrap calls in `autodiff.no_grad()` for rollouts
    and evaluation.
    """

    def __init__(self, config: ArchitectureConfig, rng: np.random.Generator):
        self.config = config
        self.registry = ParameterRegistry()
        self.mechanisms: dict[str, MixMechanism | MaskMechanism] = {}
        self.momentum_mechanisms: dict[str, MixMechanism | MaskMechanism] = {}
        self.bilinear: dict[str, Tensor] = {}
        self._build(rng)

    # -- construction ----------------------------------------------------
    def _build(self, rng):
        c = self.config
        mcfg = c.mechanism
        if c.arch in ("separated", "mix_ac"):
            widths = list(c.trunk_hidden)
            if c.arch == "mix_ac" and mcfg.skip == "dense" and not mcfg.auxiliary:
                widths[c.extraction_point - 1] *= 2
            self.policy_trunk = []
            self.value_trunk = []
            in_p = in_v = c.obs_dim
            for i, w in enumerate(c.trunk_hidden):
                self.policy_trunk.append(Linear(self.registry, "policy", f"policy.h{i}", in_p, w, rng))
                in_p = widths[i]
                self.value_trunk.append(Linear(self.registry, "value", f"value.h{i}", in_v, w, rng))
                in_v = widths[i]
            self.policy_out = Linear(self.registry, "policy", "policy.out", in_p, c.n_actions, rng, POLICY_OUT_GAIN)
            self.value_out = Linear(self.registry, "value", "value.out", in_v, 1, rng, VALUE_OUT_GAIN)
            if c.arch == "mix_ac":
                dim = c.trunk_hidden[c.extraction_point - 1]
                self._add_mechanism("mix", MixMechanism, mcfg, dim, rng)
        else:
            bw = c.backbone_width
            self.backbone = Linear(self.registry, "backbone", "backbone.l", c.obs_dim, bw, rng)
            head_in = bw
            if c.arch in ("mask_ac", "mixmask_ac") and mcfg.skip == "dense" and not mcfg.auxiliary:
                head_in = 2 * bw
            self.policy_head = Linear(self.registry, "policy", "policy.head", head_in, c.head_hidden, rng)
            self.value_head = Linear(self.registry, "value", "value.head", head_in, c.head_hidden, rng)
            out_in = c.head_hidden
            if c.arch == "mixmask_ac" and mcfg.skip == "dense" and not mcfg.auxiliary:
                out_in = 2 * c.head_hidden
            self.policy_out = Linear(self.registry, "policy", "policy.out", out_in, c.n_actions, rng, POLICY_OUT_GAIN)
            self.value_out = Linear(self.registry, "value", "value.out", out_in, 1, rng, VALUE_OUT_GAIN)
            if c.arch in ("mask_ac", "mixmask_ac"):
                self._add_mechanism("mask", MaskMechanism, mcfg, bw, rng)
            if c.arch == "mixmask_ac":
                self._add_mechanism("mix", MixMechanism, mcfg, c.head_hidden, rng)

    def _add_mechanism(self, name, cls, mcfg, dim, rng):
        mech = cls(self.registry, mcfg, dim, rng, group="mechanism", name=name)
        self.mechanisms[name] = mech
        if mcfg.contrastive:
            mom = cls(self.registry, mcfg, dim, rng, group="momentum", name=f"momentum.{name}")
            # targets start aligned with the live mechanism
            momentum_update(self._mech_params(name), self._mech_params(f"momentum.{name}"), 1.0)
            self.momentum_mechanisms[name] = mom
            self.bilinear[name] = self.registry.register(
                "bilinear", f"bilinear.{name}.W", Tensor(np.eye(dim)))

    def _mech_params(self, prefix: str) -> list[Tensor]:
        group = "momentum" if prefix.startswith("momentum.") else "mechanism"
        return [t for n, t in self.registry.group(group) if n.startswith(prefix + ".")]

    def momentum_step(self) -> None:
        m = self.config.mechanism.momentum
        for name in self.momentum_mechanisms:
            momentum_update(self._mech_params(name), self._mech_params(f"momentum.{name}"), m)

    # -- forward ---------------------------------------------------------
    def forward_batch(self, states: np.ndarray, mech_noise=None, mech_rng=None) -> ForwardOut:
        states = np.asarray(states, dtype=np.float64)
        if states.ndim == 1:
            states = states[None, :]
        if states.shape[-1] != self.config.obs_dim or not np.isfinite(states).all():
            raise ValueError(f"observations must be finite with width {self.config.obs_dim}, "
                             f"got shape {states.shape}")
        x = Tensor(states)
        trace = LatentTrace()
        noise_used: dict = {}
        mech_noise = mech_noise or {}
        c = self.config
        mcfg = c.mechanism

        if c.arch in ("separated", "mix_ac"):
            hp = hv = x
            for i, (lp, lv) in enumerate(zip(self.policy_trunk, self.value_trunk)):
                hp = ad.tanh(lp(hp))
                hv = ad.tanh(lv(hv))
                if c.arch == "mix_ac" and i == c.extraction_point - 1:
                    out = self.mechanisms["mix"].forward(
                        hp, hv, noise=mech_noise.get("mix"), rng=mech_rng)
                    trace.mech_in["mix"] = (hp, hv)
                    trace.mech["mix"] = out
                    if out.noise is not None:
                        noise_used["mix"] = out.noise
                    if not mcfg.auxiliary:
                        hp = apply_skip(mcfg.skip, hp, out.out_pi)
                        hv = apply_skip(mcfg.skip, hv, out.out_v)
                trace.policy_layers.append(hp)
                trace.value_layers.append(hv)
            logits = self.policy_out(hp)
            values = self.value_out(hv)
        else:
            xs = ad.tanh(self.backbone(x))
            hp_in = hv_in = xs
            if c.arch in ("mask_ac", "mixmask_ac"):
                out = self.mechanisms["mask"].forward(
                    xs, noise=mech_noise.get("mask"), rng=mech_rng)
                trace.mech_in["mask"] = (xs,)
                trace.mech["mask"] = out
                if out.noise is not None:
                    noise_used["mask"] = out.noise
                if not mcfg.auxiliary:
                    hp_in = apply_skip(mcfg.skip, xs, out.out_pi)
                    hv_in = apply_skip(mcfg.skip, xs, out.out_v)
            hp = ad.tanh(self.policy_head(hp_in))
            hv = ad.tanh(self.value_head(hv_in))
            if c.arch == "mixmask_ac":
                out = self.mechanisms["mix"].forward(
                    hp, hv, noise=mech_noise.get("mix"), rng=mech_rng)
                trace.mech_in["mix"] = (hp, hv)
                trace.mech["mix"] = out
                if out.noise is not None:
                    noise_used["mix"] = out.noise
                if not mcfg.auxiliary:
                    hp = apply_skip(mcfg.skip, hp, out.out_pi)
                    hv = apply_skip(mcfg.skip, hv, out.out_v)
            trace.policy_layers.extend([xs, hp])
            trace.value_layers.extend([xs, hv])
            logits = self.policy_out(hp)
            values = self.value_out(hv)

        probs = ad.softmax(logits)
        log_probs = ad.log_softmax(logits)
        values = ad.reshape(values, (-1,))
        return ForwardOut(probs, log_probs, values, trace, noise_used)

    def forward(self, state: np.ndarray, mech_rng=None) -> tuple[np.ndarray, float, LatentTrace]:
        """Single-observation forward: (action distribution, value, trace)."""
        out = self.forward_batch(np.asarray(state)[None, :], mech_rng=mech_rng)
        return out.probs.data[0], float(out.values.data[0]), out.trace

    # -- penalty / contrastive views --------------------------------------
    def mechanism_view(self, name: str, trace: LatentTrace, *, detach_inputs: bool,
                       use_momentum: bool = False, noise=None, rng=None) -> MechOut:
        """Re-run a mechanism on this trace's inputs for an objective term.

        With `detach_inputs` the trunk upstream of the mechanism receives no
        gradient, which is the standard routing; auxiliary mode passes the
        live inputs so the penalty reaches the preceding trunk parameters.
        Zero noise turns a stochastic mechanism's output into its mean.
        """
        inputs = trace.mech_in[name]
        if detach_inputs:
            inputs = tuple(t.detach() for t in inputs)
        mech = (self.momentum_mechanisms if use_momentum else self.mechanisms)[name]
        if self.config.mechanism.stochastic != "off" and noise is None and rng is None:
            shape = trace.mech[name].out_pi.shape
            noise = (np.zeros(shape), np.zeros(shape))
        return mech.forward(*inputs, noise=noise, rng=rng)

    # -- parameter plumbing ----------------------------------------------
    def state_copy(self):
        return self.registry.state_copy()

    def load_state(self, state):
        self.registry.load_state(state)

    def shared_feature_groups(self) -> list[str]:
        """Groups holding parameters that generate shared feature spaces
        (the projection targets for conflicting-gradient surgery)."""
        return {
            "separated": [],
            "shared_backbone": ["backbone"],
            "mix_ac": ["mechanism"],
            "mask_ac": ["backbone"],
            "mixmask_ac": ["backbone", "mechanism"],
        }[self.config.arch]
