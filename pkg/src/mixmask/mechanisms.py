"""Mix and mask mechanisms coupling/decoupling policy and value latents.

The mix function takes the two trunks' intermediate latents and returns a
coupled pair; the mask function splits a shared backbone's latent into a
decoupled pair. Each comes in four representations, can be made stochastic
(diagonal or Cholesky-factored full covariance), and can carry a momentum
copy for contrastive targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterRegistry, ShapeError, Tensor
from .layers import MLP, Linear

ATTN_DIM = 16

MIX_REPRS = ("base_mlp", "channel_mixer", "conv", "cross_attention")
MASK_REPRS = ("base_mlp", "self_attention", "latent_query_attention", "shared_inverted_attention")
STATISTICAL_MEASURES = ("info_radius", "j_divergence", "ag_divergence")
PENALTY_MEASURES = ("cosine",) + STATISTICAL_MEASURES


@dataclass
class MechanismConfig:
    """Mechanism kind, representation, penalty wiring, and variant flags.

    `alpha_s` weights the similarity penalty on mixed latents, `alpha_d`
    the divergence penalty on masked latents; both decay by `tau` per
    update step. Deterministic mechanisms pair with the cosine measure,
    stochastic ones with a statistical divergence.
    """

    kind: str = "mix"  # mix | mask | mix_and_mask
    mix_repr: str = "base_mlp"
    mask_repr: str = "base_mlp"
    penalty_measure: str = "cosine"
    alpha_s: float = 1.0
    alpha_d: float = 0.1
    tau: float = 1.0
    stochastic: str = "off"  # off | diagonal | full_cholesky
    cov_mode: str = "state_independent"  # state_independent | state_dependent
    skip: str = "none"  # none | residual | dense
    auxiliary: bool = False
    contrastive: bool = False
    momentum: float = 0.95
    base_hidden: tuple = ()  # hidden widths inside the base-MLP couplers
    coupling_init: float = 0.1  # off-identity scale of depth-1 base couplers
    mixer_depth: int = 2
    conv_depth: int = 2
    conv_kernel: int = 3
    mc_samples: int = 256

    def __post_init__(self):
        if self.kind not in ("mix", "mask", "mix_and_mask"):
            raise ValueError(f"unknown mechanism kind: {self.kind!r}")
        if self.mix_repr not in MIX_REPRS:
            raise ValueError(f"unknown mix representation: {self.mix_repr!r}")
        if self.mask_repr not in MASK_REPRS:
            raise ValueError(f"unknown mask representation: {self.mask_repr!r}")
        if self.stochastic not in ("off", "diagonal", "full_cholesky"):
            raise ValueError(f"unknown stochastic mode: {self.stochastic!r}")
        if self.cov_mode not in ("state_independent", "state_dependent"):
            raise ValueError(f"unknown covariance mode: {self.cov_mode!r}")
        if self.skip not in ("none", "residual", "dense"):
            raise ValueError(f"unknown skip kind: {self.skip!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.penalty_measure not in PENALTY_MEASURES:
            raise ValueError(f"unknown penalty measure: {self.penalty_measure!r}")
        if self.stochastic == "off" and self.penalty_measure != "cosine":
            raise ValueError("deterministic mechanisms pair with the cosine measure only")
        if self.stochastic != "off" and self.penalty_measure not in STATISTICAL_MEASURES:
            raise ValueError("stochastic mechanisms require a statistical penalty measure")
        self.base_hidden = tuple(self.base_hidden)


@dataclass
class GaussianLatent:
    """Mean plus either a log-std vector or a Cholesky parameter vector."""

    mu: Tensor
    kind: str  # diagonal | full_cholesky
    log_std: Tensor | None = None
    chol_vec: Tensor | None = None

    def chol_factor(self) -> Tensor:
        return cholesky_factor(self.chol_vec)

    def sample(self, eps: np.ndarray) -> Tensor:
        """Reparameterized draw mu + sigma*eps (or mu + L^T eps in full mode)."""
        e = Tensor(eps)
        if self.kind == "diagonal":
            return ad.add(self.mu, ad.mul(ad.exp(self.log_std), e))
        L = self.chol_factor()
        if L.ndim == 2:
            return ad.add(self.mu, ad.matmul(e, L))
        d = L.shape[-1]
        prod = ad.matmul(ad.reshape(e, (-1, 1, d)), L)
        return ad.add(self.mu, ad.reshape(prod, (-1, d)))

    def cov_matrix(self) -> np.ndarray:
        """Dense covariance (numpy, no graph) for diagnostics and tests."""
        if self.kind == "diagonal":
            var = np.exp(2.0 * self.log_std.data)
            return np.diag(var) if var.ndim == 1 else np.stack([np.diag(v) for v in var])
        L = self.chol_factor().data
        return np.swapaxes(L, -1, -2) @ L if L.ndim > 2 else L.T @ L


@dataclass
class AttentionMask:
    """Row-stochastic attention weights plus the constant that normalized them."""

    a: Tensor
    h: float = 1.0


def invert_mask(mask: AttentionMask) -> AttentionMask:
    """Complement-and-renormalize: a_v = h * (1 - a_pi) with h = 1/(n-1).

    Rows of the input sum to 1, so rows of (1 - a_pi) sum to n - 1 and the
    constant h restores row-stochasticity exactly.
    """
    n = mask.a.shape[-1]
    if n < 2:
        raise ValueError("cannot invert a length-1 attention mask: 1 - a is identically zero")
    h = 1.0 / (n - 1)
    ones = Tensor(np.ones_like(mask.a.data))
    return AttentionMask(ad.scale(ad.add(ones, ad.scale(mask.a, -1.0)), h), h)


def cholesky_factor(c: Tensor) -> Tensor:
    """Unit-diagonal lower factor L = outer(c, c) * strict_lower + I.

    The unit diagonal keeps L nonsingular for every c, so Sigma = L^T L is
    always symmetric positive-definite. Supports a batch axis on c.
    """
    d = c.shape[-1]
    strict = np.tril(np.ones((d, d)), k=-1)
    eye = np.eye(d)
    if c.ndim == 1:
        outer = ad.matmul(ad.reshape(c, (d, 1)), ad.reshape(c, (1, d)))
    else:
        outer = ad.matmul(ad.reshape(c, (-1, d, 1)), ad.reshape(c, (-1, 1, d)))
    return ad.add(ad.mul(outer, Tensor(strict)), Tensor(eye))


def apply_skip(kind: str, original: Tensor, altered: Tensor) -> Tensor:
    """Shortcut combine: passthrough, residual sum, or dense concatenation."""
    if kind == "none":
        return altered
    if kind == "residual":
        if original.shape != altered.shape:
            raise ShapeError(f"residual skip: shapes {original.shape} vs {altered.shape}")
        return ad.add(original, altered)
    if kind == "dense":
        return ad.concat([original, altered], axis=-1)
    raise ValueError(f"unknown skip kind: {kind!r}")


def momentum_update(live_params: list[Tensor], momentum_params: list[Tensor], m: float) -> None:
    """Blend momentum copies toward live parameters: mom <- m*live + (1-m)*mom."""
    if len(live_params) != len(momentum_params):
        raise ShapeError("momentum_update: parameter lists differ in length")
    for live, mom in zip(live_params, momentum_params):
        if live.shape != mom.shape:
            raise ShapeError(f"momentum_update: shapes {live.shape} vs {mom.shape}")
        mom.data = m * live.data + (1.0 - m) * mom.data


# ---------------------------------------------------------------------------
# attention building block (per-feature tokens of width 1)
# ---------------------------------------------------------------------------

class AttentionProjections:
    """Single-head scaled dot-product attention over width-1 feature tokens."""

    def __init__(self, registry, group, name, rng, with_query=True):
        self.wq = Linear(registry, group, f"{name}.q", 1, ATTN_DIM, rng) if with_query else None
        self.wk = Linear(registry, group, f"{name}.k", 1, ATTN_DIM, rng)
        self.wv = Linear(registry, group, f"{name}.v", 1, ATTN_DIM, rng)
        self.wo = Linear(registry, group, f"{name}.o", ATTN_DIM, 1, rng)

    @staticmethod
    def tokens(x: Tensor) -> Tensor:
        return ad.reshape(x, (-1, x.shape[-1], 1))

    def weights(self, q: Tensor, kv_src: Tensor) -> AttentionMask:
        k = self.wk(self.tokens(kv_src))
        scores = ad.scale(ad.matmul(q, ad.transpose_last_two(k)), ATTN_DIM ** -0.5)
        return AttentionMask(ad.softmax(scores), 1.0)

    def readout(self, mask: AttentionMask, kv_src: Tensor) -> Tensor:
        v = self.wv(self.tokens(kv_src))
        ctx = ad.matmul(mask.a, v)
        out = self.wo(ctx)
        return ad.reshape(out, (-1, kv_src.shape[-1]))

    def attend(self, q_src: Tensor, kv_src: Tensor) -> tuple[Tensor, AttentionMask]:
        mask = self.weights(self.wq(self.tokens(q_src)), kv_src)
        return self.readout(mask, kv_src), mask


# ---------------------------------------------------------------------------
# mix representations
# ---------------------------------------------------------------------------

class MixBase:
    """Two coupling MLPs, each reading the concatenated latent pair."""

    def __init__(self, registry, group, name, dim, cfg, rng):
        self.mlp_pi = MLP(registry, group, f"{name}.pi", 2 * dim, cfg.base_hidden, dim, rng)
        self.mlp_v = MLP(registry, group, f"{name}.v", 2 * dim, cfg.base_hidden, dim, rng)

    def __call__(self, x_pi, x_v):
        joint = ad.concat([x_pi, x_v], axis=-1)
        return self.mlp_pi(joint), self.mlp_v(joint), None


class MixChannelMixer:
    """Pairs same-index features as tokens, alternately mixing the pair and
    feature axes; each block tightens the coupling."""

    def __init__(self, registry, group, name, dim, cfg, rng):
        self.blocks = []
        for i in range(cfg.mixer_depth):
            pair = Linear(registry, group, f"{name}.b{i}.pair", 2, 2, rng)
            feat = Linear(registry, group, f"{name}.b{i}.feat", dim, dim, rng)
            self.blocks.append((pair, feat))

    def __call__(self, x_pi, x_v):
        x = ad.stack_channels([x_pi, x_v], axis=-1)  # (B, d, 2)
        for pair, feat in self.blocks:
            x = ad.tanh(pair(x))
            x = ad.transpose_last_two(x)  # (B, 2, d)
            x = ad.tanh(feat(x))
            x = ad.transpose_last_two(x)
        return x[..., 0], x[..., 1], None


class MixConv:
    """Stacks the latents as two channels and convolves with per-head kernels."""

    def __init__(self, registry, group, name, dim, cfg, rng):
        self.kernels = []
        k = cfg.conv_kernel
        scale = (2 * k) ** -0.5
        for i in range(cfg.conv_depth):
            kp = registry.register(group, f"{name}.c{i}.pi", Tensor(rng.standard_normal((2, k)) * scale))
            kv = registry.register(group, f"{name}.c{i}.v", Tensor(rng.standard_normal((2, k)) * scale))
            self.kernels.append((kp, kv))

    def __call__(self, x_pi, x_v):
        cur_pi, cur_v = x_pi, x_v
        for i, (kp, kv) in enumerate(self.kernels):
            stacked = ad.stack_channels([cur_pi, cur_v], axis=-2)
            cur_pi = ad.conv1d_2ch(stacked, kp)
            cur_v = ad.conv1d_2ch(stacked, kv)
            if i < len(self.kernels) - 1:
                cur_pi, cur_v = ad.tanh(cur_pi), ad.tanh(cur_v)
        return cur_pi, cur_v, None


class MixCrossAttention:
    """Each mixed latent attends with the opposite latent as its query."""

    def __init__(self, registry, group, name, dim, cfg, rng):
        self.attn = AttentionProjections(registry, group, f"{name}.attn", rng)

    def __call__(self, x_pi, x_v):
        out_pi, _ = self.attn.attend(q_src=x_v, kv_src=x_pi)
        out_v, _ = self.attn.attend(q_src=x_pi, kv_src=x_v)
        return out_pi, out_v, None


# ---------------------------------------------------------------------------
# mask representations
# ---------------------------------------------------------------------------

class MaskBase:
    """Two splitting MLPs over the shared latent; depth-1 splitters start
    at identity plus small noise, so an untrained mask actor-critic behaves
    like the plain shared-backbone network."""

    def __init__(self, registry, group, name, dim, cfg, rng):
        self.mlp_pi = MLP(registry, group, f"{name}.pi", dim, cfg.base_hidden, dim, rng)
        self.mlp_v = MLP(registry, group, f"{name}.v", dim, cfg.base_hidden, dim, rng)
        if not cfg.base_hidden:
            for mlp in (self.mlp_pi, self.mlp_v):
                mlp.layers[0].w.data = np.eye(dim) + cfg.coupling_init * mlp.layers[0].w.data

    def __call__(self, x_s):
        return self.mlp_pi(x_s), self.mlp_v(x_s), None


class MaskSelfAttention:
    def __init__(self, registry, group, name, dim, cfg, rng):
        self.attn_pi = AttentionProjections(registry, group, f"{name}.pi", rng)
        self.attn_v = AttentionProjections(registry, group, f"{name}.v", rng)

    def __call__(self, x_s):
        out_pi, _ = self.attn_pi.attend(x_s, x_s)
        out_v, _ = self.attn_v.attend(x_s, x_s)
        return out_pi, out_v, None


class MaskLatentQuery:
    """Self-attention heads driven by one learnable query shared across them."""

    def __init__(self, registry, group, name, dim, cfg, rng):
        self.attn_pi = AttentionProjections(registry, group, f"{name}.pi", rng, with_query=False)
        self.attn_v = AttentionProjections(registry, group, f"{name}.v", rng, with_query=False)
        init = rng.standard_normal((dim, ATTN_DIM)) / np.sqrt(ATTN_DIM)
        self.query = registry.register(group, f"{name}.query", Tensor(init))

    def __call__(self, x_s):
        mask_pi = self.attn_pi.weights(self.query, x_s)
        mask_v = self.attn_v.weights(self.query, x_s)
        return self.attn_pi.readout(mask_pi, x_s), self.attn_v.readout(mask_v, x_s), None


class MaskSharedInverted:
    """One shared attention module; the value head uses the inverted mask."""

    def __init__(self, registry, group, name, dim, cfg, rng):
        self.attn = AttentionProjections(registry, group, f"{name}.attn", rng)

    def __call__(self, x_s):
        out_pi, mask_pi = self.attn.attend(x_s, x_s)
        mask_v = invert_mask(mask_pi)
        out_v = self.attn.readout(mask_v, x_s)
        return out_pi, out_v, (mask_pi, mask_v)


_MIX_CLASSES = {
    "base_mlp": MixBase,
    "channel_mixer": MixChannelMixer,
    "conv": MixConv,
    "cross_attention": MixCrossAttention,
}

_MASK_CLASSES = {
    "base_mlp": MaskBase,
    "self_attention": MaskSelfAttention,
    "latent_query_attention": MaskLatentQuery,
    "shared_inverted_attention": MaskSharedInverted,
}


# ---------------------------------------------------------------------------
# stochastic heads
# ---------------------------------------------------------------------------

class CovarianceHead:
    """Produces the covariance parameters of a stochastic latent.

    State-independent mode stores an explicit vector; state-dependent mode
    maps the mechanism's input features through a dense layer. The vector
    is a log-std (diagonal) or a Cholesky parameter c (full).
    """

    def __init__(self, registry, group, name, in_dim, out_dim, cov_mode, rng):
        self.cov_mode = cov_mode
        if cov_mode == "state_independent":
            self.param = registry.register(group, f"{name}.covparam", Tensor(np.zeros(out_dim)))
            self.layer = None
        else:
            self.param = None
            self.layer = Linear(registry, group, f"{name}.covmap", in_dim, out_dim, rng, gain=0.1)

    def __call__(self, features: Tensor) -> Tensor:
        if self.cov_mode == "state_independent":
            return self.param
        return self.layer(features)


def stochastic_head(features: Tensor, mu: Tensor, cov_head: CovarianceHead,
                    mode: str) -> GaussianLatent:
    """Assemble a Gaussian latent from a mean and a covariance head output."""
    if mode == "diagonal":
        return GaussianLatent(mu=mu, kind="diagonal", log_std=cov_head(features))
    if mode == "full_cholesky":
        return GaussianLatent(mu=mu, kind="full_cholesky", chol_vec=cov_head(features))
    raise ValueError(f"stochastic_head needs mode diagonal|full_cholesky, got {mode!r}")


# ---------------------------------------------------------------------------
# mechanisms
# ---------------------------------------------------------------------------

@dataclass
class MechOut:
    """Forward products of a mechanism: outputs, optional distributions,
    the reparameterization noise actually used, and attention masks."""

    out_pi: Tensor
    out_v: Tensor
    dist_pi: GaussianLatent | None = None
    dist_v: GaussianLatent | None = None
    noise: tuple[np.ndarray, np.ndarray] | None = None
    masks: tuple[AttentionMask, AttentionMask] | None = None


class _MechanismCore:
    """Shared machinery: representation plus optional stochastic heads."""

    def __init__(self, registry, group, name, dim, cfg, rng, repr_classes, repr_key, cov_in_dim):
        self.cfg = cfg
        self.dim = dim
        self.repr = repr_classes[repr_key](registry, group, name, dim, cfg, rng)
        self.cov_pi = self.cov_v = None
        if cfg.stochastic != "off":
            self.cov_pi = CovarianceHead(registry, group, f"{name}.sigma_pi",
                                         cov_in_dim, dim, cfg.cov_mode, rng)
            self.cov_v = CovarianceHead(registry, group, f"{name}.sigma_v",
                                        cov_in_dim, dim, cfg.cov_mode, rng)

    def _finish(self, mu_pi, mu_v, masks, cov_features, noise, rng):
        if self.cfg.stochastic == "off":
            return MechOut(mu_pi, mu_v, masks=masks)
        dist_pi = stochastic_head(cov_features, mu_pi, self.cov_pi, self.cfg.stochastic)
        dist_v = stochastic_head(cov_features, mu_v, self.cov_v, self.cfg.stochastic)
        if noise is None:
            if rng is None:
                raise ValueError("stochastic mechanism forward needs noise or an rng")
            noise = (rng.standard_normal(mu_pi.shape), rng.standard_normal(mu_v.shape))
        out_pi = dist_pi.sample(noise[0])
        out_v = dist_v.sample(noise[1])
        return MechOut(out_pi, out_v, dist_pi, dist_v, noise, masks)


class MixMechanism(_MechanismCore):
    def __init__(self, registry, cfg, dim, rng, group="mechanism", name="mix"):
        super().__init__(registry, group, name, dim, cfg, rng,
                         _MIX_CLASSES, cfg.mix_repr, cov_in_dim=2 * dim)

    def forward(self, x_pi: Tensor, x_v: Tensor, noise=None, rng=None) -> MechOut:
        if x_pi.shape != x_v.shape:
            raise ShapeError(f"mix inputs must share a shape, got {x_pi.shape} vs {x_v.shape}")
        mu_pi, mu_v, masks = self.repr(x_pi, x_v)
        features = ad.concat([x_pi, x_v], axis=-1) if self.cfg.cov_mode == "state_dependent" else x_pi
        return self._finish(mu_pi, mu_v, masks, features, noise, rng)


class MaskMechanism(_MechanismCore):
    def __init__(self, registry, cfg, dim, rng, group="mechanism", name="mask"):
        super().__init__(registry, group, name, dim, cfg, rng,
                         _MASK_CLASSES, cfg.mask_repr, cov_in_dim=dim)

    def forward(self, x_s: Tensor, noise=None, rng=None) -> MechOut:
        mu_pi, mu_v, masks = self.repr(x_s)
        return self._finish(mu_pi, mu_v, masks, x_s, noise, rng)
