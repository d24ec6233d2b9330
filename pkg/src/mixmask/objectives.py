"""Losses and estimators: advantage-weighted policy/value objectives,
similarity and divergence penalties on mechanism latents, and the
contrastive loss against momentum targets.

Penalty terms are computed on re-runs of the mechanism whose inputs are
detached (standard routing: only mechanism parameters learn from them) or
live (auxiliary routing: the trunk preceding the mechanism learns instead).
Statistical measures operate on Gaussian latents; the closed-form pieces
exploit the unit-determinant Cholesky factors, everything mixture-shaped is
estimated by reparameterized Monte Carlo with analytic per-sample
densities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mechanisms import GaussianLatent, MechOut
from .networks import ActorCritic, ForwardOut

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
NORM_FLOOR = 1e-12
STAT_FLOOR = -1e-6


# ---------------------------------------------------------------------------
# return / advantage estimators
# ---------------------------------------------------------------------------

def mc_returns(rewards, gamma: float) -> np.ndarray:
    """Discounted returns G_t = r_{t+1} + gamma * G_{t+1} over one episode."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("mc_returns: empty trajectory")
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Exponentially-weighted advantage: A_t = sum_l (gamma*lam)^l delta_{t+l}.

    `values` carries the terminal bootstrap at index T (zero for finished
    episodes), so delta_t = r_{t+1} + gamma*V(s_{t+1}) - V(s_t).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.size != rewards.size + 1:
        raise ValueError(f"gae: values must have length T+1, got T={rewards.size}, "
                         f"len(values)={values.size}")
    deltas = rewards + gamma * values[1:] - values[:-1]
    out = np.empty_like(deltas)
    acc = 0.0
    for t in range(deltas.size - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        out[t] = acc
    return out


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


# ---------------------------------------------------------------------------
# A2C loss
# ---------------------------------------------------------------------------

def a2c_loss(fwd: ForwardOut, actions: np.ndarray, advantages: np.ndarray,
             returns: np.ndarray, beta: float) -> tuple[Tensor, Tensor, Tensor]:
    """(J_pi, J_v, H): advantage-weighted log-likelihood with entropy bonus,
    and squared-error value regression to the Monte Carlo returns.

    Advantages and returns enter as constants; no gradient flows through
    them into the value path of the policy term.
    """
    n_actions = fwd.probs.shape[-1]
    onehot = np.zeros((len(actions), n_actions))
    onehot[np.arange(len(actions)), actions] = 1.0
    chosen_logp = ad.tsum(ad.mul(fwd.log_probs, Tensor(onehot)), axis=-1)
    entropy = ad.tmean(ad.scale(ad.tsum(ad.mul(fwd.probs, fwd.log_probs), axis=-1), -1.0))
    j_pi = ad.add(ad.scale(ad.tmean(ad.mul(Tensor(advantages), chosen_logp)), -1.0),
                  ad.scale(entropy, -beta))
    err = ad.add(Tensor(returns), ad.scale(fwd.values, -1.0))
    j_v = ad.tmean(ad.mul(err, err))
    return j_pi, j_v, entropy


# ---------------------------------------------------------------------------
# penalty measures
# ---------------------------------------------------------------------------

def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Batch-mean cosine similarity with a 1e-12 floor on the norms."""
    if a.shape != b.shape:
        raise ad.ShapeError(f"cosine: shapes {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    if (na < NORM_FLOOR).any() or (nb < NORM_FLOOR).any():
        log.warning("cosine similarity saw a zero-norm latent; norm floored at %.0e", NORM_FLOOR)
    dot = ad.tsum(ad.mul(a, b), axis=-1)
    norm_a = ad.powc(ad.tsum(ad.mul(a, a), axis=-1) + Tensor(NORM_FLOOR ** 2), 0.5)
    norm_b = ad.powc(ad.tsum(ad.mul(b, b), axis=-1) + Tensor(NORM_FLOOR ** 2), 0.5)
    cos = ad.mul(dot, ad.powc(ad.mul(norm_a, norm_b), -1.0))
    return ad.tmean(cos)


def _bshape(t: Tensor, d: int) -> Tensor:
    """Reshape (B, d) to (B, 1, d) so it broadcasts against (B, S, d) draws."""
    return ad.reshape(t, (-1, 1, d)) if t.ndim > 1 else t


def _log_density(z: Tensor, dist: GaussianLatent) -> Tensor:
    """Analytic log N(z; mu, Sigma) for (B, S, d) points, summed over d.

    Full-covariance factors have unit diagonal, so log|Sigma| = 0 there.
    """
    d = dist.mu.shape[-1]
    mu = _bshape(dist.mu, d)
    diff = ad.add(z, ad.scale(mu, -1.0))
    if dist.kind == "diagonal":
        ls = _bshape(dist.log_std, d)
        scaled = ad.mul(diff, ad.exp(ad.scale(ls, -1.0)))
        qf = ad.tsum(ad.mul(scaled, scaled), axis=-1)
        logdet = ad.scale(ad.tsum(ls, axis=-1), 2.0)
        return ad.scale(ad.add(ad.add(qf, logdet), Tensor(d * LOG_2PI)), -0.5)
    L = dist.chol_factor()
    if L.ndim == 2:
        flat = ad.reshape(diff, (-1, d))
        u = ad.tri_solve(L, ad.transpose_last_two(flat), trans=True)
        qf = ad.reshape(ad.tsum(ad.mul(u, u), axis=0), z.shape[:-1])
    else:
        rows = []
        n_b = z.shape[0]
        for t in range(n_b):
            Lt = L[t]
            diff_t = ad.reshape(diff[t], (-1, d))
            u = ad.tri_solve(Lt, ad.transpose_last_two(diff_t), trans=True)
            rows.append(ad.reshape(ad.tsum(ad.mul(u, u), axis=0), (1, -1)))
        qf = ad.concat(rows, axis=0)
    return ad.scale(ad.add(qf, Tensor(d * LOG_2PI)), -0.5)


def _draw(dist: GaussianLatent, n_samples: int, rng: np.random.Generator) -> Tensor:
    """Reparameterized (B, S, d) draws from a batch of Gaussians."""
    d = dist.mu.shape[-1]
    batch = dist.mu.shape[0] if dist.mu.ndim > 1 else 1
    eps = rng.standard_normal((batch, n_samples, d))
    mu = _bshape(dist.mu, d)
    if dist.kind == "diagonal":
        return ad.add(mu, ad.mul(ad.exp(_bshape(dist.log_std, d)), Tensor(eps)))
    L = dist.chol_factor()
    return ad.add(mu, ad.matmul(Tensor(eps), L))


def gaussian_kl(p: GaussianLatent, q: GaussianLatent) -> Tensor:
    """Closed-form KL(P || Q) averaged over the batch axis."""
    if p.kind != q.kind:
        raise ValueError("gaussian_kl requires matching covariance kinds")
    d = p.mu.shape[-1]
    diff = ad.add(q.mu, ad.scale(p.mu, -1.0))
    if p.kind == "diagonal":
        lsp, lsq = p.log_std, q.log_std
        ratio = ad.exp(ad.scale(ad.add(lsp, ad.scale(lsq, -1.0)), 2.0))
        maha = ad.mul(ad.mul(diff, diff), ad.exp(ad.scale(lsq, -2.0)))
        inner = ad.add(ad.add(ratio, maha), ad.scale(ad.add(lsq, ad.scale(lsp, -1.0)), 2.0))
        per = ad.add(ad.tsum(inner, axis=-1), Tensor(-float(d)))
        return ad.scale(ad.tmean(per) if per.ndim > 0 else per, 0.5)
    lp_f, lq_f = p.chol_factor(), q.chol_factor()
    if lp_f.ndim != 2 or lq_f.ndim != 2:
        raise ValueError("closed-form full-covariance KL supports shared (state-independent) factors only")
    # tr(Sigma_q^-1 Sigma_p) = ||L_p L_q^-T||_F^2; log-det ratio vanishes (unit diagonals)
    y = ad.tri_solve(lq_f, ad.transpose_last_two(lp_f), trans=True)
    tr = ad.tsum(ad.mul(y, y))
    diff2 = diff if diff.ndim > 1 else ad.reshape(diff, (1, d))
    u = ad.tri_solve(lq_f, ad.transpose_last_two(diff2), trans=True)
    maha = ad.tmean(ad.tsum(ad.mul(u, u), axis=0))
    return ad.scale(ad.add(ad.add(tr, maha), Tensor(-float(d))), 0.5)


def j_divergence(p: GaussianLatent, q: GaussianLatent) -> Tensor:
    """Symmetrized relative information: (KL(P||Q) + KL(Q||P)) / 2."""
    return ad.scale(ad.add(gaussian_kl(p, q), gaussian_kl(q, p)), 0.5)


def _floor_stat(est: Tensor) -> Tensor:
    if float(est.data) < STAT_FLOOR:
        return Tensor(STAT_FLOOR)
    return est


def _mixture_terms(p, q, mc_samples, rng):
    """Per-side draws and the three log densities each, for JS-type measures."""
    zp = _draw(p, mc_samples, rng)
    zq = _draw(q, mc_samples, rng)
    lp_zp, lq_zp = _log_density(zp, p), _log_density(zp, q)
    lp_zq, lq_zq = _log_density(zq, p), _log_density(zq, q)
    ln2 = Tensor(np.log(2.0))
    lm_zp = ad.add(ad.logaddexp(lp_zp, lq_zp), ad.scale(ln2, -1.0))
    lm_zq = ad.add(ad.logaddexp(lp_zq, lq_zq), ad.scale(ln2, -1.0))
    return lp_zp, lq_zp, lm_zp, lp_zq, lq_zq, lm_zq


def info_radius(p: GaussianLatent, q: GaussianLatent, mc_samples: int,
                rng: np.random.Generator) -> Tensor:
    """Monte Carlo Jensen-Shannon-type radius: (KL(P||M) + KL(Q||M)) / 2
    with M the even mixture of P and Q."""
    lp_zp, _, lm_zp, _, lq_zq, lm_zq = _mixture_terms(p, q, mc_samples, rng)
    kl_pm = ad.tmean(ad.add(lp_zp, ad.scale(lm_zp, -1.0)))
    kl_qm = ad.tmean(ad.add(lq_zq, ad.scale(lm_zq, -1.0)))
    return _floor_stat(ad.scale(ad.add(kl_pm, kl_qm), 0.5))


def ag_divergence(p: GaussianLatent, q: GaussianLatent, mc_samples: int,
                  rng: np.random.Generator) -> Tensor:
    """Monte Carlo arithmetic-geometric divergence: (KL(M||P) + KL(M||Q)) / 2.

    Expectations under the mixture M average the per-side draws evenly.
    """
    lp_zp, lq_zp, lm_zp, lp_zq, lq_zq, lm_zq = _mixture_terms(p, q, mc_samples, rng)
    kl_mp = ad.scale(ad.add(ad.tmean(ad.add(lm_zp, ad.scale(lp_zp, -1.0))),
                            ad.tmean(ad.add(lm_zq, ad.scale(lp_zq, -1.0)))), 0.5)
    kl_mq = ad.scale(ad.add(ad.tmean(ad.add(lm_zp, ad.scale(lq_zp, -1.0))),
                            ad.tmean(ad.add(lm_zq, ad.scale(lq_zq, -1.0)))), 0.5)
    return _floor_stat(ad.scale(ad.add(kl_mp, kl_mq), 0.5))


def penalty(measure: str, a, b, *, mc_samples: int = 256,
            rng: np.random.Generator | None = None) -> Tensor:
    """Dispatch a penalty measure over deterministic or Gaussian latents."""
    if measure == "cosine":
        return cosine_similarity(a, b)
    if measure == "j_divergence":
        return j_divergence(a, b)
    if rng is None:
        raise ValueError(f"measure {measure!r} needs an rng for Monte Carlo draws")
    if measure == "info_radius":
        return info_radius(a, b, mc_samples, rng)
    if measure == "ag_divergence":
        return ag_divergence(a, b, mc_samples, rng)
    raise ValueError(f"unknown penalty measure: {measure!r}")


# ---------------------------------------------------------------------------
# contrastive loss
# ---------------------------------------------------------------------------

def contrastive_loss(q: Tensor, k_plus: Tensor, k_minus: Tensor, w: Tensor) -> Tensor:
    """Cross entropy with the positive as the true class over the bilinear
    logits (qWk+, qWk-), max-shifted for stability; batch mean."""
    qw = ad.matmul(q, w) if q.ndim > 1 else ad.reshape(ad.matmul(ad.reshape(q, (1, -1)), w), (-1,))
    s_plus = ad.tsum(ad.mul(qw, k_plus), axis=-1)
    s_minus = ad.tsum(ad.mul(qw, k_minus), axis=-1)
    delta = ad.add(s_minus, ad.scale(s_plus, -1.0))  # -(s+ - s-)
    zero = Tensor(np.zeros_like(delta.data))
    losses = ad.logaddexp(zero, delta)
    return ad.tmean(losses) if losses.ndim > 0 else losses


# ---------------------------------------------------------------------------
# total objective with routing
# ---------------------------------------------------------------------------

@dataclass
class LossBundle:
    """Scalar loss pieces plus the combined total whose backward produces
    exactly the routed gradients."""

    j_pi: Tensor
    j_v: Tensor
    entropy: Tensor
    main_pi: Tensor  # scalarized or raw policy cost
    main_v: Tensor
    penalty_terms: dict[str, Tensor] = field(default_factory=dict)
    contrastive_terms: dict[str, Tensor] = field(default_factory=dict)
    alpha_s: float = 0.0
    alpha_d: float = 0.0
    total: Tensor | None = None
    extra: Tensor | None = None  # weighted penalty + contrastive sum

    def components(self) -> dict[str, float]:
        out = {
            "j_pi": float(self.j_pi.data),
            "j_v": float(self.j_v.data),
            "entropy": float(self.entropy.data),
            "alpha_s": self.alpha_s,
            "alpha_d": self.alpha_d,
        }
        for name, t in self.penalty_terms.items():
            out[f"penalty_{name}"] = float(t.data)
        for name, t in self.contrastive_terms.items():
            out[f"contrastive_{name}"] = float(t.data)
        return out


def _mechanism_penalty(net: ActorCritic, trace, name: str, measure: str,
                       mc_samples: int, rng) -> Tensor:
    """Raw measure value for one mechanism, with standard/auxiliary routing."""
    aux = net.config.mechanism.auxiliary
    view = net.mechanism_view(name, trace, detach_inputs=not aux)
    if net.config.mechanism.stochastic == "off":
        return cosine_similarity(view.out_pi, view.out_v)
    return penalty(measure, view.dist_pi, view.dist_v, mc_samples=mc_samples, rng=rng)


def _mechanism_contrastive(net: ActorCritic, trace, name: str, rng) -> Tensor:
    """Contrastive loss of one mechanism against its momentum targets.

    Mix anchors pair with the *opposing* momentum positives (pulling the
    coupled latents together); mask anchors pair with their own momentum
    positives (pushing the decoupled latents apart).
    """
    aux = net.config.mechanism.auxiliary
    stochastic = net.config.mechanism.stochastic != "off"
    mech_rng = rng if stochastic else None
    live = net.mechanism_view(name, trace, detach_inputs=not aux, rng=mech_rng)
    mom = net.mechanism_view(name, trace, detach_inputs=True, use_momentum=True, rng=mech_rng)
    w = net.bilinear[name]
    tp, tv = mom.out_pi.detach(), mom.out_v.detach()
    if name == "mix":
        c1 = contrastive_loss(live.out_pi, tv, tp, w)
        c2 = contrastive_loss(live.out_v, tp, tv, w)
    else:
        c1 = contrastive_loss(live.out_pi, tp, tv, w)
        c2 = contrastive_loss(live.out_v, tv, tp, w)
    return ad.add(c1, c2)


def total_objective(net: ActorCritic, fwd: ForwardOut, actions, advantages, returns, *,
                    beta: float, step: int, scalarizer=None,
                    mc_rng: np.random.Generator | None = None,
                    value_coef: float = 1.0) -> LossBundle:
    """Assemble the full scalar loss with per-group gradient routing.

    The similarity term on mixed latents is maximized (enters negated when
    the measure itself is a similarity, un-negated when it is a divergence);
    the divergence term on masked latents is maximized with the opposite
    signs. Temperatures decay as alpha_0 * tau^step.
    """
    j_pi, j_v, entropy = a2c_loss(fwd, actions, advantages, returns, beta)
    mcfg = net.config.mechanism
    bundle = LossBundle(j_pi=j_pi, j_v=j_v, entropy=entropy, main_pi=j_pi, main_v=j_v)

    if scalarizer is not None:
        from .multiobj import scalarize_terms
        bundle.main_pi, bundle.main_v = scalarize_terms(j_pi, j_v, scalarizer)
    elif value_coef != 1.0:
        bundle.main_v = ad.scale(j_v, value_coef)

    terms = []
    if mcfg is not None:
        alpha_s = mcfg.alpha_s * mcfg.tau ** step
        alpha_d = mcfg.alpha_d * mcfg.tau ** step
        bundle.alpha_s, bundle.alpha_d = alpha_s, alpha_d
        measure_is_similarity = mcfg.stochastic == "off"  # cosine vs divergence
        for name in net.mechanisms:
            alpha = alpha_s if name == "mix" else alpha_d
            if mcfg.contrastive:
                if alpha == 0.0:
                    with ad.no_grad():
                        bundle.contrastive_terms[name] = _mechanism_contrastive(
                            net, fwd.trace, name, mc_rng)
                    continue
                closs = _mechanism_contrastive(net, fwd.trace, name, mc_rng)
                bundle.contrastive_terms[name] = closs
                terms.append(ad.scale(closs, alpha))
                continue
            if alpha == 0.0:
                # value still logged, but no gradient contribution
                with ad.no_grad():
                    bundle.penalty_terms[name] = _mechanism_penalty(
                        net, fwd.trace, name, mcfg.penalty_measure, mcfg.mc_samples, mc_rng)
                continue
            value = _mechanism_penalty(net, fwd.trace, name, mcfg.penalty_measure,
                                       mcfg.mc_samples, mc_rng)
            bundle.penalty_terms[name] = value
            want_similar = name == "mix"
            maximize_value = want_similar == measure_is_similarity
            sign = -1.0 if maximize_value else 1.0
            terms.append(ad.scale(value, sign * alpha))

    total = ad.add(bundle.main_pi, bundle.main_v)
    if terms:
        extra = terms[0]
        for t in terms[1:]:
            extra = ad.add(extra, t)
        bundle.extra = extra
        total = ad.add(total, extra)
    bundle.total = total
    return bundle
