"""Training objectives for the perturbation generator and its critic.

Distances are per-element means, so every loss is independent of image
size.  Models are passed as callables: editors ``sm(x, c)``, translators
``m(z)``, critics ``d(img)`` returning a ``CriticOutput`` (or a bare
realness tensor).
"""

from dataclasses import asdict, dataclass

import torch

from ._validation import ConfigurationError, ShapeError, check_same_shape

PROB_CLAMP = 1e-7


@dataclass
class LossWeights:
    adv: float = 0.01      # lambda, weight of the visual-quality term
    gp: float = 10.0       # lambda_1, gradient penalty
    basic: float = 10.0    # lambda_2
    cycle: float = 2.5     # lambda_3
    domain: float = 1.0    # lambda_4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigurationError(f"loss weight {k} must be >= 0, got {v}")


def l1(a, b):
    return (a - b).abs().mean()


def smooth_l1(a, b, delta=0.01):
    """Charbonnier penalty, mean of sqrt(r^2 + delta^2) - delta.

    Behaves like L1 for residuals well above ``delta`` but has a gradient
    that depends smoothly on the residual.
    """
    if delta <= 0:
        raise ConfigurationError("delta must be > 0")
    return ((a - b).pow(2) + delta ** 2).sqrt().mean() - delta


def _realness(d, img):
    out = d(img)
    out = getattr(out, "realness", out)
    return out.reshape(out.shape[0], -1).mean(dim=1)


def gradient_penalty(d, x, x_prime, u=None, generator=None):
    """Mean of (||grad D(x_hat)||_2 - 1)^2 over interpolants x_hat.

    ``u`` holds one mixing weight per sample; drawn uniformly when omitted.
    """
    if u is None:
        u = torch.rand(x.shape[0], generator=generator, dtype=x.dtype)
    u = u.reshape(-1, *([1] * (x.dim() - 1))).to(x.dtype)
    x_hat = u * x + (1 - u) * x_prime
    if not x_hat.requires_grad:
        x_hat.requires_grad_(True)
    out = _realness(d, x_hat)
    grad, = torch.autograd.grad(out.sum(), x_hat, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_hat)
    norm = torch.linalg.vector_norm(grad.flatten(1), dim=1)
    return (norm - 1).pow(2).mean()


def adversarial_loss(d_b, x, x_prime, mode="critic", *, gp_weight=10.0, u=None, generator=None):
    """WGAN-GP objective on clean versus perturbed images.

    ``mode="critic"`` returns the quantity the critic minimises,
    ``-(E[D(x)] - E[D(x')] - gp_weight * GP)``.  ``mode="generator"``
    returns ``-E[D(x')]``, the only term that depends on the generator.
    Callers detach ``x'`` for critic updates.
    """
    check_same_shape(x, x_prime)
    if x.shape[0] == 0:
        raise ConfigurationError("empty batch")
    if mode == "generator":
        return -_realness(d_b, x_prime).mean()
    if mode != "critic":
        raise ConfigurationError(f"unknown mode {mode!r}")
    diff = _realness(d_b, x).mean() - _realness(d_b, x_prime).mean()
    gp = gradient_penalty(d_b, x, x_prime, u=u, generator=generator)
    return -(diff - gp_weight * gp)


def normalize_domain_weights(distances):
    """Turn per-domain distances into weights summing to one.

    Falls back to uniform weights when every distance is (numerically) zero.
    """
    d = torch.as_tensor(distances, dtype=torch.float64).detach()
    if d.dim() != 1 or d.numel() == 0:
        raise ConfigurationError("need a non-empty vector of domain distances")
    total = d.sum()
    if total < 1e-12:
        return torch.full_like(d, 1.0 / d.numel())
    return d / total


def domain_weights(sm, x, domains):
    """Weights proportional to how far ``sm`` moves ``x`` into each domain."""
    if len(domains) == 0:
        raise ConfigurationError("need at least one target domain")
    with torch.no_grad():
        dists = [l1(x, sm(x, c)) for c in domains]
    return normalize_domain_weights(torch.stack(dists)).to(x.dtype)


def basic_loss(sm, x, x_prime, domains, mu, *, clean_outputs=None):
    """``-sum_j mu_j * L1(SM(x, c_j), SM(x', c_j))``.

    ``clean_outputs`` may carry precomputed ``SM(x, c_j)``; they are always
    treated as constants.
    """
    total = 0.0
    for j, c in enumerate(domains):
        if clean_outputs is not None:
            y = clean_outputs[j].detach()
        else:
            with torch.no_grad():
                y = sm(x, c)
        total = total + mu[j] * l1(y, sm(x_prime, c))
    return -total


def cycle_disruption_loss(sm, x_prime, c, domains, mu, *, edited=None):
    """``-sum_j mu_j * L1(x', SM(SM(x', c_j), c))``."""
    total = 0.0
    for j, cj in enumerate(domains):
        y = edited[j] if edited is not None else sm(x_prime, cj)
        total = total + mu[j] * l1(x_prime, sm(y, c))
    return -total


def binary_cross_entropy(prob, target):
    """Sum over attributes of the clamped binary cross-entropy, batch mean."""
    p = prob.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    ce = -(target * torch.log(p) + (1 - target) * torch.log(1 - p))
    return ce.sum(dim=1).mean()


def domain_confusion_loss(d_a, sm, x_prime, domains, *, edited=None):
    """Push ``SM(x', c_j)`` towards the inverse domain and away from realness.

    Per domain: cross-entropy of the critic's attribute head against
    ``1 - c_j`` plus the raw realness score; averaged over domains.
    """
    total = 0.0
    for j, c in enumerate(domains):
        y = edited[j] if edited is not None else sm(x_prime, c)
        out = d_a(y)
        c = torch.as_tensor(c, dtype=y.dtype)
        if c.dim() == 1:
            c = c.expand(y.shape[0], -1)
        prob = torch.sigmoid(out.domain_logits)
        total = total + binary_cross_entropy(prob, 1 - c) + out.realness.mean()
    return total / len(domains)


def weighted_influence(basic, cycle, domain, weights):
    return weights.basic * basic + weights.cycle * cycle + weights.domain * domain


def editing_influence_terms(sm, d_a, x, x_prime, c, domains, mu=None):
    """The three editing influence terms.

    All domains go through the networks as one stacked batch; every layer
    is per-sample, so this equals evaluating the domains one by one.
    """
    n, J = x.shape[0], len(domains)
    cs = torch.cat([torch.as_tensor(cj, dtype=x.dtype).expand(n, -1) for cj in domains])
    c = torch.as_tensor(c, dtype=x.dtype).expand(n, -1)
    with torch.no_grad():
        clean = sm(x.repeat(J, 1, 1, 1), cs).split(n)
    if mu is None:
        mu = normalize_domain_weights(torch.stack([l1(x, y) for y in clean])).to(x.dtype)
    edited_all = sm(x_prime.repeat(J, 1, 1, 1), cs)
    edited = edited_all.split(n)
    cycled = sm(edited_all, c.repeat(J, 1)).split(n)
    out = d_a(edited_all)
    prob = torch.sigmoid(out.domain_logits).split(n)
    real = out.realness.split(n)
    bs = -sum(mu[j] * l1(clean[j], edited[j]) for j in range(J))
    cyc = -sum(mu[j] * l1(x_prime, cycled[j]) for j in range(J))
    dom = sum(binary_cross_entropy(prob[j], 1 - cs[j * n:(j + 1) * n]) + real[j].mean()
              for j in range(J)) / J
    return {"basic": bs, "cycle": cyc, "domain": dom, "mu": mu}


def influence_loss_editing(sm, d_a, x, x_prime, c, domains, weights=None, mu=None):
    weights = weights or LossWeights()
    t = editing_influence_terms(sm, d_a, x, x_prime, c, domains, mu)
    return weighted_influence(t["basic"], t["cycle"], t["domain"], weights)


def influence_loss_reenactment(sm_x, m_infected, x, z, mask=None):
    """Clean surrogate reconstruction error minus the infected model's.

    The surrogate term is a constant baseline (no gradient).  With ``mask``
    both errors are weighted per pixel before averaging.
    """
    w = 1.0
    if mask is not None:
        if mask.shape[0] != x.shape[0] or mask.shape[2:] != x.shape[2:]:
            raise ShapeError(f"mask shape {tuple(mask.shape)} does not fit images {tuple(x.shape)}")
        w = mask
    with torch.no_grad():
        ref = ((sm_x(z) - x) * w).abs().mean()
    infected = ((m_infected(z) - x) * w).abs().mean()
    return ref - infected


def total_pg_loss(influence, influence_prev, adv_gen, weights=None):
    weights = weights or LossWeights()
    prev = 0.0 if influence_prev is None else influence_prev
    return influence + prev + weights.adv * adv_gen
