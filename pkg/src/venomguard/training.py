"""Alternating two-stage training of the perturbation generator.

Every iteration first updates the surrogate on clean data (Stage A) and
then updates the perturbation generator against it (Stage B).  The
generator snapshot with the largest probe distance is kept as ``pg_best``.
"""

import csv
import io
import itertools
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch.nn import functional as F

from . import losses
from ._validation import ConfigurationError, TrainingAbort
from .dataio import ATTRIBUTES
from .models import ArchitectureTag, build, clip_to_budget, clone_handle, copy_parameters, perturb, to_tensor

log = logging.getLogger(__name__)

TASKS = ("attribute_editing", "reenactment")
DEFAULT_LR = {"attribute_editing": 1e-4, "reenactment": 2e-4}
BETAS = (0.5, 0.999)

# attribute groups toggled together when deriving target domains
TOGGLE_GROUPS = ("hair", "eyeglasses", "smiling", "pale_skin")

HISTORY_COLUMNS = ("step", "distance", "maxdist", "loss_sm", "loss_critic", "loss_pg",
                   "influence", "influence_prev", "adv_gen")


@dataclass
class TrainConfig:
    task: str = "attribute_editing"
    maxiter: int = 3000
    batch_size: int = 8
    lr_pg: float = None
    lr_sm: float = None
    epsilon: float = 0.05
    domains_per_sample: int = 5
    n_critic: int = 1
    unroll_steps: int = 1
    unroll_lr: float = 1.0
    unroll_delta: float = 0.01
    enhancement: bool = True
    alternating: bool = True
    pretrain_steps: int = None
    seed: int = 0
    surrogate_arch: str = None
    generator_arch: str = "UNet128"
    width: int = None
    probe_size: int = 16
    probe_every: int = 1
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = losses.LossWeights(**self.weights)
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.maxiter < 1:
            raise ConfigurationError("maxiter must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 < self.epsilon <= 0.1:
            raise ConfigurationError(f"epsilon must lie in (0, 0.1], got {self.epsilon}")
        if not 1 <= self.domains_per_sample <= 2 ** len(ATTRIBUTES) - 1:
            raise ConfigurationError("domains_per_sample must lie in [1, 2^K - 1]")
        if self.n_critic < 1 or self.unroll_steps < 0:
            raise ConfigurationError("n_critic must be >= 1 and unroll_steps >= 0")
        if self.lr_pg is None:
            self.lr_pg = DEFAULT_LR[self.task]
        if self.lr_sm is None:
            self.lr_sm = DEFAULT_LR[self.task]
        if self.surrogate_arch is None:
            self.surrogate_arch = "Res6" if self.task == "attribute_editing" else "UNet256"
        if self.pretrain_steps is None:
            self.pretrain_steps = self.maxiter

    def to_dict(self):
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# -- target domains ----------------------------------------------------------

def _group_indices(group, attributes):
    if group == "hair":
        return [i for i, a in enumerate(attributes) if a in ("blond_hair", "black_hair")]
    return [i for i, a in enumerate(attributes) if a == group]


def available_groups(attributes=ATTRIBUTES):
    return [g for g in TOGGLE_GROUPS if _group_indices(g, attributes)]


def apply_toggles(labels, groups, attributes=ATTRIBUTES):
    """Flip the bits of every attribute group in ``groups``.

    Flipping the hair group swaps blond and black, so exactly one hair
    colour stays active.
    """
    out = np.array(labels, dtype=np.float32, copy=True)
    for g in groups:
        for i in _group_indices(g, attributes):
            out[..., i] = 1 - out[..., i]
    return out


def toggle_combinations(attributes=ATTRIBUTES):
    groups = available_groups(attributes)
    combos = []
    for r in range(1, len(groups) + 1):
        combos.extend(itertools.combinations(groups, r))
    return combos


def sample_domain_toggles(rng, count, attributes=ATTRIBUTES):
    """Pick ``count`` distinct toggle sets; hair and glasses changes come first."""
    combos = toggle_combinations(attributes)
    first = [c for c in (("hair",), ("eyeglasses",)) if c in combos]
    rest = [c for c in combos if c not in first]
    count = min(count, len(combos))
    chosen = first[:count]
    if count > len(chosen):
        pick = rng.choice(len(rest), size=count - len(chosen), replace=False)
        chosen += [rest[i] for i in sorted(pick)]
    return chosen


def evaluation_toggles(attributes=ATTRIBUTES):
    """Fixed domain set used for probes and reports: one flip per group."""
    return [(g,) for g in available_groups(attributes)]


# -- state -------------------------------------------------------------------

def _adam(handle, lr):
    return torch.optim.Adam(handle.parameters(), lr=lr, betas=BETAS)


def _finite(name, value):
    v = float(value.detach() if torch.is_tensor(value) else value)
    if not math.isfinite(v):
        raise TrainingAbort(f"non-finite {name} loss ({v})")
    return v


def _set_requires_grad(handle, flag):
    for p in handle.parameters():
        p.requires_grad_(flag)


def parameter_hash(handle):
    """Cheap fingerprint used to assert which models a step touched."""
    import hashlib
    h = hashlib.sha1()
    for p in handle.parameters():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainState:
    config: TrainConfig
    sm: object
    pg: object
    d_b: object
    d_a: object = None
    tm: object = None
    pg_best: object = None
    step: int = 0
    maxdist: float = -math.inf
    history: list = field(default_factory=list)
    optimizers: dict = field(default_factory=dict)
    rng: np.random.Generator = None
    torch_rng: torch.Generator = None
    probe: dict = None


def init_state(config, data):
    """Build all models and optimisers for ``config`` from seeded init."""
    s = config.seed
    res = data.images.shape[1]
    k = data.labels.shape[1]
    if config.task == "attribute_editing":
        sm = build(ArchitectureTag(config.surrogate_arch, "attribute-broadcast"), "SM", s + 1,
                   n_attributes=k, resolution=res, width=config.width)
        d_a = build("Critic", "D_A", s + 2, n_attributes=k, resolution=res)
        tm = None
    else:
        sm = build(ArchitectureTag(config.surrogate_arch, "landmark-concat"), "SM", s + 1,
                   resolution=res, width=config.width)
        d_a = None
        tm = build(ArchitectureTag(config.surrogate_arch, "landmark-concat"), "TM", s + 5,
                   resolution=res, width=config.width)
    pg = build(ArchitectureTag(config.generator_arch, "none"), "PG", s + 3, resolution=res)
    d_b = build("Critic", "D_B", s + 4, n_attributes=0, resolution=res)
    state = TrainState(config=config, sm=sm, pg=pg, d_b=d_b, d_a=d_a, tm=tm)
    state.pg_best = clone_handle(pg)
    state.optimizers = {"sm": _adam(sm, config.lr_sm), "pg": _adam(pg, config.lr_pg),
                        "d_b": _adam(d_b, config.lr_pg)}
    if d_a is not None:
        state.optimizers["d_a"] = _adam(d_a, config.lr_sm)
    if tm is not None:
        state.optimizers["tm"] = _adam(tm, config.lr_sm)
    state.rng = np.random.default_rng(s)
    state.torch_rng = torch.Generator().manual_seed(s)
    n = len(data)
    if n == 0:
        raise ConfigurationError("empty dataset")
    probe_idx = np.arange(min(config.probe_size, n))
    state.probe = _batch(config, data, probe_idx)
    return state


def _batch(config, data, idx):
    b = {"x": to_tensor(data.images[idx]), "c": torch.from_numpy(data.labels[idx].copy())}
    if config.task == "reenactment":
        b["z"] = to_tensor(data.landmarks[idx])
        b["mask"] = to_tensor(data.masks[idx])
    b["labels_np"] = data.labels[idx]
    return b


def sample_batch(state, data):
    n = len(data)
    size = min(state.config.batch_size, n)
    idx = np.sort(state.rng.choice(n, size=size, replace=False))
    return _batch(state.config, data, idx)


def _domains(labels_np, toggles):
    return [torch.from_numpy(apply_toggles(labels_np, t)) for t in toggles]


# -- Stage A -----------------------------------------------------------------

def classification_loss(logits, target):
    return F.binary_cross_entropy_with_logits(logits, target, reduction="sum") / logits.size(0)


def editor_update(sm, d_a, opt_sm, opt_d, x, c_org, c_trg, config, torch_rng):
    """One StarGAN-style critic update followed by one editor update."""
    gp_w = config.weights.gp
    out_real = d_a(x)
    with torch.no_grad():
        fake = sm(x, c_trg)
    d_loss = (-out_real.realness.mean() + d_a(fake).realness.mean()
              + config.lambda_cls * classification_loss(out_real.domain_logits, c_org)
              + gp_w * losses.gradient_penalty(d_a, x, fake, generator=torch_rng))
    opt_d.zero_grad()
    d_loss.backward()
    opt_d.step()

    _set_requires_grad(d_a, False)
    fake = sm(x, c_trg)
    out_fake = d_a(fake)
    rec = sm(fake, c_org)
    g_loss = (-out_fake.realness.mean()
              + config.lambda_cls * classification_loss(out_fake.domain_logits, c_trg)
              + config.lambda_rec * losses.l1(x, rec))
    opt_sm.zero_grad()
    g_loss.backward()
    opt_sm.step()
    _set_requires_grad(d_a, True)
    return _finite("surrogate", g_loss), _finite("critic", d_loss)


def translator_update(m, opt, z, x):
    loss = losses.l1(m(z), x)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return _finite("translator", loss)


def stage_a_step_editing(state, batch):
    """Train the surrogate editor on clean data; PG is never touched."""
    if state.config.task != "attribute_editing":
        raise ConfigurationError("stage_a_step_editing needs the attribute_editing task")
    x, c = batch["x"], batch["c"]
    perm = torch.from_numpy(state.rng.permutation(x.shape[0]))
    c_trg = c[perm]
    _set_requires_grad(state.pg, False)
    try:
        g, d = editor_update(state.sm, state.d_a, state.optimizers["sm"], state.optimizers["d_a"],
                             x, c, c_trg, state.config, state.torch_rng)
    finally:
        _set_requires_grad(state.pg, True)
    return {"loss_sm": g, "loss_sm_critic": d}


def stage_a_step_reenactment(state, batch):
    return {"loss_sm": translator_update(state.sm, state.optimizers["sm"], batch["z"], batch["x"])}


# -- Stage B -----------------------------------------------------------------

def _critic_update(state, x, x_prime):
    opt = state.optimizers["d_b"]
    loss = None
    for _ in range(state.config.n_critic):
        loss = losses.adversarial_loss(state.d_b, x, x_prime.detach(), "critic",
                                       gp_weight=state.config.weights.gp, generator=state.torch_rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return _finite("critic", loss)


def _pg_update(state, total):
    opt = state.optimizers["pg"]
    opt.zero_grad()
    total.backward()
    opt.step()


def stage_b_step_editing(state, batch, sm_prev=None, d_a_prev=None):
    """One critic update and one PG update against the current surrogate.

    With enhancement the influence against ``sm_prev`` (the surrogate
    before this iteration's Stage A) is added to the objective.
    """
    cfg = state.config
    x, c = batch["x"], batch["c"]
    toggles = sample_domain_toggles(state.rng, cfg.domains_per_sample)
    domains = _domains(batch["labels_np"], toggles)

    with torch.no_grad():
        x_prime = perturb(state.pg, x, cfg.epsilon)
    _set_requires_grad(state.pg, False)
    loss_critic = _critic_update(state, x, x_prime)
    _set_requires_grad(state.pg, True)

    frozen = [m for m in (state.sm, state.d_a, state.d_b, sm_prev, d_a_prev) if m is not None]
    for m in frozen:
        _set_requires_grad(m, False)
    try:
        x_prime = perturb(state.pg, x, cfg.epsilon)
        terms = losses.editing_influence_terms(state.sm, state.d_a, x, x_prime, c, domains)
        influence = losses.weighted_influence(terms["basic"], terms["cycle"], terms["domain"], cfg.weights)
        influence_prev = None
        if cfg.enhancement and sm_prev is not None:
            prev = losses.editing_influence_terms(sm_prev, d_a_prev, x, x_prime, c, domains)
            influence_prev = losses.weighted_influence(prev["basic"], prev["cycle"], prev["domain"], cfg.weights)
        adv = losses.adversarial_loss(state.d_b, x, x_prime, "generator")
        total = losses.total_pg_loss(influence, influence_prev, adv, cfg.weights)
        _finite("generator", total)
        _pg_update(state, total)
    finally:
        for m in frozen:
            _set_requires_grad(m, True)
    return {"loss_critic": loss_critic, "loss_pg": float(total.detach()), "influence": float(influence.detach()),
            "influence_prev": float("nan") if influence_prev is None else float(influence_prev.detach()),
            "adv_gen": float(adv.detach())}


def unrolled_parameters(tm, z, target, steps, lr, create_graph=True, delta=0.01):
    """Parameters of ``tm`` after ``steps`` SGD steps towards ``target``.

    The simulated objective is a smoothed L1 (see ``losses.smooth_l1``):
    the gradient of plain L1 only sees the sign of the residual, so the
    updated parameters would not depend on ``target`` at all.  With
    ``create_graph`` the result stays differentiable w.r.t. ``target``.
    """
    params = {k: v.detach().clone().requires_grad_(True) for k, v in tm.net.named_parameters()}
    for _ in range(steps):
        loss = losses.smooth_l1(tm(z, params=params), target, delta)
        grads = torch.autograd.grad(loss, list(params.values()), create_graph=create_graph)
        params = {k: p - lr * g for (k, p), g in zip(params.items(), grads)}
    return params


def reenactment_influence(state, x, z, x_prime, mask=None, steps=None):
    cfg = state.config
    steps = cfg.unroll_steps if steps is None else steps
    params = unrolled_parameters(state.tm, z, x_prime, steps, cfg.unroll_lr, delta=cfg.unroll_delta)
    return losses.influence_loss_reenactment(state.sm, lambda zz: state.tm(zz, params=params), x, z, mask)


def stage_b_step_reenactment(state, batch):
    """PG update through a differentiable unrolled copy of the temporary model.

    Afterwards the persistent temporary model takes one ordinary step on
    the detached poisoned frames, like the forger's own training would.
    """
    cfg = state.config
    x, z = batch["x"], batch["z"]
    mask = batch["mask"] if cfg.enhancement else None

    with torch.no_grad():
        x_prime = perturb(state.pg, x, cfg.epsilon)
    _set_requires_grad(state.pg, False)
    loss_critic = _critic_update(state, x, x_prime)
    _set_requires_grad(state.pg, True)

    frozen = (state.sm, state.d_b)
    for m in frozen:
        _set_requires_grad(m, False)
    try:
        x_prime = perturb(state.pg, x, cfg.epsilon)
        influence = reenactment_influence(state, x, z, x_prime, mask)
        adv = losses.adversarial_loss(state.d_b, x, x_prime, "generator")
        total = losses.total_pg_loss(influence, None, adv, cfg.weights)
        _finite("generator", total)
        _pg_update(state, total)
    finally:
        for m in frozen:
            _set_requires_grad(m, True)

    translator_update(state.tm, state.optimizers["tm"], z, x_prime.detach())
    return {"loss_critic": loss_critic, "loss_pg": float(total.detach()), "influence": float(influence.detach()),
            "influence_prev": float("nan"), "adv_gen": float(adv.detach())}


# -- probe distance ----------------------------------------------------------

def probe_distance(state):
    """D(y, y') on the fixed validation probe with the current PG.

    Editing: mean L2 (per-element squared error) over the probe domains.
    Reenactment: mean L1 between the surrogate's and a one-step-infected
    temporary model's reconstructions.
    """
    cfg = state.config
    p = state.probe
    with torch.no_grad():
        x_prime = perturb(state.pg, p["x"], cfg.epsilon)
    if cfg.task == "attribute_editing":
        domains = _domains(p["labels_np"], evaluation_toggles())
        n, J = p["x"].shape[0], len(domains)
        cs = torch.cat(domains)
        with torch.no_grad():
            y = state.sm(torch.cat([p["x"].repeat(J, 1, 1, 1), x_prime.repeat(J, 1, 1, 1)]), cs.repeat(2, 1))
        return float(((y[:n * J] - y[n * J:]) ** 2).mean())
    params = unrolled_parameters(state.tm, p["z"], x_prime, max(cfg.unroll_steps, 1), cfg.unroll_lr,
                                 create_graph=False, delta=cfg.unroll_delta)
    with torch.no_grad():
        return float((state.sm(p["z"]) - state.tm(p["z"], params=params)).abs().mean())


# -- the loop ----------------------------------------------------------------

def _snapshot_prev(state):
    if not (state.config.task == "attribute_editing" and state.config.enhancement):
        return None, None
    return clone_handle(state.sm), clone_handle(state.d_a)


def iterate(state, data):
    """One iteration of the alternating loop (or a PG-only step without it)."""
    cfg = state.config
    batch = sample_batch(state, data)
    record = {"loss_sm": float("nan")}
    editing = cfg.task == "attribute_editing"
    sm_prev, d_a_prev = _snapshot_prev(state)
    if cfg.alternating:
        a = stage_a_step_editing(state, batch) if editing else stage_a_step_reenactment(state, batch)
        record["loss_sm"] = a["loss_sm"]
    if editing:
        record.update(stage_b_step_editing(state, batch, sm_prev, d_a_prev))
    else:
        record.update(stage_b_step_reenactment(state, batch))
    state.step += 1
    if state.step % cfg.probe_every and state.step != cfg.maxiter:
        record.update(step=state.step, distance=float("nan"), maxdist=state.maxdist)
        state.history.append(record)
        return record
    dist = probe_distance(state)
    if state.maxdist < dist:
        state.maxdist = dist
        copy_parameters(state.pg, state.pg_best)
        state.pg_best.step = state.step
    record.update(step=state.step, distance=dist, maxdist=state.maxdist)
    state.history.append(record)
    return record


def pretrain_surrogate(state, data, steps):
    """Train the surrogate alone (used when alternating training is off)."""
    editing = state.config.task == "attribute_editing"
    for _ in range(steps):
        batch = sample_batch(state, data)
        if editing:
            stage_a_step_editing(state, batch)
        else:
            stage_a_step_reenactment(state, batch)


def run_two_stage(config, data, *, run_dir=None, resume=False, checkpoint_every=0, log_every=0):
    """Train a perturbation generator and return ``(pg_best, state, history)``.

    ``data`` is a ``FaceArrays`` holding the defense-train split.  With
    ``run_dir`` the history, checkpoints and resumable state are written
    there; ``resume`` continues from the latest saved state.
    """
    if data is None or len(data) == 0:
        raise ConfigurationError("empty dataset")
    state = None
    if resume and run_dir is not None:
        state = load_state(run_dir, data)
        if state is not None:
            # an interrupted run may be extended past its original horizon
            state.config.maxiter = config.maxiter
    if state is None:
        state = init_state(config, data)
        if not config.alternating:
            pretrain_surrogate(state, data, config.pretrain_steps)
    while state.step < config.maxiter:
        rec = iterate(state, data)
        if log_every and state.step % log_every == 0:
            log.info("step %d  D=%.5f  maxdist=%.5f  pg=%.4f", state.step, rec["distance"],
                     state.maxdist, rec["loss_pg"])
        if run_dir is not None and checkpoint_every and state.step % checkpoint_every == 0:
            save_state(state, run_dir)
    if run_dir is not None:
        save_state(state, run_dir)
        write_history(state.history, os.path.join(run_dir, "history.csv"))
    return state.pg_best, state, state.history


# -- persistence of runs -----------------------------------------------------

def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for rec in history:
        w.writerow([rec["step"]] + [repr(float(rec.get(k, float("nan")))) for k in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def write_history(history, path):
    with open(path, "w") as f:
        f.write(history_csv(history))


def read_history(path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def _models(state):
    out = {"SM": state.sm, "PG": state.pg, "D_B": state.d_b, "PG_best": state.pg_best}
    if state.d_a is not None:
        out["D_A"] = state.d_a
    if state.tm is not None:
        out["TM"] = state.tm
    return out


def save_state(state, run_dir):
    """Write per-role checkpoints plus everything needed to resume exactly."""
    from .models import save_checkpoint
    os.makedirs(run_dir, exist_ok=True)
    for role, handle in _models(state).items():
        save_checkpoint(handle, os.path.join(run_dir, f"{role.lower()}_{state.step}.ckpt"), step=state.step)
    save_checkpoint(state.pg_best, os.path.join(run_dir, "pg_best.ckpt"), step=state.pg_best.step)
    blob = {
        "step": state.step,
        "maxdist": state.maxdist,
        "history": state.history,
        "models": {r: {k: v.clone() for k, v in h.net.state_dict().items()} for r, h in _models(state).items()},
        "pg_best_step": state.pg_best.step,
        "optimizers": {k: o.state_dict() for k, o in state.optimizers.items()},
        "rng": state.rng.bit_generator.state,
        "torch_rng": state.torch_rng.get_state(),
        "config": state.config.to_dict(),
    }
    torch.save(blob, os.path.join(run_dir, f"state_{state.step}.pt"))
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump(state.config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def latest_state_path(run_dir):
    if not os.path.isdir(run_dir):
        return None
    steps = [int(n[6:-3]) for n in os.listdir(run_dir) if n.startswith("state_") and n.endswith(".pt")]
    return os.path.join(run_dir, f"state_{max(steps)}.pt") if steps else None


def load_state(run_dir, data):
    path = latest_state_path(run_dir)
    if path is None:
        return None
    blob = torch.load(path, weights_only=False)
    config = TrainConfig.from_dict(blob["config"])
    state = init_state(config, data)
    for role, handle in _models(state).items():
        handle.net.load_state_dict(blob["models"][role])
    state.pg_best.step = blob["pg_best_step"]
    for k, o in state.optimizers.items():
        o.load_state_dict(blob["optimizers"][k])
    state.rng.bit_generator.state = blob["rng"]
    state.torch_rng.set_state(blob["torch_rng"])
    state.step = blob["step"]
    state.maxdist = blob["maxdist"]
    state.history = blob["history"]
    return state


# -- target models -----------------------------------------------------------

def train_target_model(arch, data, *, task="attribute_editing", attributes=ATTRIBUTES, infected=False,
                       iterations=1000, batch_size=8, lr=None, seed=100, width=None, log_every=0):
    """Train an independent manipulation model the way a forger would.

    Editing targets are StarGAN-style editors over ``attributes`` (a subset
    of the generator's attribute names); reenactment targets are landmark
    to frame translators.  ``data`` is used as given, so pass poisoned
    images to obtain an infected model.
    """
    if data is None or len(data) == 0:
        raise ConfigurationError("empty dataset")
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}")
    lr = lr or DEFAULT_LR[task]
    role = "M_infected" if infected else "M"
    res = data.images.shape[1]
    rng = np.random.default_rng(seed)
    torch_rng = torch.Generator().manual_seed(seed)
    if task == "attribute_editing":
        cols = [ATTRIBUTES.index(a) for a in attributes]
        model = build(ArchitectureTag(arch, "attribute-broadcast"), role, seed,
                      n_attributes=len(cols), resolution=res, width=width)
        model.attributes = tuple(attributes)
        d = build("Critic", "D_A", seed + 1, n_attributes=len(cols), resolution=res)
        opt_m, opt_d = _adam(model, lr), _adam(d, lr)
        cfg = TrainConfig(task=task, seed=seed)
        labels = data.labels[:, cols]
    else:
        model = build(ArchitectureTag(arch, "landmark-concat"), role, seed, resolution=res, width=width)
        opt_m = _adam(model, lr)
    n = len(data)
    for it in range(iterations):
        idx = np.sort(rng.choice(n, size=min(batch_size, n), replace=False))
        x = to_tensor(data.images[idx])
        if task == "attribute_editing":
            c = torch.from_numpy(labels[idx].copy())
            c_trg = c[torch.from_numpy(rng.permutation(len(idx)))]
            loss, _ = editor_update(model, d, opt_m, opt_d, x, c, c_trg, cfg, torch_rng)
        else:
            loss = translator_update(model, opt_m, to_tensor(data.landmarks[idx]), x)
        if log_every and (it + 1) % log_every == 0:
            log.info("target %s step %d loss %.4f", arch, it + 1, loss)
    model.step = iterations
    return model


def poison_images(pg, images, epsilon, batch_size=64):
    """Apply ``pg`` to N x H x W x 3 numpy images; returns numpy."""
    from .models import to_images
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(to_images(perturb(pg, to_tensor(images[i:i + batch_size]), epsilon)))
    return np.concatenate(out)


def stack_perturbations(pg_editing, pg_reenactment, frames, eps1, eps2):
    """Poison with the editing PG first, then the reenactment PG on top."""
    if eps1 == 0 and eps2 == 0:
        return np.array(frames, dtype=np.float32, copy=True)
    from .models import clip_to_budget, to_images
    once = poison_images(pg_editing, frames, eps1) if eps1 > 0 else np.asarray(frames, np.float32)
    twice = poison_images(pg_reenactment, once, eps2) if eps2 > 0 else once
    return to_images(clip_to_budget(to_tensor(twice), to_tensor(frames), eps1 + eps2))


def pgd_disruption(model, x, c, epsilon, steps=10, step_size=None, seed=0):
    """Per-image white-box baseline: L_inf PGD maximising ||M(x') - M(x)||^2.

    Starts from a random point of the budget ball, since the objective has
    a zero gradient at x itself.  Used only as a reference point against
    the learned generator.
    """
    step_size = step_size or epsilon / 4
    with torch.no_grad():
        y = model(x, c)
    g0 = torch.Generator().manual_seed(seed)
    start = (2 * torch.rand(x.shape, generator=g0, dtype=x.dtype) - 1) * epsilon
    x_adv = clip_to_budget((x + start).clamp(0, 1), x, epsilon)
    for _ in range(steps):
        x_adv.requires_grad_(True)
        loss = ((model(x_adv, c) - y) ** 2).mean()
        g, = torch.autograd.grad(loss, x_adv)
        with torch.no_grad():
            x_adv = x_adv + step_size * g.sign()
            x_adv = clip_to_budget(x_adv.clamp(0, 1), x, epsilon)
    return x_adv.detach()
