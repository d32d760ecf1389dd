"""Acceptance criteria 1-10, one test each.

Every test prints (and records for the session summary) a single
``criterion N: PASS|FAIL ...`` line.  Thresholds are exactly the stated
ones; failures are left visible.
"""

import dataclasses
import math

import numpy as np
import pytest
import torch
from torch import nn

from conftest import ACCEPTANCE_LINES, directional_check
from venomguard import evaluation, losses
from venomguard.dataio import (ATTRIBUTES, SynthFaceSpec, generate_dataset, generate_speaker_sequence,
                               split_dataset, stack_samples)
from venomguard.models import ArchitectureTag, ModelHandle, build, perturb, to_images, to_tensor
from venomguard.training import (TrainConfig, poison_images, probe_distance, run_two_stage, stack_perturbations,
                                 train_target_model, unrolled_parameters)

D64 = torch.float64


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# -- 1. budget ------------------------------------------------------------------

def test_criterion_1_budget():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1000, 3, 16, 16, generator=g)
    # a generator that saturates tanh almost everywhere, and an untrained network
    raw = torch.randn(x.shape, generator=g) * 50
    net = build("UNet128", "PG", 0, resolution=16)
    pgs = [lambda t, s: torch.tanh(raw[s]), lambda t, s: net(t)]
    violations, worst = 0, 0.0
    with torch.no_grad():
        for eps in (0.0, 0.01, 0.05, 0.1):
            for pg in pgs:
                for i in range(0, 1000, 250):
                    s = slice(i, i + 250)
                    out = perturb(lambda t: pg(t, s), x[s], eps)
                    d = (out.double() - x[s].double()).abs().amax(dim=(1, 2, 3))
                    violations += int((d > eps).sum())
                    worst = max(worst, float((d - eps).max()))
    verdict(1, violations == 0, f"violations={violations} max(|x'-x|_inf - eps)={worst:.3g} "
                                "(1000 images x eps in {0,0.01,0.05,0.1} x 2 generators)")


# -- 2. gradients ---------------------------------------------------------------

class _MicroTranslator(nn.Module):
    def __init__(self):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(0.7, dtype=D64))
        self.b = nn.Parameter(torch.tensor(-0.2, dtype=D64))

    def forward(self, z):
        return (self.a * z + self.b).expand(-1, 3, -1, -1)


def _probe(seed, lo=0.0, hi=1.0):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(2, 3, 8, 8, generator=g, dtype=D64)


def test_criterion_2_gradients():
    sm = build("Res6", "SM", 0, resolution=8, dtype=D64)
    d_a = build("Critic", "D_A", 1, n_attributes=5, resolution=8, dtype=D64)
    d_b = build("Critic", "D_B", 2, n_attributes=0, resolution=8, dtype=D64)
    x, xp = _probe(0), _probe(1)
    doms = [torch.tensor([1.0, 0, 1, 0, 0], dtype=D64), torch.tensor([0.0, 1, 0, 1, 1], dtype=D64)]
    mu = torch.tensor([0.4, 0.6], dtype=D64)
    c = torch.tensor([0.0, 1, 0, 0, 1], dtype=D64)
    u = torch.tensor([0.3, 0.8], dtype=D64)
    errs = {
        "adv_generator": directional_check(lambda t: losses.adversarial_loss(d_b, x, t, "generator"), xp),
        # the penalty dominates the value; a wider step keeps round-off out of the quotient
        "adv_critic": directional_check(lambda t: losses.adversarial_loss(d_b, x, t, "critic", u=u), xp, h=1e-4),
        "basic": directional_check(lambda t: losses.basic_loss(sm, x, t, doms, mu), xp),
        "cycle": directional_check(lambda t: losses.cycle_disruption_loss(sm, t, c, doms, mu), xp),
        "domain": directional_check(lambda t: losses.domain_confusion_loss(d_a, sm, t, doms), xp),
    }
    tm = ModelHandle(ArchitectureTag("CNet", "landmark-concat"), "TM", _MicroTranslator(), 0, resolution=8)
    sm_x = build(ArchitectureTag("CNet", "landmark-concat"), "SM", 3, resolution=8, dtype=D64)
    frames = _probe(3, 0.2, 0.8)
    z = torch.rand(2, 1, 8, 8, generator=torch.Generator().manual_seed(4), dtype=D64)

    def influence(t):
        params = unrolled_parameters(tm, z, t, steps=1, lr=5.0)
        return losses.influence_loss_reenactment(sm_x, lambda zz: tm(zz, params=params), frames, z)

    probe = _probe(2, 0.2, 0.8)
    unrolled = directional_check(influence, probe)
    t = probe.clone().requires_grad_(True)
    nonzero = float(torch.autograd.grad(influence(t), t)[0].abs().max()) > 0
    ok = all(v < 1e-3 for v in errs.values()) and unrolled < 1e-2 and nonzero
    detail = " ".join(f"{k}={v:.1e}" for k, v in errs.items())
    verdict(2, ok, f"{detail} unrolled_influence={unrolled:.1e} (nonzero={nonzero}); "
                   "limits 1e-3 / 1e-2, float64 8x8")


# -- 3. metric oracles ------------------------------------------------------------

def _lbp_oracle(gray):
    h, w = gray.shape
    out = np.zeros((h, w), dtype=np.int64)
    order = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]
    for y in range(h):
        for x in range(w):
            for bit, (dy, dx) in enumerate(order):
                yy, xx = y + dy, x + dx
                nb = gray[yy, xx] if 0 <= yy < h and 0 <= xx < w else 0.0
                out[y, x] += (nb >= gray[y, x]) << bit
    return out


def test_criterion_3_metric_oracles():
    a = np.full((8, 8, 3), 0.4)
    b = a + 0.1
    closed = (math.isclose(evaluation.distance(a, b, "L1"), 0.1, abs_tol=1e-12)
              and math.isclose(evaluation.distance(a, b, "L2"), 0.01, abs_tol=1e-12)
              and math.isclose(evaluation.psnr(a, b), 20.0, abs_tol=1e-9))
    rng = np.random.default_rng(0)
    lbp_bad = 0
    for _ in range(100):
        img = rng.random((9, 9, 3))
        gray = 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]
        lbp_bad += int(not np.array_equal(evaluation.lbp_codes(img), _lbp_oracle(gray)))
    lists = [(0.04, 0.06, 0.10), (0.0, 0.0), (0.051, 0.05, 0.049, 0.2), tuple(rng.random(37) * 0.1)]
    dsr_ok = all(evaluation.success_from_distances(ds, 0.05)[0] == sum(d > 0.05 for d in ds) / len(ds)
                 for ds in lists)
    dsr_ok &= evaluation.success_from_distances((0.04, 0.06, 0.10), 0.05)[0] == 2 / 3
    worst_mu = 0.0
    for i in range(1000):
        d = np.zeros(int(rng.integers(1, 16))) if i == 0 else rng.random(int(rng.integers(1, 16))) * 10 ** rng.uniform(-8, 3)
        mu = losses.normalize_domain_weights(d)
        worst_mu = max(worst_mu, abs(float(mu.sum()) - 1))
    zero_uniform = losses.normalize_domain_weights(np.zeros(4)).tolist() == [0.25] * 4
    ok = closed and lbp_bad == 0 and dsr_ok and worst_mu <= 1e-6 and zero_uniform
    verdict(3, ok, f"closed_forms={closed} lbp_mismatches={lbp_bad}/100 dsr_counts={dsr_ok} "
                   f"max|sum(mu)-1|={worst_mu:.1e} zero_case_uniform={zero_uniform}")


# -- 4. bookkeeping ---------------------------------------------------------------

def test_criterion_4_bookkeeping():
    faces = stack_samples(generate_dataset(SynthFaceSpec(seed=3, resolution=16), 24))
    results = []
    for seed, every in ((1, 1), (2, 1), (3, 3)):
        cfg = TrainConfig(maxiter=7, batch_size=4, probe_size=4, seed=seed, probe_every=every)
        pg_best, state, history = run_two_stage(cfg, faces)
        measured = [h["distance"] for h in history if not math.isnan(h["distance"])]
        final = probe_distance(state)
        state.pg = pg_best
        best = probe_distance(state)
        results.append((state.maxdist == max(measured) == history[-1]["maxdist"], best >= final, best, final))
    ok = all(r[0] and r[1] for r in results)
    verdict(4, ok, "; ".join(f"maxdist==max(history) {r[0]}, best {r[2]:.3g} >= final {r[3]:.3g}"
                             for r in results))


# -- 8. PSNR floor ----------------------------------------------------------------

def test_criterion_8_psnr_floor():
    faces = stack_samples(generate_dataset(SynthFaceSpec(seed=8), 200))
    x = to_tensor(faces.images)
    raw = torch.randn(x.shape, generator=torch.Generator().manual_seed(0)) * 50
    gens = [build("UNet128", "PG", 0), lambda t: torch.tanh(raw)]
    lows = {}
    for eps, floor in ((0.05, 26.02), (0.02, 33.98)):
        low = math.inf
        with torch.no_grad():
            for pg in gens:
                xp = to_images(perturb(pg, x, eps))
                low = min(low, min(evaluation.psnr(a, b) for a, b in zip(faces.images, xp)))
        lows[eps] = (low, floor)
    ok = all(low >= floor for low, floor in lows.values())
    verdict(8, ok, " ".join(f"eps={e}: min PSNR {low:.3f} dB >= {floor}" for e, (low, floor) in lows.items()))


# -- toy-scale runs shared by 5, 6, 7, 9 and 10 ------------------------------------

EDIT_CONFIG = dict(maxiter=3000, epsilon=0.05, seed=0, probe_every=5)
REEN_CONFIG = dict(task="reenactment", maxiter=1500, epsilon=0.02, seed=0, probe_every=5)
TARGET_ITERS = {"attribute_editing": 3000, "reenactment": 2000}
DD = ("blond_hair", "black_hair", "pale_skin")
EDIT_TARGETS = (("Res6", "SD"), ("CNet", "DD"), ("Res9", "SD"), ("UNet128", "SD"))


def _attrs(domain):
    return DD if domain == "DD" else ATTRIBUTES


def _editing_split():
    faces = stack_samples(generate_dataset(SynthFaceSpec(seed=7), 4200))
    return split_dataset(faces, (2000 / 4200, 2000 / 4200, 200 / 4200))


def _speaker_split():
    seq = stack_samples(generate_speaker_sequence(SynthFaceSpec(seed=7), 300))
    return split_dataset(seq, (0.5, 0.4, 0.1))


def _defend(cfg, data, run_dir):
    pg, state, _ = run_two_stage(TrainConfig(**cfg), data, run_dir=str(run_dir))
    return pg, state


@pytest.fixture(scope="session")
def editing_run(tmp_path_factory):
    dtrain, ttrain, ev = _editing_split()
    run_dir = tmp_path_factory.mktemp("edit_run")
    pg, state = _defend(EDIT_CONFIG, dtrain, run_dir)
    targets = {}
    for arch, dom in EDIT_TARGETS:
        targets[arch, dom] = train_target_model(arch, ttrain, attributes=_attrs(dom),
                                                iterations=TARGET_ITERS["attribute_editing"], seed=100)
    return {"pg": pg, "state": state, "targets": targets, "eval": ev, "dir": run_dir}


@pytest.fixture(scope="session")
def reenactment_run(tmp_path_factory):
    dtrain, ttrain, ev = _speaker_split()
    run_dir = tmp_path_factory.mktemp("reen_run")
    pg, state = _defend(REEN_CONFIG, dtrain, run_dir)
    eps = REEN_CONFIG["epsilon"]
    poisoned = replace_images(ttrain, poison_images(pg, ttrain.images, eps))
    iters = TARGET_ITERS["reenactment"]
    clean_m = train_target_model("UNet256", ttrain, task="reenactment", iterations=iters, seed=100)
    infected_m = train_target_model("UNet256", poisoned, task="reenactment", infected=True,
                                    iterations=iters, seed=100)
    return {"pg": pg, "state": state, "train": ttrain, "eval": ev, "clean": clean_m,
            "infected": infected_m, "dir": run_dir}


def replace_images(data, images):
    return dataclasses.replace(data, images=np.asarray(images, np.float32))


def _editing_pair(model, clean, infected, labels, setting):
    return evaluation.report_editing(model, clean, infected, labels, setting)


def _heldout_l1(model, data):
    with torch.no_grad():
        y = model(to_tensor(data.landmarks))
    return float((y - to_tensor(data.images)).abs().mean())


# -- 5. toy editing defense ---------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_editing_defense(editing_run):
    ev, pg = editing_run["eval"], editing_run["pg"]
    eps = EDIT_CONFIG["epsilon"]
    infected = poison_images(pg, ev.images, eps)
    noisy = evaluation.uniform_noise(ev.images, eps, seed=1)
    rows = {}
    for (arch, dom), model in editing_run["targets"].items():
        setting = {"surrogate": "Res6", "target": arch, "domain": dom, "epsilon": eps}
        rep_pg = _editing_pair(model, ev.images, infected, ev.labels, setting)
        rep_noise = _editing_pair(model, ev.images, noisy, ev.labels, setting)
        rows[arch, dom] = (rep_pg.mean("l2"), rep_noise.mean("l2"), rep_pg.dsr)
    sm = editing_run["state"].sm
    sm_pg = _editing_pair(sm, ev.images, infected, ev.labels, {}).mean("l2")
    sm_noise = _editing_pair(sm, ev.images, noisy, ev.labels, {}).mean("l2")

    gray_pg, gray_noise, gray_dsr = rows["Res6", "SD"]
    ratio = gray_pg / gray_noise if gray_noise > 0 else math.inf
    ok_a = ratio >= 5
    ok_b = gray_dsr >= 0.9
    ok_c = rows["CNet", "DD"][2] >= 0.5 and all(p > n for p, n, _ in rows.values())
    detail = (f"(a) gray-box L2 PG {gray_pg:.3g} / noise {gray_noise:.3g} = {ratio:.2f}x (need >= 5) "
              f"[surrogate: {sm_pg:.3g} / {sm_noise:.3g} = {sm_pg / max(sm_noise, 1e-300):.1f}x]; "
              f"(b) gray-box DSR {gray_dsr:.2f} (need >= 0.9); "
              f"(c) black-box CNet/DD DSR {rows['CNet', 'DD'][2]:.2f} (need >= 0.5), dominance "
              + ", ".join(f"{a}/{d} {p:.3g}>{n:.3g}:{p > n}" for (a, d), (p, n, _) in rows.items()))
    verdict(5, ok_a and ok_b and ok_c, detail)


# -- 6. toy reenactment defense -----------------------------------------------------

@pytest.mark.slow
def test_criterion_6_reenactment_defense(reenactment_run):
    ev = reenactment_run["eval"]
    clean_l1 = _heldout_l1(reenactment_run["clean"], ev)
    infected_l1 = _heldout_l1(reenactment_run["infected"], ev)
    rep = evaluation.report_reenactment(reenactment_run["clean"], reenactment_run["infected"],
                                        ev.landmarks, ev.images, {"target": "UNet256", "gray_box": True})
    ratio = infected_l1 / clean_l1
    ok = ratio >= 2 and rep.dsr >= 0.9
    verdict(6, ok, f"held-out L1 infected {infected_l1:.4f} / clean {clean_l1:.4f} = {ratio:.2f}x (need >= 2); "
                   f"gray-box DSR {rep.dsr:.2f} at 0.05, mean L1(y,y') {rep.mean('l1'):.4f} (need >= 0.9)")


# -- 7. ablation ordering -------------------------------------------------------------

ABLATION_SEEDS = (0, 1, 2)
ABLATION_ITERS = 300


@pytest.mark.slow
def test_criterion_7_ablation(editing_run):
    dtrain, _, ev = _editing_split()
    target = editing_run["targets"]["Res6", "SD"]
    variants = {"full": {}, "no_alternating": {"alternating": False}, "no_enhancement": {"enhancement": False}}
    scores = {}
    for name, kw in variants.items():
        per_seed = []
        for seed in ABLATION_SEEDS:
            cfg = TrainConfig(maxiter=ABLATION_ITERS, epsilon=0.05, seed=seed, probe_every=5, **kw)
            pg, _, _ = run_two_stage(cfg, dtrain)
            infected = poison_images(pg, ev.images, 0.05)
            per_seed.append(_editing_pair(target, ev.images, infected, ev.labels, {}).mean("l2"))
        scores[name] = per_seed
    mean = {k: float(np.mean(v)) for k, v in scores.items()}
    rows = [f"{k}: mean L2 {mean[k]:.4g} per-seed [{', '.join(f'{s:.4g}' for s in v)}]"
            for k, v in scores.items()]
    print("\n".join(["ablation (gray-box Res6/SD, eps 0.05, seeds 0-2)"] + rows))
    ok = mean["no_alternating"] <= mean["full"] and mean["no_enhancement"] <= mean["full"]
    verdict(7, ok, f"no_alternating {mean['no_alternating']:.4g} <= full {mean['full']:.4g}: "
                   f"{mean['no_alternating'] <= mean['full']}; no_enhancement {mean['no_enhancement']:.4g} "
                   f"<= full: {mean['no_enhancement'] <= mean['full']}")


# -- 9. joint scenario ------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_joint(editing_run, reenactment_run):
    eps1, eps2 = EDIT_CONFIG["epsilon"], REEN_CONFIG["epsilon"]
    pg_e, pg_r = editing_run["pg"], reenactment_run["pg"]
    # editor side: the gray-box editing target on the evaluation faces
    ev = editing_run["eval"]
    stacked = stack_perturbations(pg_e, pg_r, ev.images, eps1, eps2)
    noisy = evaluation.uniform_noise(ev.images, eps1 + eps2, seed=2)
    editor = editing_run["targets"]["Res6", "SD"]
    ed_pg = _editing_pair(editor, ev.images, stacked, ev.labels, {}).mean("l2")
    ed_noise = _editing_pair(editor, ev.images, noisy, ev.labels, {}).mean("l2")
    # reenactment side: translators trained on stacked and on noisy speaker frames
    tr = reenactment_run["train"]
    tr_stacked = stack_perturbations(pg_e, pg_r, tr.images, eps1, eps2)
    tr_noisy = evaluation.uniform_noise(tr.images, eps1 + eps2, seed=3)
    budget_bad = sum(int(evaluation.linf(a, b) > eps1 + eps2)
                     for pair in ((tr_stacked, tr.images), (stacked, ev.images)) for a, b in zip(*pair))
    iters = TARGET_ITERS["reenactment"]
    held = reenactment_run["eval"]
    l1 = {}
    for name, imgs in (("stacked", tr_stacked), ("noise", tr_noisy)):
        m = train_target_model("UNet256", replace_images(tr, imgs), task="reenactment", infected=True,
                               iterations=iters, seed=100)
        l1[name] = _heldout_l1(m, held)
    l1["clean"] = _heldout_l1(reenactment_run["clean"], held)
    ok = (budget_bad == 0 and ed_pg > ed_noise and ed_pg > 0
          and l1["stacked"] > l1["noise"] and l1["stacked"] > l1["clean"])
    verdict(9, ok, f"budget violations {budget_bad} at eps1+eps2={eps1 + eps2}; editor L2 stacked {ed_pg:.3g} > "
                   f"noise {ed_noise:.3g}; reenactment held-out L1 stacked {l1['stacked']:.4f} > noise "
                   f"{l1['noise']:.4f}, clean {l1['clean']:.4f}")


# -- 10. determinism ----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_determinism(editing_run, reenactment_run, tmp_path):
    dtrain_e, _, _ = _editing_split()
    dtrain_r, _, _ = _speaker_split()
    same = {}
    for name, cfg, data, first in (("editing", EDIT_CONFIG, dtrain_e, editing_run["dir"]),
                                   ("reenactment", REEN_CONFIG, dtrain_r, reenactment_run["dir"])):
        _defend(cfg, data, tmp_path / name)
        a = (first / "history.csv").read_bytes()
        b = (tmp_path / name / "history.csv").read_bytes()
        same[name] = (a == b, len(a))
    verdict(10, all(v[0] for v in same.values()),
            "; ".join(f"{k} history.csv identical={v[0]} ({v[1]} bytes)" for k, v in same.items()))
