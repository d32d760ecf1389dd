"""Metrics, texture maps and defense reports.

All images are N x H x W x C (or H x W x C) arrays in [0, 1].  ``L1`` is
the per-element mean absolute difference and ``L2`` the per-element mean
squared difference.
"""

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from ._validation import ConfigurationError, ShapeError
from .models import perturb, to_images, to_tensor

EDITING_THRESHOLD = 0.05
REENACTMENT_THRESHOLD = 0.05
PERCEPTUAL_SEED = 20210610


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def distance(a, b, kind="L2"):
    a, b = _pair(a, b)
    if kind == "L1":
        return float(np.abs(a - b).mean())
    if kind == "L2":
        return float(((a - b) ** 2).mean())
    raise ConfigurationError(f"unknown distance {kind!r}")


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for peak 1; ``inf`` for equal images."""
    a, b = _pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def psnr_floor(epsilon):
    """Smallest PSNR any perturbation with ||x' - x||_inf <= epsilon can have."""
    return math.inf if epsilon == 0 else 10.0 * math.log10(1.0 / epsilon ** 2)


def linf(a, b):
    a, b = _pair(a, b)
    return float(np.abs(a - b).max())


# -- perceptual distance -----------------------------------------------------

class _FeaturePyramid(torch.nn.Module):
    def __init__(self, seed=PERCEPTUAL_SEED, widths=(16, 32, 64)):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.convs = torch.nn.ModuleList()
        cin = 3
        for w in widths:
            conv = torch.nn.Conv2d(cin, w, 3, 1, 1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(rng.normal(0, math.sqrt(2 / fan_in), conv.weight.shape)))
                conv.bias.zero_()
            self.convs.append(conv)
            cin = w
        self.double()

    def forward(self, x):
        feats = []
        h = x
        for i, conv in enumerate(self.convs):
            if i:
                h = F.avg_pool2d(h, 2) if min(h.shape[2:]) >= 2 else h
            h = F.relu(conv(h))
            feats.append(h)
        return feats


_PYRAMIDS = {}


def _pyramid(seed):
    if seed not in _PYRAMIDS:
        _PYRAMIDS[seed] = _FeaturePyramid(seed)
    return _PYRAMIDS[seed]


def perceptual_distance(a, b, seed=PERCEPTUAL_SEED):
    """Random-feature stand-in for a learned perceptual metric.

    Three scales of a fixed-seed random ReLU network; features are unit
    normalised over channels and compared with a squared distance,
    averaged over positions and scales.  Grayscale inputs are repeated to
    three channels.
    """
    a, b = _pair(a, b)
    if a.ndim == 3:
        a, b = a[None], b[None]
    if a.shape[-1] == 1:
        a, b = np.repeat(a, 3, -1), np.repeat(b, 3, -1)
    if np.array_equal(a, b):
        return 0.0
    net = _pyramid(seed)
    ta = torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))
    tb = torch.from_numpy(np.ascontiguousarray(b.transpose(0, 3, 1, 2)))
    total = 0.0
    with torch.no_grad():
        for fa, fb in zip(net(ta), net(tb)):
            na = fa / (fa.pow(2).sum(1, keepdim=True).sqrt() + 1e-10)
            nb = fb / (fb.pow(2).sum(1, keepdim=True).sqrt() + 1e-10)
            total += float((na - nb).pow(2).sum(1).mean())
    return total / 3.0


# -- LBP ---------------------------------------------------------------------

# neighbour offsets clockwise from the top-left; bit i belongs to offset i
LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]
    if img.ndim == 3:
        return img[:, :, 0]
    return img


def lbp_codes(img):
    """Integer 8-neighbour LBP codes (zero padding; a bit is set when neighbour >= centre)."""
    g = luma(img)
    h, w = g.shape
    padded = np.pad(g, 1)
    codes = np.zeros((h, w), dtype=np.int64)
    for bit, (dy, dx) in enumerate(LBP_OFFSETS):
        nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        codes |= (nb >= g).astype(np.int64) << bit
    return codes


def lbp_map(img):
    """LBP texture map rescaled to [0, 1] as an H x W x 1 image."""
    return (lbp_codes(img) / 255.0).astype(np.float32)[:, :, None]


# -- success rate ------------------------------------------------------------

def defense_success_rate(pairs, task="attribute_editing", threshold=None):
    """Fraction of (clean forgery, infected forgery) pairs that are corrupted.

    Editing counts a success when L2 exceeds the threshold (0.05);
    reenactment uses L1 (threshold default 0.05, configurable).
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigurationError("need at least one forgery pair")
    if task == "attribute_editing":
        kind, thr = "L2", EDITING_THRESHOLD if threshold is None else threshold
    elif task == "reenactment":
        kind, thr = "L1", REENACTMENT_THRESHOLD if threshold is None else threshold
    else:
        raise ConfigurationError(f"unknown task {task!r}")
    flags = [distance(y, yp, kind) > thr for y, yp in pairs]
    return sum(flags) / len(flags), flags


def success_from_distances(distances, threshold):
    flags = [float(d) > threshold for d in distances]
    if not flags:
        raise ConfigurationError("need at least one distance")
    return sum(flags) / len(flags), flags


# -- reports -----------------------------------------------------------------

@dataclass
class TargetSetting:
    """A forger's model and how it relates to the surrogate."""

    arch: str
    domain: str = "SD"
    model: object = None
    infected_model: object = None


@dataclass
class DefenseReport:
    setting: dict
    per_image: list = field(default_factory=list)

    @property
    def total(self):
        return len(self.per_image)

    @property
    def successes(self):
        return sum(1 for r in self.per_image if r["success"])

    @property
    def dsr(self):
        return self.successes / self.total if self.total else 0.0

    def mean(self, key):
        vals = [r[key] for r in self.per_image]
        finite = [v for v in vals if math.isfinite(v)]
        return float(np.mean(finite)) if finite else math.inf

    def summary(self):
        return {
            "setting": self.setting,
            "count": self.total,
            "successes": self.successes,
            "dsr": self.dsr,
            "mean_l1": self.mean("l1"),
            "mean_l2": self.mean("l2"),
            "mean_psnr": self.mean("psnr"),
            "mean_perceptual": self.mean("perceptual"),
        }

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "l1", "l2", "psnr", "perceptual", "success"])
        for r in self.per_image:
            w.writerow([r["id"], repr(r["l1"]), repr(r["l2"]), repr(r["psnr"]), repr(r["perceptual"]),
                        int(r["success"])])
        return buf.getvalue()

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def write(self, directory, name):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, f"{name}.csv"), "w") as f:
            f.write(self.to_csv())
        with open(os.path.join(directory, f"{name}.json"), "w") as f:
            f.write(self.to_json())


def uniform_noise(images, epsilon, seed=0):
    """Random-sign baseline: x + epsilon * U(-1, 1), clipped."""
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-1.0, 1.0, size=np.shape(images))
    return np.clip(np.asarray(images, np.float64) + epsilon * noise, 0, 1).astype(np.float32)


def _run_editor(model, images, labels, batch_size=50):
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = to_tensor(images[i:i + batch_size])
            c = torch.from_numpy(np.ascontiguousarray(labels[i:i + batch_size], dtype=np.float32))
            out.append(to_images(model(x, c)))
    return np.concatenate(out)


def _run_translator(model, landmarks, batch_size=50):
    out = []
    with torch.no_grad():
        for i in range(0, len(landmarks), batch_size):
            out.append(to_images(model(to_tensor(landmarks[i:i + batch_size]))))
    return np.concatenate(out)


def editing_forgeries(model, images, labels, attributes=None):
    """Forgeries of ``model`` for every evaluation domain: list of arrays."""
    from .dataio import ATTRIBUTES
    from .training import apply_toggles, evaluation_toggles
    attributes = attributes or getattr(model, "attributes", None) or ATTRIBUTES
    cols = [ATTRIBUTES.index(a) for a in attributes]
    own = np.asarray(labels)[:, cols]
    return [_run_editor(model, images, apply_toggles(own, t, attributes))
            for t in evaluation_toggles(attributes)]


def report_editing(model, clean, infected, labels, setting, threshold=EDITING_THRESHOLD, ids=None):
    """Per-image distances between forgeries of clean and infected inputs.

    Distances are averaged over the model's evaluation domains.
    """
    clean, infected = _pair(clean, infected)
    ys = editing_forgeries(model, clean.astype(np.float32), labels)
    yps = editing_forgeries(model, infected.astype(np.float32), labels)
    ids = range(len(clean)) if ids is None else ids
    rep = DefenseReport(setting=dict(setting))
    for i, ident in enumerate(ids):
        l1 = float(np.mean([distance(y[i], yp[i], "L1") for y, yp in zip(ys, yps)]))
        l2 = float(np.mean([distance(y[i], yp[i], "L2") for y, yp in zip(ys, yps)]))
        perc = float(np.mean([perceptual_distance(y[i], yp[i]) for y, yp in zip(ys, yps)]))
        rep.per_image.append({"id": int(ident), "l1": l1, "l2": l2, "psnr": psnr(clean[i], infected[i]),
                              "perceptual": perc, "success": l2 > threshold})
    return rep


def report_reenactment(model, infected_model, landmarks, frames, setting, threshold=REENACTMENT_THRESHOLD,
                       ids=None):
    """Clean-trained versus infected-trained translator on the same landmarks.

    The ``psnr`` column holds PSNR of the infected forgery against the
    ground-truth frame.
    """
    y = _run_translator(model, landmarks)
    yp = _run_translator(infected_model, landmarks)
    ids = range(len(y)) if ids is None else ids
    rep = DefenseReport(setting=dict(setting))
    for i, ident in enumerate(ids):
        l1 = distance(y[i], yp[i], "L1")
        rep.per_image.append({"id": int(ident), "l1": l1, "l2": distance(y[i], yp[i], "L2"),
                              "psnr": psnr(frames[i], yp[i]), "perceptual": perceptual_distance(y[i], yp[i]),
                              "success": l1 > threshold})
    return rep


def is_gray_box(surrogate_setting, target):
    return (surrogate_setting.get("arch") == target.arch
            and surrogate_setting.get("domain", "SD") == target.domain)


def transfer_matrix(pg, surrogate_setting, target_settings, data, epsilon, task="attribute_editing",
                    threshold=None):
    """One report per target setting, poisoning ``data`` with ``pg`` at ``epsilon``.

    For reenactment each setting must carry both the clean-trained and the
    infected-trained model; ``pg`` is then only recorded, since the
    poisoning already happened at training time.
    """
    reports = []
    for t in target_settings:
        if t.model is None or (task == "reenactment" and t.infected_model is None):
            raise ConfigurationError(f"missing target model for setting {t.arch}/{t.domain}")
        setting = {"surrogate": surrogate_setting.get("arch"), "target": t.arch, "domain": t.domain,
                   "epsilon": epsilon, "gray_box": is_gray_box(surrogate_setting, t)}
        if task == "attribute_editing":
            clean = np.asarray(data.images, np.float32)
            if epsilon == 0:
                infected = clean.copy()
            else:
                with torch.no_grad():
                    infected = to_images(perturb(pg, to_tensor(clean), epsilon))
            rep = report_editing(t.model, clean, infected, data.labels, setting,
                                 EDITING_THRESHOLD if threshold is None else threshold, ids=data.indices)
        else:
            rep = report_reenactment(t.model, t.infected_model, data.landmarks, data.images, setting,
                                     REENACTMENT_THRESHOLD if threshold is None else threshold,
                                     ids=data.indices)
        reports.append(rep)
    return reports


# -- figures -----------------------------------------------------------------

def image_grid(rows, pad=1):
    """Tile rows of equally sized H x W x C images into one image."""
    rows = [[np.repeat(im, 3, -1) if im.shape[-1] == 1 else im for im in row] for row in rows]
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    out = np.ones((len(rows) * (h + pad) - pad, ncol * (w + pad) - pad, 3), dtype=np.float32)
    for i, row in enumerate(rows):
        for j, im in enumerate(row):
            out[i * (h + pad):i * (h + pad) + h, j * (w + pad):j * (w + pad) + w] = im
    return out


def lbp_side_by_side(clean_forgery, infected_forgery):
    return image_grid([[clean_forgery, infected_forgery],
                       [lbp_map(clean_forgery), lbp_map(infected_forgery)]])


def plot_sweep(summaries, path):
    """DSR and mean L2 against epsilon, one line per target setting."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    keys = sorted({(s["setting"]["target"], s["setting"]["domain"]) for s in summaries})
    for key in keys:
        pts = sorted((s["setting"]["epsilon"], s["dsr"], s["mean_l2"]) for s in summaries
                     if (s["setting"]["target"], s["setting"]["domain"]) == key)
        eps = [p[0] for p in pts]
        axes[0].plot(eps, [p[1] for p in pts], marker="o", label="/".join(key))
        axes[1].plot(eps, [p[2] for p in pts], marker="o", label="/".join(key))
    axes[0].set_xlabel("epsilon")
    axes[0].set_ylabel("DSR")
    axes[1].set_xlabel("epsilon")
    axes[1].set_ylabel("mean L2")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_history(history, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [h["step"] for h in history]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    d = [(h["step"], h["distance"]) for h in history if math.isfinite(h["distance"])]
    if d:
        axes[0].plot(*zip(*d))
    axes[0].set_title("probe D(y, y')")
    axes[1].plot(steps, [h["loss_pg"] for h in history])
    axes[1].set_title("PG loss")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
