"""Network zoo: editors, translators, the perturbation generator and critics.

Tensors inside this module are N x C x H x W.  Generators end in a sigmoid
so outputs stay in [0, 1]; the perturbation generator ends in tanh so its
output stays in [-1, 1].
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ._validation import ConfigurationError, ShapeError

GENERATOR_ARCHS = ("CNet", "Res6", "Res9", "UNet128", "UNet256")
CRITIC_ARCH = "Critic"
CONDITIONINGS = ("attribute-broadcast", "landmark-concat", "none")
ROLES = ("SM", "PG", "D_A", "D_B", "TM", "M", "M_infected")
EDITOR_ROLES = ("SM", "TM", "M", "M_infected")

RES_BLOCKS = {"Res6": 6, "Res9": 9}
UNET_DEPTH = {"UNet128": 3, "UNet256": 4}
DEFAULT_WIDTH = {"CNet": 16, "Res6": 8, "Res9": 8, "UNet128": 8, "UNet256": 8, CRITIC_ARCH: 8}


@dataclass(frozen=True)
class ArchitectureTag:
    name: str
    conditioning: str = "attribute-broadcast"

    def __post_init__(self):
        if self.name not in GENERATOR_ARCHS + (CRITIC_ARCH,):
            raise ConfigurationError(f"unknown architecture {self.name!r}")
        if self.conditioning not in CONDITIONINGS:
            raise ConfigurationError(f"unknown conditioning {self.conditioning!r}")


@dataclass
class CriticOutput:
    realness: torch.Tensor
    domain_logits: torch.Tensor = None

    @property
    def domain_probabilities(self):
        return None if self.domain_logits is None else torch.sigmoid(self.domain_logits)


class ResidualBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
        )

    def forward(self, x):
        return x + self.main(x)


class ResnetGenerator(nn.Module):
    """Encoder, ``n_blocks`` residual blocks at 1/4 resolution, decoder."""

    def __init__(self, in_ch, out_ch, n_blocks, width=8):
        super().__init__()
        layers = [nn.Conv2d(in_ch, width, 7, 1, 3, bias=False),
                  nn.InstanceNorm2d(width, affine=True), nn.ReLU(inplace=True)]
        dim = width
        for _ in range(2):
            layers += [nn.Conv2d(dim, dim * 2, 4, 2, 1, bias=False),
                       nn.InstanceNorm2d(dim * 2, affine=True), nn.ReLU(inplace=True)]
            dim *= 2
        layers += [ResidualBlock(dim) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [nn.ConvTranspose2d(dim, dim // 2, 4, 2, 1, bias=False),
                       nn.InstanceNorm2d(dim // 2, affine=True), nn.ReLU(inplace=True)]
            dim //= 2
        layers += [nn.Conv2d(dim, out_ch, 7, 1, 3)]
        self.main = nn.Sequential(*layers)
        self.n_blocks = n_blocks

    def forward(self, x):
        return self.main(x)


class ConvGenerator(nn.Module):
    """Plain convolutional encoder-decoder without skips or residuals."""

    def __init__(self, in_ch, out_ch, width=16):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(in_ch, width, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width * 2, 4, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(width * 2, width * 2, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(width * 2, width * 2, 3, 1, 1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(width * 2, width, 4, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(width, out_ch, 3, 1, 1),
        )

    def forward(self, x):
        return self.main(x)


class UNetGenerator(nn.Module):
    """U-Net with a skip connection at every scale."""

    def __init__(self, in_ch, out_ch, depth, width=8, resolution=32):
        super().__init__()
        # keep at least a 2 x 2 bottleneck at small working resolutions
        depth = max(1, min(depth, int(math.log2(resolution)) - 1))
        self.depth = depth
        self.down = nn.ModuleList()
        self.up = nn.ModuleList()
        chans = [min(width * 2 ** i, width * 8) for i in range(depth + 1)]
        self.stem = nn.Conv2d(in_ch, chans[0], 3, 1, 1)
        for i in range(depth):
            norm = nn.InstanceNorm2d(chans[i + 1], affine=True) if i < depth - 1 else nn.Identity()
            self.down.append(nn.Sequential(
                nn.LeakyReLU(0.2), nn.Conv2d(chans[i], chans[i + 1], 4, 2, 1, bias=False), norm))
        for i in reversed(range(depth)):
            cin = chans[i + 1] if i == depth - 1 else chans[i + 1] * 2
            self.up.append(nn.Sequential(
                nn.ReLU(), nn.ConvTranspose2d(cin, chans[i], 4, 2, 1, bias=False),
                nn.InstanceNorm2d(chans[i], affine=True)))
        self.head = nn.Sequential(nn.ReLU(), nn.Conv2d(chans[0] * 2, out_ch, 3, 1, 1))

    def forward(self, x):
        h = self.stem(x)
        skips = [h]
        for layer in self.down:
            h = layer(h)
            skips.append(h)
        skips.pop()
        for layer in self.up:
            h = layer(h)
            h = torch.cat([h, skips.pop()], dim=1)
        return self.head(h)


class Critic(nn.Module):
    """Seven convolutions and one dense layer.

    The dense layer emits a realness score plus ``n_domains`` attribute
    logits (zero for a plain critic).
    """

    STRIDES = (2, 1, 2, 1, 2, 1, 2)

    def __init__(self, in_ch=3, n_domains=0, width=8, resolution=32):
        super().__init__()
        layers, dim = [], in_ch
        for i, stride in enumerate(self.STRIDES):
            out = min(width * 2 ** ((i + 1) // 2), width * 8)
            layers += [nn.Conv2d(dim, out, 3, stride, 1), nn.LeakyReLU(0.2)]
            dim = out
        self.features = nn.Sequential(*layers)
        with torch.no_grad():
            n_flat = self.features(torch.zeros(1, in_ch, resolution, resolution)).numel()
        self.dense = nn.Linear(n_flat, 1 + n_domains)
        self.n_domains = n_domains

    def forward(self, x):
        h = self.features(x).flatten(1)
        out = self.dense(h)
        return out[:, 0], (out[:, 1:] if self.n_domains else None)


def _make_network(arch, role, n_attributes, resolution, width):
    if role in ("D_A", "D_B"):
        return Critic(3, n_attributes if role == "D_A" else 0, width, resolution)
    if arch.name == CRITIC_ARCH:
        raise ConfigurationError(f"role {role} needs a generator architecture")
    if role == "PG":
        in_ch = 3
    elif arch.conditioning == "attribute-broadcast":
        in_ch = 3 + n_attributes
    elif arch.conditioning == "landmark-concat":
        in_ch = 1
    else:
        in_ch = 3
    if arch.name in RES_BLOCKS:
        return ResnetGenerator(in_ch, 3, RES_BLOCKS[arch.name], width)
    if arch.name in UNET_DEPTH:
        return UNetGenerator(in_ch, 3, UNET_DEPTH[arch.name], width, resolution)
    return ConvGenerator(in_ch, 3, width)


class ModelHandle:
    """A network together with its architecture tag, role and seed.

    Calling the handle dispatches on the role: editors take ``(x, c)``,
    translators take ``z``, ``PG`` returns the raw perturbation in [-1, 1]
    and critics return a :class:`CriticOutput`.
    """

    def __init__(self, arch, role, net, seed, n_attributes=5, resolution=32, width=8, step=0):
        self.arch = arch
        self.role = role
        self.net = net
        self.seed = seed
        self.n_attributes = n_attributes
        self.resolution = resolution
        self.width = width
        self.step = step
        self.attributes = None

    def __repr__(self):
        return (f"ModelHandle(arch={self.arch.name}/{self.arch.conditioning}, role={self.role}, "
                f"params={self.parameter_count})")

    @property
    def parameter_count(self):
        return sum(p.numel() for p in self.net.parameters())

    @property
    def block_count(self):
        return getattr(self.net, "n_blocks", 0)

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def parameter_vector(self):
        return torch.nn.utils.parameters_to_vector(self.net.parameters()).detach().cpu().numpy().copy()

    def parameters(self):
        return self.net.parameters()

    def config(self):
        return {"arch": self.arch.name, "conditioning": self.arch.conditioning, "role": self.role,
                "seed": self.seed, "n_attributes": self.n_attributes, "resolution": self.resolution,
                "width": self.width,
                "attributes": None if self.attributes is None else list(self.attributes)}

    def __call__(self, *args, params=None):
        if self.role in ("D_A", "D_B"):
            return critic(self, *args, params=params)
        if self.role == "PG":
            return perturbation(self, args[0], params)
        if self.arch.conditioning == "landmark-concat":
            return forward_translator(self, *args, params=params)
        return forward_editor(self, *args, params=params)


def build(arch, role, seed, *, n_attributes=5, resolution=32, width=None, dtype=torch.float32):
    """Build a seeded network for ``role``.

    ``arch`` is an :class:`ArchitectureTag` or a bare name.  Critic roles
    always use the seven-convolution critic regardless of the tag name.
    """
    if isinstance(arch, str):
        if role == "PG":
            cond = "none"
        elif role in ("D_A", "D_B"):
            cond = "none"
        else:
            cond = "attribute-broadcast"
        arch = ArchitectureTag(arch, cond)
    if role not in ROLES:
        raise ConfigurationError(f"unknown role {role!r}")
    if role in ("D_A", "D_B"):
        arch = ArchitectureTag(CRITIC_ARCH, "none")
    width = width or DEFAULT_WIDTH[arch.name]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _make_network(arch, role, n_attributes, resolution, width)
    net = net.to(dtype)
    return ModelHandle(arch, role, net, seed, n_attributes, resolution, width)


def _apply(handle, inp, params):
    if params is None:
        return handle.net(inp)
    return torch.func.functional_call(handle.net, params, (inp,))


def _check_nchw(x, channels, name):
    if x.dim() != 4 or x.shape[1] != channels:
        raise ShapeError(f"{name} must be N x {channels} x H x W, got {tuple(x.shape)}")


def forward_editor(sm, x, c, params=None):
    """Edit ``x`` towards attribute labels ``c`` (labels broadcast as channels)."""
    _check_nchw(x, 3, "x")
    c = torch.as_tensor(c, dtype=x.dtype)
    if c.dim() == 1:
        c = c.expand(x.shape[0], -1)
    if c.shape != (x.shape[0], sm.n_attributes):
        raise ShapeError(f"label shape {tuple(c.shape)} does not match ({x.shape[0]}, {sm.n_attributes})")
    cmap = c[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
    return torch.sigmoid(_apply(sm, torch.cat([x, cmap], dim=1), params))


def forward_translator(m, z, params=None):
    """Render a face frame from a 1-channel landmark map."""
    _check_nchw(z, 1, "z")
    if z.shape[2] != m.resolution or z.shape[3] != m.resolution:
        raise ShapeError(f"landmark resolution {tuple(z.shape[2:])} != model resolution {m.resolution}")
    return torch.sigmoid(_apply(m, z, params))


def perturb(pg, x, epsilon, params=None):
    """Return clip(x + epsilon * PG(x), 0, 1)."""
    if not 0.0 <= epsilon <= 0.1:
        raise ConfigurationError(f"epsilon must lie in [0, 0.1], got {epsilon}")
    if epsilon == 0:
        return x.clone()
    delta = perturbation(pg, x, params) if isinstance(pg, ModelHandle) else pg(x)
    return clip_to_budget(x + epsilon * delta, x, epsilon)


def _budget_edge(x, epsilon, sign):
    edge = torch.clamp(x + sign * epsilon, 0.0, 1.0)
    # x + eps rounds to the nearest float, which may overshoot the budget by
    # an ulp; walk such elements back towards x until both the exact and the
    # rounded differences are within budget
    step = float(np.spacing(np.asarray(epsilon, dtype=torch.empty(0, dtype=x.dtype).numpy().dtype)))
    for _ in range(64):
        d = (edge - x).abs().double()
        exact = (edge.double() - x.double()).abs()
        bad = (d > epsilon) | (exact > epsilon)
        if not bad.any():
            break
        moved = edge - sign * step
        moved = torch.where(moved == edge, torch.nextafter(edge, x), moved)
        edge = torch.where(bad, moved, edge)
    return edge


def clip_to_budget(x_prime, x, epsilon):
    """Clip ``x_prime`` into [0, 1] and into the L_inf ball of radius ``epsilon`` around ``x``.

    The bound holds exactly in floating point, not just up to rounding.
    """
    with torch.no_grad():
        hi = _budget_edge(x.detach(), epsilon, 1.0)
        lo = _budget_edge(x.detach(), epsilon, -1.0)
    return torch.max(torch.min(x_prime, hi), lo)


def perturbation(pg, x, params=None):
    """Raw PG output, squashed into [-1, 1]."""
    return torch.tanh(_apply(pg, x, params))


def copy_parameters(src, dst):
    if src.arch != dst.arch or src.config()["width"] != dst.config()["width"]:
        raise ConfigurationError(f"cannot copy {src.arch} into {dst.arch}")
    dst_state = dst.net.state_dict()
    for k, v in src.net.state_dict().items():
        if k not in dst_state or dst_state[k].shape != v.shape:
            raise ConfigurationError(f"parameter {k!r} does not match between networks")
    with torch.no_grad():
        for k, v in src.net.state_dict().items():
            dst_state[k].copy_(v)


def clone_handle(src, role=None):
    """A detached deep copy of ``src``, optionally under another role."""
    dst = build(src.arch, role or src.role, src.seed, n_attributes=src.n_attributes,
                resolution=src.resolution, width=src.width, dtype=src.dtype)
    copy_parameters(src, dst)
    dst.step = src.step
    return dst


def critic(d, img, params=None):
    _check_nchw(img, 3, "img")
    real, logits = _apply(d, img, params)
    return CriticOutput(real, logits if d.role == "D_A" else None)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(handle, path, step=None):
    """Write ``path`` (raw little-endian float32 parameters) and ``path.json``.

    Buffers are not stored; none of the networks here carry running
    statistics.
    """
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    vec = np.concatenate([p.detach().cpu().numpy().ravel() for p in handle.net.parameters()])
    with open(path, "wb") as f:
        f.write(vec.astype("<f4").tobytes())
    meta = handle.config()
    meta.update(parameter_count=int(vec.size), step=int(handle.step if step is None else step))
    with open(path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_checkpoint(path, role=None):
    path = os.fspath(path)
    try:
        with open(path + ".json") as f:
            meta = json.load(f)
        with open(path, "rb") as f:
            blob = f.read()
    except (OSError, json.JSONDecodeError) as exc:
        raise OSError(f"{path}: cannot read checkpoint ({exc})") from exc
    if role is not None and meta["role"] != role:
        raise ConfigurationError(f"{path}: checkpoint role is {meta['role']}, expected {role}")
    handle = build(ArchitectureTag(meta["arch"], meta["conditioning"]), meta["role"], meta["seed"],
                   n_attributes=meta["n_attributes"], resolution=meta["resolution"], width=meta["width"])
    vec = np.frombuffer(blob, dtype="<f4")
    if vec.size != meta["parameter_count"] or vec.size != handle.parameter_count:
        raise OSError(f"{path}: parameter blob has {vec.size} values, expected {handle.parameter_count}")
    torch.nn.utils.vector_to_parameters(torch.from_numpy(vec.astype(np.float32)), handle.net.parameters())
    handle.step = meta["step"]
    if meta.get("attributes") is not None:
        handle.attributes = tuple(meta["attributes"])
    return handle


# -- numpy <-> tensor --------------------------------------------------------

def to_tensor(images, dtype=torch.float32):
    """N x H x W x C numpy images to an N x C x H x W tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_images(tensor):
    return tensor.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)
