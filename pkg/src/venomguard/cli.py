"""Command-line entry point: ``venomguard <command> [options]``.

Every command reads an optional JSON config (``--config``); explicit flags
override values from the file.  The effective configuration is written to
``<out>/run_config.json`` so a run can be repeated from it alone.

Exit codes: 0 success, 2 configuration error, 3 training abort,
4 contract violation.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np
import torch

from . import dataio, evaluation, training
from ._validation import ConfigurationError, ContractViolation, ShapeError, TrainingAbort
from .models import GENERATOR_ARCHS, load_checkpoint, save_checkpoint

log = logging.getLogger("venomguard")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_CONTRACT = 0, 2, 3, 4

DOMAIN_SETS = {"SD": list(dataio.ATTRIBUTES), "DD": ["blond_hair", "black_hair", "pale_skin"]}
SPLITS = ("defense", "target", "eval")

DEFAULTS = {
    "task": "attribute_editing",
    "seed": 0,
    "out": None,
    "data": {"count": 512, "resolution": 32, "format": "vgf", "fractions": [0.5, 0.4, 0.1]},
    "train": {},
    "target": {"arch": "Res6", "domains": "SD", "iterations": 1000},
    "eval": {"epsilons": [0.05], "threshold": None},
    "epsilon": None,
}


def _merge(base, extra):
    out = json.loads(json.dumps(base))
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _epsilons(text):
    try:
        vals = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ConfigurationError(f"bad epsilon list {text!r}")
    if not vals or any(not 0 <= v <= 0.1 for v in vals):
        raise ConfigurationError(f"epsilon values must lie in [0, 0.1], got {text!r}")
    return vals


def resolve_config(args):
    cfg = DEFAULTS
    if args.config:
        try:
            with open(args.config) as f:
                cfg = _merge(cfg, json.load(f))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}")
    flags = {}
    for key in ("task", "seed", "out"):
        if getattr(args, key, None) is not None:
            flags[key] = getattr(args, key)
    if getattr(args, "epsilon", None) is not None:
        flags["epsilon"] = _epsilons(args.epsilon)
    if getattr(args, "count", None) is not None:
        flags.setdefault("data", {})["count"] = args.count
    if getattr(args, "resolution", None) is not None:
        flags.setdefault("data", {})["resolution"] = args.resolution
    if getattr(args, "maxiter", None) is not None:
        flags.setdefault("train", {})["maxiter"] = args.maxiter
    if getattr(args, "iterations", None) is not None:
        flags.setdefault("target", {})["iterations"] = args.iterations
    cfg = _merge(cfg, flags)
    if cfg["task"] not in training.TASKS:
        raise ConfigurationError(f"task must be one of {training.TASKS}")
    if not cfg.get("out"):
        raise ConfigurationError("--out is required")
    return cfg


def _write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _persist(cfg, command, args):
    os.makedirs(cfg["out"], exist_ok=True)
    extra = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config") and v is not None}
    _write_json({"command": command, "config": cfg, "args": extra}, os.path.join(cfg["out"], "run_config.json"))


def _read(path, split=None):
    if not path:
        raise ConfigurationError("--data is required")
    try:
        data, meta = dataio.read_dataset(path)
    except OSError as exc:
        raise ConfigurationError(str(exc))
    if split:
        splits = meta.get("splits", {})
        if split not in splits:
            raise ConfigurationError(f"{path} has no split {split!r}")
        pos = {int(i): k for k, i in enumerate(data.indices)}
        data = data.subset([pos[int(i)] for i in splits[split]])
    return data, meta


def _one_epsilon(cfg, default):
    eps = cfg.get("epsilon") or [default]
    if len(eps) != 1:
        raise ConfigurationError("this command takes a single --epsilon")
    return eps[0]


# -- commands ----------------------------------------------------------------

def cmd_generate(args, cfg):
    d = cfg["data"]
    count = int(d["count"])
    if count < 1:
        raise ConfigurationError(f"--count must be >= 1, got {count}")
    spec = dataio.SynthFaceSpec(seed=cfg["seed"], resolution=int(d["resolution"]))
    if cfg["task"] == "reenactment":
        samples = dataio.generate_speaker_sequence(spec, count)
    else:
        samples = dataio.generate_dataset(spec, count)
    fractions = d.get("fractions", [0.5, 0.4, 0.1])
    parts = dataio.split_dataset(np.asarray([s.index for s in samples]), fractions)
    meta = {"task": cfg["task"], "spec": spec.to_dict(), "count": count,
            "splits": {name: [int(i) for i in part] for name, part in zip(SPLITS, parts)}}
    dataio.write_dataset(samples, cfg["out"], fmt=d.get("format", "vgf"), meta=meta)
    return EXIT_OK


def cmd_defend(args, cfg):
    data, meta = _read(args.data, args.split)
    train_cfg = dict(cfg["train"])
    train_cfg.setdefault("task", cfg["task"])
    train_cfg.setdefault("seed", cfg["seed"])
    if cfg.get("epsilon"):
        train_cfg["epsilon"] = _one_epsilon(cfg, 0.05)
    if args.arch:
        train_cfg["surrogate_arch"] = args.arch
    config = training.TrainConfig.from_dict(train_cfg)
    pg_best, state, history = training.run_two_stage(config, data, run_dir=cfg["out"], resume=args.resume,
                                                     checkpoint_every=args.checkpoint_every)
    evaluation.plot_history(history, os.path.join(cfg["out"], "loss_curves.png"))
    log.info("maxdist %.6f at step %d", state.maxdist, pg_best.step)
    return EXIT_OK


def _sidecar(path, indices, clean, poisoned, eps):
    rows = []
    for i, a, b in zip(indices, clean, poisoned):
        rows.append((int(i), evaluation.linf(a, b), evaluation.psnr(a, b)))
    with open(path, "w") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "linf", "psnr"])
        for i, l, p in rows:
            w.writerow([i, repr(l), repr(p)])
    bad = [r for r in rows if r[1] > eps]
    if bad:
        raise ContractViolation(f"{len(bad)} images exceed the budget {eps}, e.g. index {bad[0][0]} "
                                f"has |x'-x|_inf = {bad[0][1]}")


def _write_poisoned(data, meta, images, cfg, eps, fmt):
    out = dataio.FaceArrays(images, data.labels, data.landmarks, data.masks, data.keypoints, data.indices)
    meta = dict(meta, poisoned={"epsilon": eps})
    dataio.write_dataset(out, cfg["out"], fmt=fmt, meta=meta)
    _sidecar(os.path.join(cfg["out"], "poison.csv"), data.indices, data.images, images, eps)


def _load_pg(path):
    if not path:
        raise ConfigurationError("--generator is required")
    try:
        return load_checkpoint(path, role="PG")
    except OSError as exc:
        raise ConfigurationError(str(exc))


def cmd_poison(args, cfg):
    pg = _load_pg(args.generator)
    data, meta = _read(args.data, args.split)
    eps = _one_epsilon(cfg, 0.05)
    images = data.images.copy() if eps == 0 else training.poison_images(pg, data.images, eps)
    _write_poisoned(data, meta, images, cfg, eps, args.format)
    return EXIT_OK


def cmd_stack(args, cfg):
    pg_e, pg_r = _load_pg(args.generator), _load_pg(args.generator2)
    data, meta = _read(args.data, args.split)
    eps = cfg.get("epsilon") or [0.05, 0.02]
    if len(eps) != 2:
        raise ConfigurationError("stack takes --epsilon e1,e2")
    images = training.stack_perturbations(pg_e, pg_r, data.images, eps[0], eps[1])
    _write_poisoned(data, meta, images, cfg, eps[0] + eps[1], args.format)
    return EXIT_OK


def _parse_domains(text):
    """``own`` or a list of toggle sets such as ``hair,eyeglasses+smiling``."""
    if text is None:
        raise ConfigurationError("editing needs --domains (e.g. 'own' or 'hair,eyeglasses')")
    out = []
    for item in text.split(","):
        item = item.strip()
        groups = () if item == "own" else tuple(g for g in item.split("+") if g)
        for g in groups:
            if g not in training.TOGGLE_GROUPS:
                raise ConfigurationError(f"unknown toggle group {g!r}")
        out.append(groups)
    return out


def _train_target(args, cfg, data):
    t = cfg["target"]
    arch = args.arch or t["arch"]
    if arch not in GENERATOR_ARCHS:
        raise ConfigurationError(f"unknown architecture {arch!r}")
    domains = DOMAIN_SETS.get(t["domains"], t["domains"])
    if isinstance(domains, str):
        domains = domains.split(",")
    model = training.train_target_model(arch, data, task=cfg["task"], attributes=tuple(domains),
                                        infected=args.infected, iterations=int(t["iterations"]),
                                        seed=cfg["seed"])
    path = os.path.join(cfg["out"], "model.ckpt")
    save_checkpoint(model, path)
    return model


def cmd_forge(args, cfg):
    data, meta = _read(args.data, args.split)
    if args.train:
        if args.domains:
            cfg["target"]["domains"] = args.domains
        _train_target(args, cfg, data)
        return EXIT_OK
    if not args.model:
        raise ConfigurationError("--model is required (or --train to fit one)")
    try:
        model = load_checkpoint(args.model)
    except OSError as exc:
        raise ConfigurationError(str(exc))
    entries = []
    os.makedirs(os.path.join(cfg["out"], "forged"), exist_ok=True)
    if model.arch.conditioning == "landmark-concat":
        ys = [("frame", evaluation._run_translator(model, data.landmarks))]
    else:
        toggles = _parse_domains(args.domains)
        attrs = model.attributes or dataio.ATTRIBUTES
        cols = [dataio.ATTRIBUTES.index(a) for a in attrs]
        own = data.labels[:, cols]
        ys = []
        for t in toggles:
            bad = [g for g in t if g not in training.available_groups(attrs)]
            if bad:
                raise ConfigurationError(f"model has no attributes for groups {bad}")
            ys.append(("+".join(t) or "own",
                       evaluation._run_editor(model, data.images, training.apply_toggles(own, t, attrs))))
    for name, y in ys:
        for idx, img in zip(data.indices, y):
            rel = os.path.join("forged", f"{int(idx):06d}_{name}.vgf")
            dataio.save_image(img, os.path.join(cfg["out"], rel))
            entries.append({"index": int(idx), "domain": name, "file": rel})
    _write_json({"model": model.config(), "entries": entries}, os.path.join(cfg["out"], "forgeries.json"))
    return EXIT_OK


def _load_forgeries(root):
    try:
        with open(os.path.join(root, "forgeries.json")) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read forgeries in {root}: {exc}")
    return {(e["index"], e["domain"]): dataio.load_image(os.path.join(root, e["file"]))
            for e in manifest["entries"]}


def _eval_pairs(args, cfg):
    clean, infected = _load_forgeries(args.clean), _load_forgeries(args.infected)
    if len(clean) != len(infected) or set(clean) != set(infected):
        raise ConfigurationError(f"forgery sets differ: {len(clean)} clean vs {len(infected)} infected")
    kind = "L1" if cfg["task"] == "reenactment" else "L2"
    thr = cfg["eval"].get("threshold")
    if thr is None:
        thr = evaluation.REENACTMENT_THRESHOLD if kind == "L1" else evaluation.EDITING_THRESHOLD
    rep = evaluation.DefenseReport(setting={"task": cfg["task"], "threshold": thr})
    for index in sorted({k[0] for k in clean}):
        keys = sorted(k for k in clean if k[0] == index)
        pairs = [(clean[k], infected[k]) for k in keys]
        l1 = float(np.mean([evaluation.distance(a, b, "L1") for a, b in pairs]))
        l2 = float(np.mean([evaluation.distance(a, b, "L2") for a, b in pairs]))
        rep.per_image.append({"id": index, "l1": l1, "l2": l2,
                              "psnr": float(np.mean([evaluation.psnr(a, b) for a, b in pairs])),
                              "perceptual": float(np.mean([evaluation.perceptual_distance(a, b)
                                                           for a, b in pairs])),
                              "success": (l1 if kind == "L1" else l2) > thr})
    rep.write(cfg["out"], "report")
    first = sorted(clean)[0]
    dataio.save_image(evaluation.lbp_side_by_side(clean[first], infected[first]),
                      os.path.join(cfg["out"], "lbp.png"))
    return EXIT_OK


def _eval_sweep(args, cfg):
    if cfg["task"] != "attribute_editing":
        raise ConfigurationError("epsilon sweeps need --clean/--infected pairs for reenactment")
    pg = _load_pg(args.generator)
    data, meta = _read(args.data, args.split)
    if not args.model:
        raise ConfigurationError("--model is required")
    settings = []
    for path in args.model:
        try:
            m = load_checkpoint(path)
        except OSError as exc:
            raise ConfigurationError(f"missing target checkpoint: {exc}")
        attrs = list(m.attributes or dataio.ATTRIBUTES)
        dom = next((k for k, v in DOMAIN_SETS.items() if v == attrs), ",".join(attrs))
        settings.append(evaluation.TargetSetting(arch=m.arch.name, domain=dom, model=m))
    surrogate = {"arch": args.arch or "Res6", "domain": "SD"}
    eps_grid = cfg.get("epsilon") or cfg["eval"]["epsilons"]
    summaries = []
    for eps in eps_grid:
        for rep in evaluation.transfer_matrix(pg, surrogate, settings, data, eps,
                                              threshold=cfg["eval"].get("threshold")):
            s = rep.setting
            rep.write(os.path.join(cfg["out"], "reports"), f"{s['target']}_{s['domain']}_eps{eps:g}")
            summaries.append(rep.summary())
    _write_json(summaries, os.path.join(cfg["out"], "summary.json"))
    evaluation.plot_sweep(summaries, os.path.join(cfg["out"], "sweep.png"))
    eps = max(eps_grid)
    x = data.images[:1]
    xp = training.poison_images(pg, x, eps) if eps > 0 else x
    y, yp = (evaluation.editing_forgeries(settings[0].model, im, data.labels[:1])[0][0] for im in (x, xp))
    dataio.save_image(evaluation.lbp_side_by_side(y, yp), os.path.join(cfg["out"], "lbp.png"))
    return EXIT_OK


def cmd_eval(args, cfg):
    if args.clean or args.infected:
        if not (args.clean and args.infected):
            raise ConfigurationError("--clean and --infected go together")
        return _eval_pairs(args, cfg)
    return _eval_sweep(args, cfg)


COMMANDS = {"generate": cmd_generate, "defend": cmd_defend, "poison": cmd_poison, "forge": cmd_forge,
            "eval": cmd_eval, "stack": cmd_stack}


def build_parser():
    p = argparse.ArgumentParser(prog="venomguard", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--task", choices=training.TASKS)
        sp.add_argument("--epsilon", help="budget, or a comma separated list where allowed")
        sp.add_argument("--arch", help="surrogate (defend) or target (forge --train) architecture")
        sp.add_argument("--domains", help="attribute set (SD, DD or names) or toggle groups for forging")
        sp.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
        sp.add_argument("--data", help="dataset directory")
        sp.add_argument("--split", choices=SPLITS, help="use one split of the dataset")
        sp.add_argument("--format", choices=("vgf", "png"), default="vgf")
        return sp

    g = common(sub.add_parser("generate", help="write a synthetic dataset"))
    g.add_argument("--count", type=int)
    g.add_argument("--resolution", type=int)

    d = common(sub.add_parser("defend", help="train a perturbation generator"))
    d.add_argument("--maxiter", type=int)
    d.add_argument("--checkpoint-every", type=int, default=0)

    for name, helptext in (("poison", "perturb a dataset"), ("stack", "apply two generators in turn")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--generator", help="PG checkpoint")
        if name == "stack":
            sp.add_argument("--generator2", help="second (reenactment) PG checkpoint")

    f = common(sub.add_parser("forge", help="run or train a forger's model"))
    f.add_argument("--model", help="target checkpoint")
    f.add_argument("--train", action="store_true", help="train a target model on --data")
    f.add_argument("--infected", action="store_true", help="mark the trained model as infected")
    f.add_argument("--iterations", type=int)

    e = common(sub.add_parser("eval", help="score forgeries and write reports"))
    e.add_argument("--clean", help="forgeries of clean inputs")
    e.add_argument("--infected", help="forgeries of poisoned inputs")
    e.add_argument("--generator", help="PG checkpoint for an epsilon sweep")
    e.add_argument("--model", action="append", help="target checkpoint (repeatable)")
    return p


def _threads():
    raw = os.environ.get("VENOMGUARD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"VENOMGUARD_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigurationError("VENOMGUARD_THREADS must be >= 1")
    torch.set_num_threads(n)


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _threads()
        cfg = resolve_config(args)
        _persist(cfg, args.command, args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigurationError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
