"""Command-line front end.

    daedalus gen-scenes --out scenes/ --count 200 --seed 0
    daedalus train --scenes scenes/ --variant A --out model.bin
    daedalus detect --model model.bin --image scene.png --out dets.json
    daedalus attack --model model.bin --image scene.png --gamma 0.3 --out adv.png
    daedalus sweep --model model.bin --scenes scenes/ --out report.csv
    daedalus poster --model model.bin --scenes scenes/ --out poster.png

Every command accepts ``--config FILE`` with one ``key=value`` per line
('#' starts a comment).  Flags override the file, which overrides defaults.
Exit codes: 0 ok, 1 usage, 2 I/O, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("daedalus")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    text = text.strip()
    if ":" in text:  # start:stop:step, inclusive of stop
        a, b, s = (float(t) for t in text.split(":"))
        n = int(round((b - a) / s)) + 1
        return [round(a + i * s, 10) for i in range(n)]
    return [float(t) for t in text.split(",") if t.strip()]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text}")


# (flag, dest, type, default, help) per command
COMMANDS = {
    "gen-scenes": [
        ("--out", "out", str, None, "output directory"),
        ("--count", "count", int, 200, "number of scenes"),
        ("--size", "size", int, 64, "image side in pixels"),
        ("--max-objects", "max_objects", int, 4, "objects per scene (uniform 0..M)"),
        ("--num-classes", "num_classes", int, 4, "shape classes used"),
    ],
    "train": [
        ("--scenes", "scenes", str, None, "training scene directory"),
        ("--heldout", "heldout", str, None, "held-out scene directory (default: 200 fresh scenes)"),
        ("--variant", "variant", str, "A", "architecture variant A, B or C"),
        ("--epochs", "epochs", int, 60, "training epochs"),
        ("--lr", "lr", float, 3e-3, "Adam learning rate"),
        ("--batch-size", "batch_size", int, 16, "minibatch size"),
        ("--weight-decay", "weight_decay", float, 0.0, "decoupled weight decay"),
        ("--out", "out", str, None, "model file to write"),
    ],
    "detect": [
        ("--model", "model", str, None, "model file"),
        ("--image", "image", str, None, "input PNG"),
        ("--threshold", "threshold", float, 0.5, "objectness threshold"),
        ("--nt", "nt", float, 0.5, "NMS IoU threshold"),
        ("--nms", "nms", str, "hard", "hard, soft-linear or soft-gaussian"),
        ("--min-area", "min_area", float, 0.0, "dimension-floor defence (px^2, 0 = off)"),
        ("--out", "out", str, None, "detections JSON"),
    ],
    "attack": [
        ("--model", "model", str, None, "model file(s), comma separated for an ensemble"),
        ("--image", "image", str, None, "input PNG"),
        ("--norm", "norm", str, "l2", "l2 or l0"),
        ("--gamma", "gamma", float, 0.3, "attack confidence in [0, 1)"),
        ("--targets", "targets", str, "all", "'all' or comma-separated class ids"),
        ("--loss", "loss", str, "f3", "f1, f2 or f3"),
        ("--eta", "eta", float, 1e-2, "gradient step"),
        ("--max-iteration", "max_iteration", int, 500, "steps per binary-search round"),
        ("--binary-steps", "binary_steps", int, 5, "binary-search rounds"),
        ("--c-min", "c_min", float, 0.0, "lower bound on c"),
        ("--c-max", "c_max", float, 1e4, "upper bound on c"),
        ("--l0-fraction", "l0_fraction", float, 0.1, "pixels updated per L0 step"),
        ("--out", "out", str, None, "adversarial PNG"),
        ("--trace", "trace", str, None, "per-iteration trace CSV"),
    ],
    "sweep": [
        ("--model", "model", str, None, "attack model file(s), comma separated"),
        ("--eval-model", "eval_model", str, None, "model scored (default: first attack model)"),
        ("--scenes", "scenes", str, None, "scene directory"),
        ("--count", "count", int, 10, "scenes used (first N in name order)"),
        ("--gammas", "gammas", _floats, [round(0.1 * k, 10) for k in range(1, 10)], "gamma grid, list or a:b:step"),
        ("--nts", "nts", _floats, [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95], "NMS grid"),
        ("--nms", "nms", str, "hard", "hard, soft-linear or soft-gaussian"),
        ("--min-areas", "min_areas", _floats, [0.0], "dimension-floor settings (px^2)"),
        ("--iou-matches", "iou_matches", _floats, [0.5, 0.75], "TP matching thresholds"),
        ("--benign", "benign", _bool, True, "include the unattacked row"),
        ("--norm", "norm", str, "l2", "l2 or l0"),
        ("--targets", "targets", str, "all", "'all' or class ids"),
        ("--loss", "loss", str, "f3", "f1, f2 or f3"),
        ("--eta", "eta", float, 1e-2, "gradient step"),
        ("--max-iteration", "max_iteration", int, 500, "steps per round"),
        ("--binary-steps", "binary_steps", int, 5, "binary-search rounds"),
        ("--jobs", "jobs", int, 1, "worker processes for independent attacks"),
        ("--out", "out", str, None, "report CSV"),
    ],
    "poster": [
        ("--model", "model", str, None, "model file(s)"),
        ("--scenes", "scenes", str, None, "scene directory (frames the poster is optimized on)"),
        ("--count", "count", int, 10, "scenes used"),
        ("--size", "size", int, 32, "poster side in pixels"),
        ("--beta", "beta", float, 0.01, "SNPS sample rate"),
        ("--steps", "steps", int, 1500, "descent steps"),
        ("--eta", "eta", float, 50.0, "gradient step"),
        ("--samples-per-step", "samples_per_step", int, 8, "(scene, transform) pairs per step"),
        ("--eval-samples", "eval_samples", int, 100, "fresh transforms for the FP check"),
        ("--out", "out", str, None, "poster PNG"),
    ],
}
REQUIRED = {
    "gen-scenes": ["out"],
    "train": ["scenes", "out"],
    "detect": ["model", "image"],
    "attack": ["model", "image", "out"],
    "sweep": ["model", "scenes", "out"],
    "poster": ["model", "scenes", "out"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="daedalus", description="NMS-breaking attack lab on micro detectors.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (default 0)")
        p.add_argument("--log-level", default="WARNING")
        for flag, dest, typ, _default, helptext in options:
            p.add_argument(flag, dest=dest, type=typ, default=argparse.SUPPRESS, help=helptext)
    return parser


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, then config file, then flags."""
    known = {dest: (typ, default) for _f, dest, typ, default, _h in COMMANDS[command]}
    known["seed"] = (int, 0)
    cfg = {dest: default for dest, (_t, default) in known.items()}
    if ns.config:
        try:
            filed = read_config(ns.config)
        except OSError as exc:
            raise InputError(f"cannot read config {ns.config}: {exc}") from exc
        for k, v in filed.items():
            if k not in known:
                raise UsageError(f"unknown config key {k!r} for {command}")
            try:
                cfg[k] = known[k][0](v)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {k}: {exc}") from exc
    for dest in known:
        if hasattr(ns, dest):
            cfg[dest] = getattr(ns, dest)
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def write_manifest(path, command: str, cfg: dict, inputs: list, outputs: list, extra=None) -> None:
    from .imageio import file_sha256, save_json

    def hashes(paths):
        return {str(p): file_sha256(p) for p in sorted(map(str, paths))}

    manifest = {
        "command": command,
        "version": __version__,
        "config": {k: v for k, v in sorted(cfg.items())},
        "inputs": hashes(inputs),
        "outputs": hashes(outputs),
    }
    if extra:
        manifest.update(extra)
    save_json(path, manifest)


def _ensure_parent(path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {path.parent}: {exc}") from exc
    return path


def _load_models(paths_arg: str):
    from .detector import load_model

    paths = [p for p in paths_arg.split(",") if p]
    models = []
    for p in paths:
        try:
            models.append(load_model(p))
        except (OSError, ValueError, KeyError, struct.error) as exc:
            raise InputError(f"cannot load model {p}: {exc}") from exc
    return models, paths


def _load_image(path, side=None):
    from .imageio import load_png

    try:
        img = load_png(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    if side is not None and img.shape != (side, side, 3):
        raise InputError(f"{path}: image shape {img.shape} does not match model input side {side}")
    return img


def _load_scenes(directory, count=None):
    from .scenes import load_scene

    pngs = sorted(Path(directory).glob("*.png")) if Path(directory).is_dir() else []
    if not pngs:
        raise InputError(f"no scenes found in {directory}")
    if count:
        pngs = pngs[:count]
    scenes = []
    for p in pngs:
        try:
            scenes.append(load_scene(p))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise InputError(f"corrupt scene {p.with_suffix('.json')}: {exc}") from exc
    return scenes, pngs


# -- commands ------------------------------------------------------------------


def cmd_gen_scenes(cfg):
    from .scenes import generate, save_scene

    if cfg["count"] < 1:
        raise UsageError("--count must be >= 1")
    if cfg["size"] < 8 or cfg["size"] % 8:
        raise UsageError("--size must be a positive multiple of 8")
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {out}: {exc}") from exc
    scenes = generate(cfg["seed"], cfg["count"], cfg["size"], cfg["max_objects"], cfg["num_classes"])
    written = []
    width = max(4, len(str(cfg["count"] - 1)))
    try:
        for k, sc in enumerate(scenes):
            written.extend(save_scene(sc, out, f"scene_{k:0{width}d}"))
    except OSError as exc:
        raise InputError(f"cannot write scenes to {out}: {exc}") from exc
    write_manifest(out / "manifest.json", "gen-scenes", cfg, [], written,
                   {"objects": [len(s.truths) for s in scenes]})
    print(f"wrote {len(scenes)} scenes to {out}")


def cmd_train(cfg):
    from .detector import build_micro, detect, save_model, train_micro, VARIANTS
    from .evaluation import mean_average_precision
    from .scenes import generate

    if cfg["variant"] not in VARIANTS:
        raise UsageError(f"--variant must be one of {sorted(VARIANTS)}")
    scenes, pngs = _load_scenes(cfg["scenes"])
    side = scenes[0].image.shape[0]
    model = build_micro(cfg["seed"], cfg["variant"], input_side=side)
    trained = train_micro(model, scenes, cfg["epochs"], cfg["lr"], cfg["seed"], cfg["batch_size"],
                          progress=lambda e, loss: print(f"epoch {e:3d} loss {loss:.4f}", flush=True),
                          weight_decay=cfg["weight_decay"])
    if cfg["heldout"]:
        held, held_pngs = _load_scenes(cfg["heldout"])
    else:
        held, held_pngs = generate(cfg["seed"] + 1, 200, side), []
    dets = [detect(s.image, trained) for s in held]
    m, per_class = mean_average_precision(dets, [s.truths for s in held], trained.num_classes, 0.5)
    trained.train_log["heldout_map50"] = m
    out = _ensure_parent(cfg["out"])
    try:
        save_model(trained, out)
    except OSError as exc:
        raise InputError(f"cannot write {out}: {exc}") from exc
    write_manifest(str(out) + ".manifest.json", "train", cfg, pngs + held_pngs, [out],
                   {"heldout_map50": m, "per_class_ap50": {str(k): v for k, v in per_class.items()}})
    print(f"variant {cfg['variant']}: {trained.parameter_count()} parameters; "
          f"held-out mAP@.50 = {m:.3f} on {len(held)} scenes")


def cmd_detect(cfg):
    from .detector import NMS_KINDS, detect
    from .imageio import save_json

    if cfg["nms"] not in NMS_KINDS:
        raise UsageError(f"--nms must be one of {NMS_KINDS}")
    models, mpaths = _load_models(cfg["model"])
    model = models[0]
    img = _load_image(cfg["image"], model.input_side)
    dets = detect(img, model, cfg["threshold"], cfg["nt"], cfg["nms"], cfg["min_area"])
    rows = [{"class_id": int(c), "score": float(s), "cx": float(x), "cy": float(y), "w": float(w), "h": float(h)}
            for (x, y, w, h), s, c in zip(dets.xywh, dets.scores, dets.class_ids)]
    payload = {"image": str(cfg["image"]), "model": model.id, "detections": rows}
    if cfg["out"]:
        out = _ensure_parent(cfg["out"])
        try:
            save_json(out, payload)
        except OSError as exc:
            raise InputError(f"cannot write {out}: {exc}") from exc
        write_manifest(str(out) + ".manifest.json", "detect", cfg, mpaths + [cfg["image"]], [out])
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))
    print(f"{len(rows)} detections", file=sys.stderr)


def _attack_config(cfg):
    from .attack import AttackConfig
    from .losses import TargetSet

    if not 0.0 <= cfg["gamma"] < 1.0:
        raise UsageError("--gamma must be in [0, 1)")
    try:
        targets = TargetSet.parse(cfg["targets"])
        return AttackConfig(
            gamma=cfg["gamma"], targets=targets, norm=cfg["norm"], eta=cfg["eta"],
            max_iteration=cfg["max_iteration"], binary_steps=cfg["binary_steps"],
            c_min=cfg.get("c_min", 0.0), c_max=cfg.get("c_max", 1e4), seed=cfg["seed"],
            loss_kind=cfg["loss"], l0_top_fraction=cfg.get("l0_fraction", 0.1),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_attack(cfg):
    from .attack import run_attack
    from .imageio import save_json, save_png

    acfg = _attack_config(cfg)
    models, mpaths = _load_models(cfg["model"])
    sides = {m.input_side for m in models}
    if len(sides) != 1:
        raise InputError("ensemble models disagree on input side")
    img = _load_image(cfg["image"], sides.pop())
    for m in models:
        try:
            acfg.targets.resolve(m.num_classes)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    out = _ensure_parent(cfg["out"])
    trace = cfg["trace"] or str(out.with_suffix("")) + "_trace.csv"
    res = run_attack(img, models, acfg, trace_path=trace)
    stem = str(out.with_suffix(""))
    pert = stem + "_perturbation.png"
    result_json = stem + ".json"
    try:
        save_png(out, res.adversarial)
        # offset encoding: 0.5 + delta / 2 maps [-1, 1] onto [0, 1]
        save_png(pert, 0.5 + 0.5 * res.perturbation)
        summary = res.summary()
        summary.update({"models": [m.id for m in models], "gamma": acfg.gamma, "norm": acfg.norm,
                        "targets": str(acfg.targets), "loss": acfg.loss_kind})
        save_json(result_json, summary)
    except OSError as exc:
        raise InputError(f"cannot write attack outputs: {exc}") from exc
    write_manifest(stem + ".manifest.json", "attack", cfg, mpaths + [cfg["image"]],
                   [out, pert, trace, result_json])
    status = "success" if res.success else "no adversarial example found"
    print(f"{status}: L2 {res.l2_distortion:.4f}, L0 {res.l0_distortion} px, best c {res.best_c:.4g}")


def cmd_sweep(cfg):
    from .detector import NMS_KINDS
    from .evaluation import sweep

    if cfg["nms"] not in NMS_KINDS:
        raise UsageError(f"--nms must be one of {NMS_KINDS}")
    if not cfg["gammas"] and not cfg["benign"]:
        raise UsageError("empty gamma grid")
    if not cfg["nts"]:
        raise UsageError("empty NMS threshold grid")
    for g in cfg["gammas"]:
        if not 0.0 <= g < 1.0:
            raise UsageError("gammas must be in [0, 1)")
    if cfg["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    acfg = _attack_config({**cfg, "gamma": cfg["gammas"][0] if cfg["gammas"] else 0.0})
    models, mpaths = _load_models(cfg["model"])
    eval_model, epaths = None, []
    if cfg["eval_model"]:
        (eval_model,), epaths = _load_models(cfg["eval_model"])
    scenes, pngs = _load_scenes(cfg["scenes"], cfg["count"])
    side = models[0].input_side
    for p, s in zip(pngs, scenes):
        if s.image.shape != (side, side, 3):
            raise InputError(f"{p}: image does not match model input side {side}")
    report = sweep(scenes, models, cfg["gammas"], cfg["nts"], cfg["nms"], cfg["min_areas"],
                   cfg["iou_matches"], acfg, cfg["benign"], eval_model, jobs=cfg["jobs"])
    out = _ensure_parent(cfg["out"])
    try:
        report.write_csv(out)
    except OSError as exc:
        raise InputError(f"cannot write {out}: {exc}") from exc
    write_manifest(str(out) + ".manifest.json", "sweep", cfg, mpaths + epaths + pngs, [out])
    print(f"wrote {len(report.cells)} rows to {out}")


def cmd_poster(cfg):
    from .attack import AttackConfig
    from .eot import evaluate_poster, optimize_poster, save_poster

    models, mpaths = _load_models(cfg["model"])
    scenes, pngs = _load_scenes(cfg["scenes"], cfg["count"])
    side = models[0].input_side
    for p, s in zip(pngs, scenes):
        if s.image.shape != (side, side, 3):
            raise InputError(f"{p}: image does not match model input side {side}")
    if not 0.0 < cfg["beta"] <= 1.0:
        raise UsageError("--beta must be in (0, 1]")
    if cfg["size"] < 1 or cfg["size"] > side:
        raise UsageError(f"--size must be in 1..{side}")
    acfg = AttackConfig(eta=cfg["eta"], max_iteration=cfg["steps"], seed=cfg["seed"])
    poster = optimize_poster(scenes, models, acfg, (cfg["size"], cfg["size"]), cfg["beta"],
                             cfg["samples_per_step"])
    ev = evaluate_poster(poster, scenes, models[0], cfg["eval_samples"], seed=cfg["seed"] + 1)
    fp = ev["fp_rate"]
    out = _ensure_parent(cfg["out"])
    try:
        sidecar = save_poster(poster, out, cfg["seed"], scenes, {
            "steps": cfg["steps"], "eta": cfg["eta"], "samples_per_step": cfg["samples_per_step"],
            "eval_fp_rate50": None if not isinstance(fp, float) else fp,
            "eval_samples": cfg["eval_samples"], "eval_no_detections": ev["n_undefined"],
        })
    except OSError as exc:
        raise InputError(f"cannot write {out}: {exc}") from exc
    write_manifest(str(out) + ".manifest.json", "poster", cfg, mpaths + pngs, [out, sidecar])
    fp_text = f"{fp:.3f}" if isinstance(fp, float) else "undefined (no detections)"
    print(f"poster FP rate@.50 over {cfg['eval_samples']} fresh transforms: {fp_text}")


HANDLERS = {
    "gen-scenes": cmd_gen_scenes,
    "train": cmd_train,
    "detect": cmd_detect,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "poster": cmd_poster,
}


def main(argv=None) -> int:
    from .detector import TrainingDiverged

    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if not ns.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(ns.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        HANDLERS[ns.command](cfg)
    except UsageError as exc:
        print(f"daedalus {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"daedalus {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"daedalus {ns.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, TrainingDiverged) as exc:
        print(f"daedalus {ns.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
