"""Command-line entry point: synth, train, eval, fit, render.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Settings resolve as CLI flags > config file (YAML) > defaults; the effective
values are written to ``<out>/config.yaml``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
import yaml

from handface import autodiff as ad
from handface.camrender import rasterize_depth, write_pfm
from handface.data import DatasetError, SynthConfig, SynthesisError, make_toy_models, read_dataset, synth_dataset, write_dataset
from handface.meshcore.fitting import FitError, fit_parameters_lm
from handface.meshcore.model import AssetError, PoseState, lbs_forward
from handface.metrics import evaluate, oracle_predictions
from handface.network import FACE_OFFSET, HandFaceNet, NetConfig, load_checkpoint
from handface.training import LossWeights, TrainConfig, Trainer, predict

log = logging.getLogger("handface")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} does not exist")
    with open(p) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {p} must hold a mapping")
    return cfg


def _merge(cls, file_section: dict | None, overrides: dict):
    names = {f.name for f in fields(cls)}
    vals = dict(file_section or {})
    bad = set(vals) - names
    if bad:
        raise UsageError(f"unknown {cls.__name__} keys in config: {sorted(bad)}")
    vals.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**vals)


def _parse_sets(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = yaml.safe_load(v)
    return out


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _echo_config(out: Path, **sections) -> None:
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(sections, fh, sort_keys=True)


def _read(path):
    if not Path(path).exists():
        raise DatasetError(f"dataset {path} does not exist")
    return read_dataset(path, with_header=True)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfgf = _load_config(args.config)
    over = _parse_sets(args.set)
    over["seed"] = args.seed if args.seed is not None else cfgf.get("seed", over.get("seed"))
    sc = _merge(SynthConfig, cfgf.get("synth"), over)
    out = Path(args.out)
    if not out.parent.exists():
        raise DatasetError(f"output directory {out.parent} does not exist")
    models = make_toy_models()
    samples = synth_dataset(models, sc, args.labeled, args.wild)
    write_dataset(out, samples, sc.to_dict())
    print(f"wrote {args.labeled} labeled + {args.wild} wild samples to {out}")
    return EXIT_OK


def _train_settings(args, cfgf):
    tover = {"seed": args.seed, "batch_size": args.batch_size, "lr": args.lr}
    if args.no_wild:
        tover["use_wild"] = False
    if args.clip_grad is not None:
        tover["clip_grad"] = args.clip_grad
    if tover["seed"] is None and "seed" in cfgf:
        tover["seed"] = cfgf["seed"]
    tc = _merge(TrainConfig, cfgf.get("train"), tover)
    wover = {"adv": args.lambda_adv, "depth": args.lambda_depth}
    wover.update(_parse_sets(args.weight))
    lw = _merge(LossWeights, cfgf.get("weights"), wover)
    nover = {"hidden": args.hidden, "face_tokens": args.face_tokens}
    nover.update(_parse_sets(args.net))
    return tc, lw, nover


def cmd_train(args) -> int:
    cfgf = _load_config(args.config)
    models = make_toy_models()
    samples, _ = _read(args.data)
    out = _outdir(args.out)
    ckpt = out / "checkpoint.npz"
    if args.resume:
        if not Path(args.resume).exists():
            raise DatasetError(f"checkpoint {args.resume} does not exist")
        tr = Trainer.load(args.resume, models)
        log.info("resumed at step %d", tr.step)
    else:
        tc, lw, nover = _train_settings(args, cfgf)
        nc_file = dict(cfgf.get("net") or {})
        nc_file.update({k: v for k, v in nover.items() if v is not None})
        nc = NetConfig.for_models(models, **nc_file)
        tr = Trainer(models, nc, tc, lw)
    _echo_config(out, train=tr.cfg.to_dict(), weights=tr.weights.to_dict(), net=tr.net.cfg.to_dict(),
                 data=str(args.data), steps=args.steps)
    history = []
    target = tr.step + args.steps if args.resume else args.steps
    try:
        while tr.step < target:
            n = min(args.save_every or target, target - tr.step)
            history += tr.fit(samples, n, log_path=out / "metrics.jsonl")
            tr.save(ckpt)
    except FloatingPointError as exc:
        tr.save(ckpt)  # the failing step never reached the optimizer
        print(f"numerical failure: {exc}; last good checkpoint at {ckpt}", file=sys.stderr)
        return EXIT_NUMERIC
    if history and not args.no_plots:
        from handface.plots import loss_curves
        loss_curves(history, out / "loss.png")
    last = history[-1]["total"] if history else float("nan")
    print(f"step {tr.step}  total {last:.6g}  checkpoint {ckpt}")
    return EXIT_OK


def _labeled(samples):
    lab = [s for s in samples if s.kind == "labeled"]
    if not lab:
        raise DatasetError("dataset holds no labeled samples")
    return lab


def _write_report(rep, out: Path, name: str, plots: bool) -> None:
    rep.to_json(out / "report.json")
    with open(out / "frames.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=sorted(rep.frames[0]) if rep.frames else ["pve_mm"])
        wr.writeheader()
        for row in rep.frames:
            wr.writerow(row)
    if plots:
        from handface.plots import eval_figures
        eval_figures(rep, out / "eval.png")
    print(rep.table_row(name))


def cmd_eval(args) -> int:
    models = make_toy_models()
    samples, _ = _read(args.data)
    lab = _labeled(samples)
    out = _outdir(args.out)
    if args.oracle:
        preds, name = oracle_predictions(lab), "oracle"
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --oracle")
        net = _load_net(args.checkpoint, models)
        preds, name = predict(net, lab), "network"
    rep = evaluate(preds, lab, models, tau=args.tau, col_mode=args.col_mode)
    _echo_config(out, data=str(args.data), checkpoint=str(args.checkpoint), tau=args.tau,
                 col_mode=args.col_mode, oracle=bool(args.oracle))
    _write_report(rep, out, name, not args.no_plots)
    return EXIT_OK


def _load_net(path, models) -> HandFaceNet:
    if not Path(path).exists():
        raise DatasetError(f"checkpoint {path} does not exist")
    from handface.meshcore.model import read_npz
    header, _ = read_npz(path)
    net = HandFaceNet(models, NetConfig.from_dict(header["net_config"]))
    load_checkpoint(path, {"net": net})
    net.eval()
    return net


def _fit_init(model, kp2d, camera, depth: float, offset=None) -> PoseState:
    st = PoseState.zeros(model)
    if offset is not None:
        st.root_translation = torch.as_tensor(np.asarray(offset, dtype=np.float64))
        return st
    u, v = np.asarray(kp2d).mean(0)
    ray = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0]) * depth
    world = camera.rotation.T @ (ray - camera.translation)
    st.root_translation = torch.as_tensor(world - model.template_vertices.mean(0))
    return st


def _fit_one(model, init, kp2d, camera, free, max_iter):
    try:
        res = fit_parameters_lm(model, init, target_keypoints2d=kp2d, camera=camera, free=free,
                                max_iter=max_iter)
        return res, None
    except FitError as exc:
        return None, str(exc)


def cmd_fit(args) -> int:
    models = make_toy_models()
    face, hand = models
    samples, _ = _read(args.data)
    lab = _labeled(samples)
    out = _outdir(args.out)
    # hand shape stays free: with it pinned to the mean the 2D residual floors near 1 px
    free_h = np.ones(3 * hand.num_joints + hand.num_shape + 6, dtype=bool)
    free_f = np.ones(3 * face.num_joints + face.num_shape + face.num_expression + 6, dtype=bool)
    free_f[:3 * face.num_joints] = False  # the single joint duplicates the root rotation
    preds, rows = [], []
    for i, s in enumerate(lab):
        cam = s.get_camera()
        rh, eh = _fit_one(hand, _fit_init(hand, s.hand_keypoints2d, cam, 0.55), s.hand_keypoints2d, cam,
                          free_h, args.max_iter)
        rf, ef = _fit_one(face, _fit_init(face, None, cam, 0.6, FACE_OFFSET), s.face_keypoints2d, cam,
                          free_f, args.max_iter)
        ok = rh is not None and rf is not None
        sh = rh.state if rh else PoseState.zeros(hand)
        sf = rf.state if rf else PoseState.zeros(face)
        hv = lbs_forward(hand, sh)[0].numpy()
        fv = lbs_forward(face, sf)[0].numpy()
        preds.append({"hand_v": hv, "face_v": fv, "deformation": np.zeros_like(fv),
                      "hand_kp": hand.keypoint_regressor @ hv, "face_kp": face.keypoint_regressor @ fv,
                      "contact_hand": np.zeros(hand.num_vertices), "contact_face": np.zeros(face.num_vertices)})
        rows.append({"index": i, "hand_rms_px": rh.rms if rh else None, "face_rms_px": rf.rms if rf else None,
                     "hand_iterations": rh.iterations if rh else None,
                     "face_iterations": rf.iterations if rf else None,
                     "converged": bool(ok and rh.converged and rf.converged),
                     "error": eh or ef})
        if not rows[-1]["converged"]:
            log.warning("sample %d: fit flagged (%s)", i, rows[-1]["error"] or "not converged")
    with open(out / "fit.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    rep = evaluate(preds, lab, models, tau=args.tau)
    _echo_config(out, data=str(args.data), max_iter=args.max_iter, tau=args.tau)
    _write_report(rep, out, "lm-fit", not args.no_plots)
    return EXIT_OK


def cmd_render(args) -> int:
    models = make_toy_models()
    face, hand = models
    samples, _ = _read(args.data)
    out = _outdir(args.out)
    lab = _labeled(samples)
    idx = args.indices if args.indices else list(range(len(lab)))
    if args.source == "pred" and not args.checkpoint:
        raise UsageError("render --source pred needs --checkpoint")
    net = _load_net(args.checkpoint, models) if args.source == "pred" else None
    for i in idx:
        if not 0 <= i < len(lab):
            raise DatasetError(f"sample index {i} out of range (0..{len(lab) - 1})")
        s = lab[i]
        cam = s.get_camera().resized(args.width, args.height)
        if args.source == "empty":
            meshes = []
        elif args.source == "gt":
            meshes = [(s.hand_vertices, hand.faces), (s.deformed_face, face.faces)]
        else:
            p = predict(net, [s])[0]
            meshes = [(p["hand_v"], hand.faces), (p["face_v"] + p["deformation"], face.faces)]
        depth = rasterize_depth(meshes, cam).depth
        write_pfm(out / f"depth_{i:05d}.pfm", depth)
        if args.preview:
            from handface.plots import depth_preview
            depth_preview(depth, out / f"depth_{i:05d}.png")
    print(f"wrote {len(idx)} depth maps ({args.width}x{args.height}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="handface", description=__doc__.splitlines()[0])
    ap.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--labeled", type=int, default=64)
    s.add_argument("--wild", type=int, default=500)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="SynthConfig override")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the network")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--seed", type=int)
    t.add_argument("--config")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda-adv", type=float)
    t.add_argument("--lambda-depth", type=float)
    t.add_argument("--no-wild", action="store_true")
    t.add_argument("--clip-grad", type=float)
    t.add_argument("--hidden", type=int)
    t.add_argument("--face-tokens", choices=["low", "mid", "high"])
    t.add_argument("--weight", action="append", metavar="KEY=VALUE", help="LossWeights override")
    t.add_argument("--net", action="append", metavar="KEY=VALUE", help="NetConfig override")
    t.add_argument("--save-every", type=int, default=0)
    t.add_argument("--no-plots", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on labeled samples")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    e.add_argument("--tau", type=float, default=0.004)
    e.add_argument("--col-mode", choices=["penetrating", "all"], default="penetrating")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fit", help="LM keypoint-fitting baseline")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--max-iter", type=int, default=200)
    f.add_argument("--tau", type=float, default=0.004)
    f.add_argument("--no-plots", action="store_true")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", help="write depth maps as PFM")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--source", choices=["gt", "pred", "empty"], default="gt")
    r.add_argument("--checkpoint")
    r.add_argument("--width", type=int, default=128)
    r.add_argument("--height", type=int, default=128)
    r.add_argument("--indices", type=int, nargs="*")
    r.add_argument("--preview", action="store_true")
    r.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        ad.configure(deterministic=True, threads=1)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, AssetError, SynthesisError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, FitError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
