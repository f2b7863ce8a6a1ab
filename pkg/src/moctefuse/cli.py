"""``moctefuse`` command line: training, inference, evaluation and verification.

Exit codes: 0 success, 1 verification failure, 2 input error,
3 checkpoint error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config, verify
from . import tensor as T
from ._kernels import backend
from .data import _stems, discover, load_pair, luma, make_synthetic_corpus, read_image, resize, save_fused
from .errors import CheckpointError, ContractError, IngestionError, TrainingError
from .fusion import FusionConfig, MoCTEFuse
from .gate import GateConfig, IllumGate, gate_forward
from .metrics import aggregate, evaluate_image, write_report
from .trainer import Adam, train_fuse, train_gate

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _default_seed():
    env = os.environ.get("MOCTEFUSE_SEED")
    return int(env) if env else None


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


# -- checkpoint helpers ----------------------------------------------------------

def save_model(path, kind, cfg_dict, module, meta, optimizer=None):
    checkpoint.save(path, kind, cfg_dict, module.state_dict(), meta)
    if optimizer is not None:
        checkpoint.save(str(path) + ".adam", "adam", {}, optimizer.state(),
                        {"step": optimizer.step_count})


def load_gate(path):
    header, params = checkpoint.load(path, kind="gate")
    try:
        gate = IllumGate(GateConfig.from_dict(header["config"]))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad gate config: {exc}") from exc
    checkpoint.apply(gate, params)
    return gate, header


def load_fusion(path):
    header, params = checkpoint.load(path, kind="fusion")
    try:
        model = MoCTEFuse(FusionConfig.from_dict(header["config"]))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad fusion config: {exc}") from exc
    checkpoint.apply(model, params)
    return model, header


def _load_optimizer(path, module):
    opt = Adam(module.named_parameters())
    adam_path = str(path) + ".adam"
    if os.path.exists(adam_path):
        header, arrays = checkpoint.load(adam_path, kind="adam")
        opt.load_state(arrays, header["meta"]["step"])
    return opt


def _conf_from_args(args, stage):
    overrides = {stage: {"seed": args.seed, "epochs": args.epochs, "max_steps": args.max_steps,
                           "lr": args.lr, "batch_size": args.batch_size, "crop": getattr(args, "crop", None)}}
    return config.load(args.config, overrides)


# -- commands ------------------------------------------------------------------

def cmd_make_synthetic(args):
    ids = make_synthetic_corpus(args.out, n_pairs=args.pairs, size=args.size, seed=args.seed)
    print(f"wrote {len(ids)} pairs to {args.out}")
    return EXIT_OK


def cmd_train_gate(args):
    conf = _conf_from_args(args, "train-gate")
    gcfg = config.gate_config(conf)
    tcfg = config.train_config(conf, "train-gate")
    try:
        ds = discover(args.data, require_labels=True)
        pairs = ds.pairs()
    except (IngestionError, OSError) as exc:
        _err(exc)
        return EXIT_INPUT
    images = [p.vi if p.vi.ndim == 3 else np.repeat(p.vi[..., None], 3, -1) for p in pairs]
    shapes = {im.shape for im in images}
    if len(shapes) != 1 and gcfg.input_size is None:
        _err(f"visible images differ in size {sorted(shapes)[:3]}; set [gate] input_size")
        return EXIT_INPUT
    labels = np.array([p.label for p in pairs])
    val = None
    frac = float(conf["train-gate"].get("val_fraction", 0.0))
    if frac > 0:
        rng = np.random.default_rng(tcfg.seed)
        order = rng.permutation(len(images))
        n_val = max(1, int(round(frac * len(images))))
        val = ([images[i] for i in order[:n_val]], labels[order[:n_val]])
        images = [images[i] for i in order[n_val:]]
        labels = labels[order[n_val:]]
    gate, opt, start = None, None, 0
    try:
        if args.resume:
            gate, header = load_gate(args.resume)
            opt = _load_optimizer(args.resume, gate)
            start = int(header["meta"].get("step", 0))
        gate, opt, hist = train_gate(images, labels, gcfg, tcfg, val=val, gate=gate,
                                     optimizer=opt, start_step=start)
    except CheckpointError as exc:
        _err(exc)
        return EXIT_CHECKPOINT
    except TrainingError as exc:
        _err(exc)
        return EXIT_NUMERIC
    meta = {"step": opt.step_count, "train": tcfg.to_dict(),
            "history": [{k: round(v, 10) if isinstance(v, float) else v for k, v in h.items()} for h in hist]}
    save_model(args.out, "gate", gcfg.to_dict(), gate, meta, opt)
    _write_gate_log(args.log or str(args.out) + ".log.csv", hist)
    print(f"saved gate checkpoint {args.out}")
    return EXIT_OK


def _write_gate_log(path, hist):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "loss", "lr", "accuracy"])
        for h in hist:
            w.writerow([h["epoch"], h["step"], f"{h['loss']:.10g}", f"{h['lr']:.10g}", f"{h['accuracy']:.10g}"])


def cmd_train_fuse(args):
    conf = _conf_from_args(args, "train-fuse")
    fcfg = config.fusion_config(conf)
    tcfg = config.train_config(conf, "train-fuse")
    weights = config.loss_weights(conf)
    try:
        ds = discover(args.data)
        pairs = ds.pairs()
    except (IngestionError, OSError) as exc:
        _err(exc)
        return EXIT_INPUT
    try:
        gate, _ = load_gate(args.gate)
        model, opt, start = None, None, 0
        if args.resume:
            model, header = load_fusion(args.resume)
            opt = _load_optimizer(args.resume, model)
            start = int(header["meta"].get("step", 0))
            fcfg = model.cfg
    except CheckpointError as exc:
        _err(exc)
        return EXIT_CHECKPOINT
    force = {"hi": 1.0, "lo": 0.0}.get(args.force_gate)
    model = model or MoCTEFuse(fcfg, seed=tcfg.seed)
    opt = opt or Adam(model.named_parameters())
    try:
        model, opt, hist = train_fuse(pairs, gate, fcfg, tcfg, weights, log_csv=args.log or str(args.out) + ".log.csv",
                                      model=model, optimizer=opt, start_step=start, force_p_h=force)
    except TrainingError as exc:
        _err(f"{exc}; saving last good parameters")
        save_model(str(args.out) + ".lastgood", "fusion", fcfg.to_dict(), model,
                   {"step": opt.step_count, "aborted": True}, opt)
        return EXIT_NUMERIC
    meta = {"step": opt.step_count, "train": tcfg.to_dict(),
            "history": [{k: round(v, 10) if isinstance(v, float) else v for k, v in h.items()}
                        for h in hist["epochs"]]}
    save_model(args.out, "fusion", fcfg.to_dict(), model, meta, opt)
    print(f"saved fusion checkpoint {args.out}")
    return EXIT_OK


def _resolve_pairs(ir, vi):
    """``[(id, ir_path, vi_path)]`` for a single file pair or two directories matched by stem."""
    ir, vi = Path(ir), Path(vi)
    if ir.is_file() and vi.is_file():
        return [(ir.stem, ir, vi)]
    if ir.is_dir() and vi.is_dir():
        ir_map, vi_map = _stems(ir), _stems(vi)
        ids = sorted(set(ir_map) & set(vi_map))
        if not ids:
            raise IngestionError(f"no matching ir/vi stems in {ir} and {vi}")
        return [(i, ir_map[i], vi_map[i]) for i in ids]
    raise IngestionError(f"--ir {ir} and --vi {vi} must both be existing files or both directories")


def cmd_fuse(args):
    try:
        pairs = _resolve_pairs(args.ir, args.vi)
    except (IngestionError, OSError) as exc:
        _err(exc)
        return EXIT_INPUT
    try:
        model, _ = load_fusion(args.model)
        gate = None
        if args.force_gate is None:
            if args.gate is None:
                _err("--gate is required unless --force-gate is given")
                return EXIT_INPUT
            gate, _ = load_gate(args.gate)
    except CheckpointError as exc:
        _err(exc)
        return EXIT_CHECKPOINT
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for pid, ir_path, vi_path in pairs:
        try:
            pair = load_pair(ir_path, vi_path, pair_id=pid)
        except (IngestionError, OSError) as exc:
            _err(exc)
            return EXIT_INPUT
        if args.force_gate is not None:
            p_h = 1.0 if args.force_gate == "hi" else 0.0
        else:
            vi_rgb = pair.vi if pair.vi.ndim == 3 else np.repeat(pair.vi[..., None], 3, -1)
            if gate.cfg.input_size is not None:
                vi_rgb = resize(vi_rgb, gate.cfg.input_size)
            p_h = float(gate_forward(vi_rgb, gate).p_h[0])
        with T.no_grad():
            try:
                out = model(T.Tensor(pair.ir), T.Tensor(pair.vi_luma), p_h)
            except ContractError as exc:
                _err(f"{pid}: {exc}")
                return EXIT_INPUT
        save_fused(out.i_f.data[0], pair.vi, out_dir / f"{pid}_fused.png")
        print(f"{pid} P_H={p_h:.6f}")
    return EXIT_OK


def _fused_map(directory):
    out = {}
    for p in sorted(Path(directory).iterdir()):
        if p.suffix.lower() in (".png", ".pgm", ".ppm"):
            stem = p.stem[:-len("_fused")] if p.stem.endswith("_fused") else p.stem
            out[stem] = p
    return out


def cmd_evaluate(args):
    try:
        ir_map, vi_map, f_map = _stems(args.ir), _stems(args.vi), _fused_map(args.fused)
    except OSError as exc:
        _err(exc)
        return EXIT_INPUT
    ids = sorted(set(ir_map) & set(vi_map) & set(f_map))
    unmatched = sorted((set(ir_map) | set(vi_map) | set(f_map)) - set(ids))
    if not ids or unmatched:
        _err(f"unmatched ids: {unmatched if unmatched else 'no common ids'}")
        return EXIT_INPUT
    rows = []
    for pid in ids:
        ir, vi, fused = (luma(read_image(m[pid])) for m in (ir_map, vi_map, f_map))
        if not ir.shape == vi.shape == fused.shape:
            _err(f"{pid}: image sizes differ")
            return EXIT_INPUT
        rows.append(evaluate_image(fused, ir, vi))
    report = aggregate(rows, ids)
    base = Path(args.out)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, base.with_suffix(".csv"), base.with_suffix(".json"))
    for m, s in report.summary()["metrics"].items():
        print(f"{m.upper():4s} {s['display']}")
    return EXIT_OK


def cmd_gradcheck(args):
    print(f"kernel backend: {backend()}")
    rows = verify.run(args.scope, seed=args.seed)
    ok = True
    for name, err, tol, passed in rows:
        print(f"{'PASS' if passed else 'FAIL'} {name:22s} max_rel_err={err:.3e} tol={tol:.0e}")
        ok &= passed
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_inspect(args):
    try:
        for line in checkpoint.describe(args.checkpoint):
            print(line)
    except CheckpointError as exc:
        _err(exc)
        return EXIT_CHECKPOINT
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="moctefuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def train_flags(p):
        p.add_argument("--data", required=True, help="dataset root with ir/ and vi/")
        p.add_argument("--config", help="INI-style config file")
        p.add_argument("--out", required=True, help="checkpoint to write")
        p.add_argument("--resume", help="checkpoint to continue from")
        p.add_argument("--seed", type=int, default=_default_seed())
        p.add_argument("--epochs", type=int)
        p.add_argument("--max-steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--log", help="loss log CSV (default <out>.log.csv)")

    p = sub.add_parser("train-gate", help="train the illumination gate")
    train_flags(p)
    p.set_defaults(func=cmd_train_gate)

    p = sub.add_parser("train-fuse", help="train the fusion network with a frozen gate")
    train_flags(p)
    p.add_argument("--gate", required=True, help="trained gate checkpoint")
    p.add_argument("--crop", type=int)
    p.add_argument("--force-gate", choices=("hi", "lo"))
    p.set_defaults(func=cmd_train_fuse)

    p = sub.add_parser("fuse", help="fuse image pairs")
    p.add_argument("--ir", required=True)
    p.add_argument("--vi", required=True)
    p.add_argument("--gate")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force-gate", choices=("hi", "lo"))
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="EN/SD/MI/VIF report")
    p.add_argument("--ir", required=True)
    p.add_argument("--vi", required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--out", required=True, help="report path; .csv and .json are written")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference and analytic gradient suites")
    p.add_argument("--scope", choices=("primitive", "ctfb", "end2end", "competitive", "all"),
                   default="all")
    p.add_argument("--seed", type=int, default=_default_seed() or 0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint's parameter manifest")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("make-synthetic", help="write a toy registered IR/VI corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=_default_seed() or 0)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
