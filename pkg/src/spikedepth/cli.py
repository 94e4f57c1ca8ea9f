"""Command-line interface.

Subcommands: encode, decode-tfi, gen, train, infer, eval, analyze.
Every run writes its resolved configuration next to its outputs so any
result can be reproduced from that file alone. Exit codes: 0 success,
1 contract violation (bad data, shape mismatch, failed run), 2 config
error (unknown key, bad value, unmet preset).

Dataset layout produced by ``gen`` and consumed by ``train``/``eval``::

    <dir>/scene_0000/{left.dat, right.dat, gt.pfm, meta.json}
    <dir>/scene_0001/...

The default config file may be set via the SPIKEDEPTH_CONFIG env var;
an explicit --config flag wins over it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import codec, dynamics, formats, objective, scenes
from .config import ConfigError, RunConfig, from_preset, load_config, save_config
from .refinement import Pipeline, RigCalibration, disparity_to_depth

ENV_CONFIG = "SPIKEDEPTH_CONFIG"

_CONTRACT_ERRORS = (ValueError, OSError, codec.CodecError, formats.FormatError,
                    ad.ShapeError, ad.GraphError, ad.NumericError,
                    objective.TrainingDiverged)


# ------------------------------------------------------------- plumbing

def _resolve_config(args):
    """Layering: preset defaults < config file (flag or env) < --set overrides."""
    path = getattr(args, "config", None) or os.environ.get(ENV_CONFIG)
    if path:
        cfg = load_config(path, base=from_preset(args.preset))
    else:
        cfg = from_preset(args.preset)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if overrides:
        from .config import parse_config
        text = "\n".join(f"{k} = {v}" for k, v in overrides.items())
        cfg = parse_config(text, base=cfg)
    cfg.validate()
    return cfg


def _write_resolved(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "resolved.cfg"))


def _read_frames(path):
    """Frame stack from a .npy file [N,H,W] in [0,1] or a directory of
    8-bit PGM frames (sorted by filename, scaled by 1/255)."""
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".pgm"))
        if not names:
            raise ValueError(f"{path}: no .pgm frames found")
        return np.stack([formats.read_pgm(os.path.join(path, n)) / 255.0
                         for n in names])
    frames = np.load(path)
    if frames.ndim != 3:
        raise ValueError(f"{path}: expected [N,H,W] stack, got {frames.shape}")
    return frames.astype(np.float64)


def _scene_dirs(data_dir):
    dirs = sorted(d for d in os.listdir(data_dir)
                  if d.startswith("scene_")
                  and os.path.isdir(os.path.join(data_dir, d)))
    if not dirs:
        raise ValueError(f"{data_dir}: no scene_XXXX directories")
    return [os.path.join(data_dir, d) for d in dirs]


def load_dataset(data_dir):
    """[(spikes_left, spikes_right, gt), ...] from a gen-produced dir."""
    samples = []
    for d in _scene_dirs(data_dir):
        left = codec.read_dat(os.path.join(d, "left.dat"))
        right = codec.read_dat(os.path.join(d, "right.dat"))
        gt = formats.read_pfm(os.path.join(d, "gt.pfm"))
        samples.append((left, right, gt))
    return samples


# ---------------------------------------------------------- subcommands

def _cmd_encode(args):
    cfg = _resolve_config(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    for side, path, seed in (("left", args.left, seeds[0]),
                             ("right", args.right, seeds[1])):
        frames = _read_frames(path)
        spikes = codec.encode(frames, threshold=cfg.threshold,
                              noise_std=cfg.noise_std,
                              seed=np.random.default_rng(seed))
        codec.write_dat(os.path.join(out, f"{side}.dat"), spikes)
        print(f"{side}: {frames.shape[0]} frames -> "
              f"{os.path.join(out, side + '.dat')} "
              f"(rate {spikes.mean():.4f})")
    _write_resolved(cfg, out)
    return 0


def _cmd_decode_tfi(args):
    cfg = _resolve_config(args)
    spikes = codec.read_dat(args.dat)
    center = (args.center if args.center is not None
              else codec.center_step(spikes.shape[0]))
    window = args.window if args.window is not None else spikes.shape[0]
    recon = codec.tfi_reconstruct(spikes, center_step=center,
                                  max_window=window)
    out = args.out
    os.makedirs(out, exist_ok=True)
    base = os.path.splitext(os.path.basename(args.dat))[0]
    formats.write_pfm(os.path.join(out, f"{base}_tfi.pfm"), recon)
    formats.write_pgm(os.path.join(out, f"{base}_tfi.pgm"), recon)
    _write_resolved(cfg, out)
    print(f"reconstructed intensity at step {center} (window {window}) -> "
          f"{out}/{base}_tfi.pfm")
    return 0


def _cmd_gen(args):
    cfg = _resolve_config(args)
    n_emitted = (args.frames - 1) * args.interp + 1
    if n_emitted < cfg.stream_steps:
        raise ValueError(
            f"(frames-1)*interp+1 = {n_emitted} emitted frames cannot fill "
            f"a {cfg.stream_steps}-step stream")
    # ground truth sits at the center step of the middle substream
    center = codec.center_step(cfg.stream_steps) - 1
    root = args.out
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    for k in range(args.scenes):
        spec = scenes.random_scene(rng, cfg)
        sample = scenes.gen_scene(spec, frames=args.frames,
                                  interp_factor=args.interp,
                                  center_frame=center)
        d = os.path.join(root, f"scene_{k:04d}")
        os.makedirs(d, exist_ok=True)
        seed_l, seed_r = cfg.seed * 100_003 + 2 * k, cfg.seed * 100_003 + 2 * k + 1
        left = codec.encode(sample.left[:cfg.stream_steps],
                            threshold=cfg.threshold,
                            noise_std=cfg.noise_std, seed=seed_l)
        right = codec.encode(sample.right[:cfg.stream_steps],
                             threshold=cfg.threshold,
                             noise_std=cfg.noise_std, seed=seed_r)
        codec.write_dat(os.path.join(d, "left.dat"), left)
        codec.write_dat(os.path.join(d, "right.dat"), right)
        formats.write_pfm(os.path.join(d, "gt.pfm"), sample.gt)
        meta = {
            "width": spec.width, "height": spec.height,
            "baseline": spec.rig.baseline, "focal": spec.rig.focal,
            "principal_offset": spec.rig.principal_offset,
            "frames": args.frames, "interp_factor": args.interp,
            "center_frame": center,
            "encode_seed_left": seed_l, "encode_seed_right": seed_r,
            "planes": [{
                "depth": p.depth, "rect": list(p.rect) if p.rect else None,
                "velocity": p.velocity, "slant": list(p.slant),
                "texture_seed": p.texture_seed,
            } for p in spec.planes],
        }
        with open(os.path.join(d, "meta.json"), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=1, sort_keys=True)
        print(f"scene_{k:04d}: gt [{sample.gt.min():.2f}, "
              f"{sample.gt.max():.2f}] px, rates "
              f"{left.mean():.4f}/{right.mean():.4f}")
    _write_resolved(cfg, root)
    return 0


def _cmd_train(args):
    cfg = _resolve_config(args)
    if args.steps is not None:
        from dataclasses import replace
        cfg = replace(cfg, steps=args.steps)
        cfg.validate()
    dataset = load_dataset(args.data)
    out = args.out
    os.makedirs(out, exist_ok=True)
    t0 = time.time()

    def on_step(row):
        if row["step"] % args.log_every == 0 or row["step"] == cfg.steps - 1:
            print(f"step {row['step']:6d} lr {row['lr']:.3e} "
                  f"stereo {row['stereo']:9.4f} total {row['total']:9.4f}")

    pipeline, history = objective.train(dataset, cfg, on_step=on_step)
    formats.save_checkpoint(os.path.join(out, "model.ckpt"),
                            pipeline.bag.named())
    formats.write_csv(
        os.path.join(out, "history.csv"),
        ["step", "lr", "sample", "stereo", "rate", "voltage", "total"],
        [[r["step"], r["lr"], r["sample"], r["stereo"], r["rate"],
          r["voltage"], r["total"]] for r in history])
    formats.svg_plot(
        os.path.join(out, "history.svg"),
        {"total": ([r["step"] for r in history],
                   [r["total"] for r in history]),
         "stereo": ([r["step"] for r in history],
                    [r["stereo"] for r in history])},
        title="training loss", xlabel="step", ylabel="loss")
    _write_resolved(cfg, out)
    print(f"trained {cfg.steps} steps in {time.time() - t0:.1f}s -> "
          f"{out}/model.ckpt")
    return 0


def _load_pipeline(cfg, ckpt_path):
    pipeline = Pipeline(cfg)
    state = formats.load_checkpoint(ckpt_path)
    formats.apply_checkpoint(pipeline.bag, state)
    return pipeline


def _cmd_infer(args):
    cfg = _resolve_config(args)
    pipeline = _load_pipeline(cfg, args.ckpt)
    left = codec.read_dat(args.left)
    right = codec.read_dat(args.right)
    disp = pipeline.infer(left, right, iters=args.iters)
    out = args.out
    os.makedirs(out, exist_ok=True)
    formats.write_pfm(os.path.join(out, "disparity.pfm"), disp)
    rig = RigCalibration(cfg.baseline, cfg.focal, cfg.principal_offset)
    depth, valid = disparity_to_depth(disp, rig)
    formats.write_pfm(os.path.join(out, "depth.pfm"), depth)
    formats.write_pgm(os.path.join(out, "disparity.pgm"), disp)
    _write_resolved(cfg, out)
    print(f"disparity [{disp.min():.2f}, {disp.max():.2f}] px "
          f"({100 * valid.mean():.1f}% valid depth) -> {out}/disparity.pfm")
    return 0


def _cmd_eval(args):
    cfg = _resolve_config(args)
    dirs = _scene_dirs(args.data)
    if args.pred:
        preds = [formats.read_pfm(os.path.join(args.pred,
                                               f"scene_{k:04d}.pfm"))
                 for k in range(len(dirs))]
    else:
        if not args.ckpt:
            raise ValueError("eval needs either --pred or --ckpt")
        pipeline = _load_pipeline(cfg, args.ckpt)
        preds = []
        for d in dirs:
            left = codec.read_dat(os.path.join(d, "left.dat"))
            right = codec.read_dat(os.path.join(d, "right.dat"))
            preds.append(pipeline.infer(left, right, iters=cfg.iters))
    rows = []
    sums = {"bad1": 0.0, "bad2": 0.0, "bad3": 0.0, "avg_err": 0.0}
    for d, pred in zip(dirs, preds):
        gt = formats.read_pfm(os.path.join(d, "gt.pfm"))
        m = objective.metrics(pred, gt)
        rows.append([os.path.basename(d), m["bad1"], m["bad2"], m["bad3"],
                     m["avg_err"]])
        for key in sums:
            sums[key] += m[key]
    n = len(rows)
    rows.append(["mean", sums["bad1"] / n, sums["bad2"] / n,
                 sums["bad3"] / n, sums["avg_err"] / n])
    out = args.out
    os.makedirs(out, exist_ok=True)
    formats.write_csv(os.path.join(out, "metrics.csv"),
                      ["scene", "bad1", "bad2", "bad3", "avg_err"], rows)
    _write_resolved(cfg, out)
    for row in rows:
        print(f"{row[0]}: bad1 {row[1]:.2f}% bad2 {row[2]:.2f}% "
              f"bad3 {row[3]:.2f}% avg_err {row[4]:.4f} px")
    return 0


def _cmd_analyze(args):
    cfg = _resolve_config(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    pipeline = _load_pipeline(cfg, args.ckpt)

    # --- theory mode: fixed scalar gates on the trained recurrent kernel
    w_rec = pipeline.rsnn.layers[4].w_rec.w.data
    side = args.theory_side
    if side is None:
        # largest grid whose joint state fits the dense-spectrum cap
        side = max(1, int(np.sqrt(2000 / cfg.hidden)))
    state_shape = (cfg.hidden, side, side)
    norm = dynamics.spectral_norm(w_rec, state_shape=state_shape,
                                  iters=20000, tol=1e-14)
    gates = dict(alpha=args.alpha, beta=args.beta, gamma=args.gamma)
    L = dynamics.lipschitz_bound(v_peak=cfg.v_peak, w_rec_norm=norm, **gates)
    scale = 1.0
    if L >= 1.0:
        # rescale a copy so the certified regime is demonstrable
        scale = 0.9 * (1.0 - gates["alpha"]) / (L - gates["alpha"])
        L = dynamics.lipschitz_bound(v_peak=cfg.v_peak,
                                     w_rec_norm=norm * scale, **gates)
    params = dynamics.TheoryParams(
        v_peak=cfg.v_peak, w_rec=w_rec * scale, drive=0.0,
        relaxation="relu", state_shape=state_shape, **gates)
    print(f"recurrent kernel norm {norm:.4f} (x{scale:.4f}) -> L = {L:.4f}")

    rng = np.random.default_rng(cfg.seed)
    ratios = dynamics.contraction_test(params, pairs=100, seed=cfg.seed)
    formats.write_csv(os.path.join(out, "contraction_ratios.csv"),
                      ["pair", "ratio", "bound"],
                      [[i, float(r), L] for i, r in enumerate(ratios)])

    u0 = rng.standard_normal(state_shape)
    _, rows = dynamics.banach_convergence(params, u0, k_max=50)
    dynamics.emit_banach_csv(os.path.join(out, "banach.csv"), rows)
    formats.svg_plot(
        os.path.join(out, "banach.svg"),
        {"measured": ([r[0] for r in rows], [max(r[1], 1e-300) for r in rows]),
         "bound": ([r[0] for r in rows], [max(r[2], 1e-300) for r in rows])},
        title=f"fixed-point convergence (L={L:.3f})", xlabel="k",
        ylabel="error")

    eig_state = rng.standard_normal(state_shape)
    n_dims = int(np.prod(state_shape))
    eig = dynamics.jacobian_spectrum(params, eig_state)
    dynamics.emit_eigenvalue_csv(os.path.join(out, "eigenvalues.csv"), eig)
    formats.svg_plot(os.path.join(out, "eigenvalues.svg"),
                     {"spectrum": (eig.real, eig.imag)},
                     title=f"linearization spectrum ({n_dims} dims)",
                     xlabel="re", ylabel="im", kind="scatter")
    print(f"max eigenvalue modulus {np.abs(eig).max():.4f} <= L {L:.4f}")

    # --- trained-network diagnostics on probe scenes (reported only)
    probe_cfg = cfg
    if cfg.width != args.probe_size or cfg.height != args.probe_size:
        from dataclasses import replace
        probe_cfg = replace(cfg, width=args.probe_size,
                            height=args.probe_size)
    n_probe = max(3, args.probe_scenes)
    voltage_traces = []
    diff_rows = []
    for k in range(n_probe):
        spec = scenes.random_scene(rng, probe_cfg)
        sample = scenes.gen_scene(spec, frames=2,
                                  interp_factor=probe_cfg.interp_factor)
        left = codec.encode(sample.left[:probe_cfg.stream_steps],
                            threshold=cfg.threshold, seed=int(rng.integers(2**31)))
        right = codec.encode(sample.right[:probe_cfg.stream_steps],
                             threshold=cfg.threshold, seed=int(rng.integers(2**31)))
        with ad.no_grad():
            record = pipeline.forward(left, right, iters=cfg.iters)
        volts = [v.data for v in record.voltages[4]]
        spks = [s.data for s in record.spikes[4]]
        voltage_traces.append(volts)
        joint = [np.concatenate([v.ravel(), s.ravel()])
                 for v, s in zip(volts, spks)]
        diffs = dynamics.state_difference_curve(joint)
        diff_rows.extend([[k, i + 1, float(dv)] for i, dv in enumerate(diffs)])
    formats.write_csv(os.path.join(out, "state_differences.csv"),
                      ["scene", "iteration", "difference"], diff_rows)
    by_scene = {}
    for k, i, dv in diff_rows:
        by_scene.setdefault(f"scene {k}", ([], []))
        by_scene[f"scene {k}"][0].append(i)
        by_scene[f"scene {k}"][1].append(dv)
    formats.svg_plot(os.path.join(out, "state_differences.svg"), by_scene,
                     title="hidden-state differences", xlabel="iteration",
                     ylabel="||u_t - u_(t-1)||")

    proj, disp = dynamics.hidden_state_pca(voltage_traces)
    dynamics.emit_pca_csv(os.path.join(out, "pca.csv"), proj, disp)
    scatter = {f"iter {t + 1}": (proj[t, :, 0], proj[t, :, 1])
               for t in range(0, proj.shape[0],
                              max(1, proj.shape[0] // 4))}
    formats.svg_plot(os.path.join(out, "pca.svg"), scatter,
                     title="hidden-state PCA", xlabel="pc1", ylabel="pc2",
                     kind="scatter")
    _write_resolved(cfg, out)
    print(f"analysis written to {out}")
    return 0


# --------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="spikedepth",
        description="Spike-camera stereo: codec, matching, recurrent "
                    "refinement, and stability analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file (overrides "
                       f"${ENV_CONFIG})")
        p.add_argument("--preset", default="desk",
                       help="base preset: desk | paper (default desk)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override single config keys")

    p = sub.add_parser("encode", help="frame stacks -> spike .dat pair")
    p.add_argument("--left", required=True,
                   help=".npy [N,H,W] in [0,1] or a directory of .pgm frames")
    p.add_argument("--right", required=True)
    p.add_argument("--out", default=".", help="output directory")
    common(p)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode-tfi",
                       help="reconstruct intensity from a .dat stream")
    p.add_argument("dat", help="input .dat file")
    p.add_argument("--center", type=int, default=None,
                   help="1-indexed reconstruction step (default: stream "
                        "center)")
    p.add_argument("--window", type=int, default=None,
                   help="max steps searched on either side")
    p.add_argument("--out", default=".", help="output directory")
    common(p)
    p.set_defaults(func=_cmd_decode_tfi)

    p = sub.add_parser("gen", help="generate a procedural stereo dataset")
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--frames", type=int, default=2, help="keyframes")
    p.add_argument("--interp", type=int, default=50,
                   help="interpolated frames per keyframe gap")
    p.add_argument("--out", required=True, help="dataset directory")
    common(p)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="fit the refinement model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=None,
                   help="override config steps")
    p.add_argument("--log-every", type=int, default=50)
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="disparity + depth from a .dat pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--iters", type=int, default=16,
                   help="refinement iterations (default 16, independent of "
                        "the config's iters; pass the training value when "
                        "the checkpoint used a non-default count)")
    p.add_argument("--out", default=".", help="output directory")
    common(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="metrics CSV for a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", help="checkpoint to run inference with")
    p.add_argument("--pred", help="directory of scene_XXXX.pfm predictions "
                                  "(skips inference)")
    p.add_argument("--out", default=".", help="output directory")
    common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze",
                       help="stability diagnostics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.5,
                   help="fixed leak gate for theory mode")
    p.add_argument("--beta", type=float, default=0.5,
                   help="fixed threshold gate for theory mode")
    p.add_argument("--gamma", type=float, default=0.5,
                   help="fixed reset gate for theory mode")
    p.add_argument("--probe-size", type=int, default=32,
                   help="probe scene side (the smallest the network "
                        "accepts is 32)")
    p.add_argument("--probe-scenes", type=int, default=4)
    p.add_argument("--theory-side", type=int, default=None,
                   help="spatial side of the fixed-gate theory state "
                        "(default: largest that fits the dense-spectrum "
                        "cap)")
    common(p)
    p.set_defaults(func=_cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _CONTRACT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
