"""``scdm`` command-line interface.

Every subcommand accepts ``--config FILE``: a JSON object whose keys mirror
the subcommand's long options (dashes become underscores). An artifact
written by an earlier run also works, since its embedded
``provenance.config`` is picked up. Flags given on the command line win over
the file. The seed falls back to ``$SCDM_SEED`` and then to 0.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from scdm import rng as rngmod
from scdm._io import provenance, write_csv, write_json
from scdm.errors import ScdmError

COMMANDS = (
    "estimate-stats", "schedule", "diffuse-labels", "corrupt", "train-toy",
    "sample", "metrics", "verify", "ablate",
)
_INTERNAL = {"func", "config", "command"}


def _eta(text: str):
    return "inf" if str(text).lower() in ("inf", "+inf", "infinity") else float(text)


def _fractions(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def run_config(args: argparse.Namespace) -> dict:
    """The resolved configuration echoed into artifacts."""
    cfg = {k: v for k, v in vars(args).items() if k not in _INTERNAL}
    cfg["command"] = args.command
    return cfg


def _load_config(path: str) -> dict:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(obj.get("provenance"), dict) and "config" in obj["provenance"]:
        obj = obj["provenance"]["config"]
    return {k: v for k, v in obj.items() if k != "command"}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_estimate_stats(args) -> int:
    from scdm.labelmap import estimate_stats, load_map, save_stats

    stats = estimate_stats(
        [load_map(p) for p in args.maps],
        clamp_phi=args.clamp_phi,
        unlabeled_class=args.unlabeled_class,
        target_min_product=args.target_min_product,
    )
    save_stats(stats, args.out, run_config(args))
    return 0


def _image_params(args) -> dict:
    params = {}
    if args.kind == "linear_beta":
        if args.beta_start is not None:
            params["beta_start"] = args.beta_start
        if args.beta_end is not None:
            params["beta_end"] = args.beta_end
    elif args.cosine_s is not None:
        params["s"] = args.cosine_s
    return params


def cmd_schedule(args) -> int:
    from scdm.labelmap import load_stats
    from scdm.schedule import build_image_schedule, build_label_schedule, save_schedules

    if (args.stats is None) == (args.products is None):
        raise ValueError("give exactly one of --stats or --products")
    source = load_stats(args.stats) if args.stats else np.asarray(args.products, dtype=float)
    label = build_label_schedule(source, args.T, _eta(args.eta), args.uniform_classes or ())
    image = build_image_schedule(args.T, args.kind, **_image_params(args))
    save_schedules(args.out, label, image, run_config(args))
    return 0


def cmd_diffuse_labels(args) -> int:
    from scdm.labeldiff import mask_times_from_uniforms, mask_with_uniforms, reconstruct, save_trajectory
    from scdm.labelmap import load_map, save_map
    from scdm.schedule import load_schedules

    label, _ = load_schedules(args.sched)
    y0 = load_map(args.map)
    cfg = run_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = args.sample_index
    steps = sorted({int(round(f * label.T)) for f in _fractions(args.emit_steps)})
    if any(not 0 <= t <= label.T for t in steps):
        raise ValueError("--emit-steps fractions must lie in [0, 1]")
    U = None
    if args.coupling == "coupled":
        U = mask_times_from_uniforms(y0, label, rngmod.pixel_uniforms(args.seed, "label_u", y0.shape, k))
        save_trajectory(U, out / "mask_times.slm", cfg)
    written = []
    for t in steps:
        if t == 0:
            y_t = y0
        elif U is not None:
            y_t = reconstruct(U, y0, t)
        else:
            y_t = mask_with_uniforms(y0, label, t, rngmod.pixel_uniforms(args.seed, "label_u", y0.shape, k, t))
        name = f"y_t{t:04d}.slm"
        save_map(y_t, out / name)
        written.append({"t": t, "file": name, "masked_fraction": float((y_t.cells == y_t.mask_value).mean())})
    write_json(out / "manifest.json", {"steps": written, "provenance": provenance(cfg)})
    return 0


def cmd_corrupt(args) -> int:
    from scdm.corrupt import CorruptionConfig, corrupt
    from scdm.labelmap import load_map, save_map

    ccfg = CorruptionConfig(
        mode=args.mode,
        unlabeled_class=args.unlabeled_class,
        ds_factor=args.ds_factor,
        edge_distance=args.edge_distance,
        edge_metric=args.edge_metric,
        ignore_unlabeled_edges=args.ignore_unlabeled_edges,
        random_rate=args.rate,
        seed=args.seed,
    )
    y = corrupt(load_map(args.input), ccfg, rngmod.stream(args.seed, "corrupt", args.sample_index))
    save_map(y, args.out)
    write_json(args.out + ".json", {"provenance": provenance(run_config(args))})
    return 0


def cmd_train_toy(args) -> int:
    from scdm.imagediff.denoisers import MLPDenoiser
    from scdm.imagediff.toy import ToyDataSpec, random_block_map
    from scdm.imagediff.training import train_step
    from scdm.labelmap import estimate_stats
    from scdm.schedule import build_image_schedule, build_label_schedule

    spec = ToyDataSpec.load(args.spec)
    C = spec.num_classes
    data_rng = rngmod.stream(args.seed, "train.data")
    shape = (args.size, args.size)
    pool = [random_block_map(shape, C, data_rng) for _ in range(args.n_maps)]
    stats = estimate_stats(pool, clamp_phi=True, unlabeled_class=args.unlabeled_class)
    label = build_label_schedule(stats, args.T, _eta(args.eta))
    image = build_image_schedule(args.T)
    net = MLPDenoiser.init(C, spec.channels, args.T, rngmod.stream(args.seed, "train.init"), hidden=args.hidden)
    step_rng = rngmod.stream(args.seed, "train.steps")
    log = []
    for it in range(args.iters):
        pick = step_rng.integers(len(pool), size=args.batch)
        y0 = np.stack([pool[i].cells.astype(np.int64) for i in pick])
        x0 = np.stack([spec.sample_x0(pool[i], step_rng) for i in pick])
        rep = train_step(net, x0, y0, label, image, step_rng, args.lambda_vlb, args.drop_rate, args.lr)
        if it % args.log_every == 0 or it == args.iters - 1:
            log.append({"iter": it, "l_simple": rep.l_simple, "l_vlb": rep.l_vlb, "hybrid": rep.hybrid})
    cfg = run_config(args)
    net.save(args.out, provenance(cfg))
    write_json(args.out + ".json", {"log": log, "provenance": provenance(cfg)})
    return 0


def _channels(denoiser) -> int:
    spec = getattr(denoiser, "spec", None)
    return spec.channels if spec is not None else denoiser.channels


def cmd_sample(args) -> int:
    from scdm.imagediff.denoisers import load_denoiser
    from scdm.imagediff.sampler import SamplerConfig, sample
    from scdm.imagediff.toy import save_image
    from scdm.labelmap import load_map
    from scdm.schedule import load_schedules

    label, image = load_schedules(args.sched)
    den = load_denoiser(args.denoiser, image)
    scfg = SamplerConfig(
        steps=args.steps,
        cfg_scale=args.cfg_scale,
        extrapolation=args.extrapolation,
        threshold_percentile=args.percentile,
        variance_mode=args.variance,
        seed=args.seed,
        coupling=args.coupling,
        force_full_mask_at_T=args.force_full_mask_at_T,
    )
    x = sample(den, load_map(args.map), label, image, scfg, _channels(den), args.sample_index)
    save_image(x, args.out)
    write_json(args.out + ".json", {"provenance": provenance(run_config(args))})
    return 0


def cmd_metrics(args) -> int:
    from scdm import metrics
    from scdm.imagediff.toy import load_image
    from scdm.labelmap import load_map, load_stats

    task = args.task
    if task in ("miou", "grouped-miou"):
        if len(args.a) != len(args.b):
            raise ValueError("--a and --b need the same number of maps")
        preds = [load_map(p) for p in args.a]
        truths = [load_map(p) for p in args.b]
        if task == "miou":
            vals = [metrics.miou(p, t, args.ignore) for p, t in zip(preds, truths)]
            result = {"miou": float(np.mean(vals)), "per_map": vals}
        else:
            if args.stats is None:
                raise ValueError("grouped-miou needs --stats")
            groups = metrics.GroupAssignment.from_products(load_stats(args.stats).products())
            per = [metrics.grouped_miou(p, t, groups, args.ignore) for p, t in zip(preds, truths)]
            result = {"per_map": per, "groups": {g: groups.classes(g) for g in metrics.GROUPS}}
    elif task in ("psnr", "ssim"):
        if len(args.a) != len(args.b):
            raise ValueError("--a and --b need the same number of images")
        vals = []
        for pa, pb in zip(args.a, args.b):
            a, b = load_image(pa), load_image(pb)
            if task == "psnr":
                vals.append(metrics.capped_psnr(metrics.psnr(a, b, args.data_range)))
            else:
                vals.append(metrics.ssim(a, b, args.window, data_range=args.data_range, gaussian=args.gaussian))
        result = {task: float(np.mean(vals)), "per_pair": vals}
    else:
        fa = np.concatenate([load_image(p).reshape(-1, load_image(p).shape[-1]) for p in args.a])
        fb = np.concatenate([load_image(p).reshape(-1, load_image(p).shape[-1]) for p in args.b])
        result = {"frechet": metrics.frechet_gaussian(fa, fb), "n_a": len(fa), "n_b": len(fb)}
    result["task"] = task
    result["provenance"] = provenance(run_config(args))
    if args.report:
        write_json(args.report, result)
    else:
        print(json.dumps(result, indent=2))
    return 0


def cmd_verify(args) -> int:
    from scdm.verify import run_checks

    targets = [t for t in (args.targets or "").split(",") if t.strip()]
    if not targets:
        raise argparse.ArgumentTypeError("--targets must name at least one check")
    options = {"seed": args.seed, "T": args.T}
    if args.product:
        options["products"] = tuple(args.product)
    report = run_checks([t.strip() for t in targets], **options)
    report["provenance"] = provenance(run_config(args))
    if args.report:
        write_json(args.report, report)
    for name, rep in report["checks"].items():
        print(f"{name}: {'PASS' if rep['passed'] else 'FAIL'}")
    return 0 if report["passed"] else 1


def cmd_ablate(args) -> int:
    from scdm.ablation import CSV_COLUMNS, AblationConfig, run_ablation

    acfg = AblationConfig(
        seed=args.seed,
        T=args.T,
        step_counts=tuple(int(s) for s in _fractions(args.step_counts)) if args.step_counts else
        tuple(sorted({25, 50, args.T} & set(range(1, args.T + 1)))),
        size=args.size,
        n_pairs=args.n_pairs,
        sigma0=args.sigma0,
        cfg_scale=args.cfg_scale,
        extrapolation=args.extrapolation,
        random_rate=args.rate,
        edge_distance=args.edge_distance,
        ds_factor=args.ds_factor,
    )
    result = run_ablation(acfg)
    cfg = run_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", CSV_COLUMNS, result["ablation_rows"], cfg)
    write_csv(out / "robustness.csv", CSV_COLUMNS, result["robustness_rows"], cfg)
    write_json(out / "report.json", {
        "ablation_config": acfg.to_json(),
        "identity": result["identity"],
        "direction": result["direction"],
        "provenance": provenance(cfg),
    })
    for mode, d in result["direction"]["all_steps"].items():
        print(f"{mode}: label_diffusion={d['label_diffusion']:.5f} base={d['base']:.5f}")
    return 0 if result["identity"]["passed"] else 1


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config or a previous artifact to take defaults from")

    parser = argparse.ArgumentParser(prog="scdm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("estimate-stats", cmd_estimate_stats, "per-class psi/phi statistics from SLM1 maps")
    p.add_argument("--maps", nargs="+", required=True)
    p.add_argument("--clamp-phi", action="store_true")
    p.add_argument("--unlabeled-class", type=int)
    p.add_argument("--target-min-product", type=float)
    p.add_argument("--out", required=True)

    p = add("schedule", cmd_schedule, "tabulate label and image schedules")
    p.add_argument("--stats")
    p.add_argument("--products", type=float, nargs="+")
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--eta", default="1.0", help="positive float or 'inf'")
    p.add_argument("--uniform-classes", type=int, nargs="*")
    p.add_argument("--kind", choices=("linear_beta", "cosine"), default="linear_beta")
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--cosine-s", type=float)
    p.add_argument("--out", required=True)

    p = add("diffuse-labels", cmd_diffuse_labels, "label trajectory snapshots")
    p.add_argument("--map", required=True)
    p.add_argument("--sched", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--sample-index", type=int, default=0)
    p.add_argument("--emit-steps", default="0,0.25,0.5,0.75,1", help="comma-separated fractions of T")
    p.add_argument("--coupling", choices=("coupled", "fresh"), default="coupled")
    p.add_argument("--out-dir", required=True)

    p = add("corrupt", cmd_corrupt, "DS / Edge / Random label corruption")
    p.add_argument("--mode", choices=("ds", "edge", "random"), required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--unlabeled-class", type=int, default=0)
    p.add_argument("--ds-factor", type=int, default=4)
    p.add_argument("--edge-distance", type=int, default=2)
    p.add_argument("--edge-metric", choices=("chebyshev", "manhattan", "euclidean"), default="chebyshev")
    p.add_argument("--ignore-unlabeled-edges", action="store_true")
    p.add_argument("--rate", type=float, default=0.10)
    p.add_argument("--seed", type=int)
    p.add_argument("--sample-index", type=int, default=0)

    p = add("train-toy", cmd_train_toy, "train the per-pixel mlp denoiser on toy data")
    p.add_argument("--spec", required=True)
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--eta", default="1.0")
    p.add_argument("--lambda-vlb", type=float, default=0.001)
    p.add_argument("--drop-rate", type=float, default=0.2)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--n-maps", type=int, default=64)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--unlabeled-class", type=int)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("sample", cmd_sample, "sample an image for a label map")
    p.add_argument("--map", required=True)
    p.add_argument("--sched", required=True)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg-scale", type=float, default=0.5)
    p.add_argument("--extrapolation", type=float, default=0.8)
    p.add_argument("--percentile", type=float, default=0.95)
    p.add_argument("--variance", choices=("fixed_small", "fixed_large", "learned"), default="fixed_small")
    p.add_argument("--coupling", choices=("coupled", "fresh"), default="coupled")
    p.add_argument("--force-full-mask-at-T", dest="force_full_mask_at_T",
                   action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--sample-index", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("metrics", cmd_metrics, "mIoU, grouped mIoU, PSNR, SSIM or Frechet distance")
    p.add_argument("--task", choices=("miou", "grouped-miou", "psnr", "ssim", "frechet"), required=True)
    p.add_argument("--a", nargs="+", required=True)
    p.add_argument("--b", nargs="+", required=True)
    p.add_argument("--stats")
    p.add_argument("--ignore", type=int)
    p.add_argument("--data-range", type=float, default=2.0)
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--gaussian", action="store_true")
    p.add_argument("--report")

    p = add("verify", cmd_verify, "numerical verification checks")
    p.add_argument("--targets", help="comma-separated subset of prop1,prop2,marginal,trajectory,oracle,gradcheck")
    p.add_argument("--product", type=float, nargs="+")
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--seed", type=int)
    p.add_argument("--report")

    p = add("ablate", cmd_ablate, "three-row ablation and robustness comparison")
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--step-counts", help="comma-separated; default 25,50,T")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--n-pairs", type=int, default=100)
    p.add_argument("--sigma0", type=float, default=0.5)
    p.add_argument("--cfg-scale", type=float, default=0.5)
    p.add_argument("--extrapolation", type=float, default=0.8)
    p.add_argument("--rate", type=float, default=0.10)
    p.add_argument("--edge-distance", type=int, default=2)
    p.add_argument("--ds-factor", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    command = next((a for a in argv if a in subs), None)
    if command is not None:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv[argv.index(command) + 1:])
        if known.config:
            sp = subs[command]
            dests = {a.dest: a for a in sp._actions}
            cfg = {k: v for k, v in _load_config(known.config).items() if k in dests and k not in _INTERNAL}
            for k in cfg:
                dests[k].required = False
            sp.set_defaults(**cfg)
    args = parser.parse_args(argv)
    if hasattr(args, "seed"):
        args.seed = rngmod.resolve_seed(args.seed)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        print(f"scdm {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (ScdmError, ValueError, OSError, KeyError) as exc:
        print(f"scdm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
