"""Pipeline driver: dataset synthesis through training, solving and reports.

Every subcommand works inside one run directory. The first command to touch
the directory pins the resolved config there as config.json; later commands
reuse it, and refuse to run against a different config unless --force is
given. Heavy imports happen inside the handlers so the thread cap from
OPFORGE_THREADS can take effect first.
"""

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

from .config import RunConfig, load_run_config, run_config_to_dict, save_run_config
from .errors import ConfigError, DependencyError, DivergenceError, OpforgeError

_PRIOR_TO_SOURCE = {
    "correct": "truth",
    "ours": "gan",
    "mismatch": "mismatch",
    "uniform": "uniform",
}


def _apply_thread_cap() -> None:
    cap = os.environ.get("OPFORGE_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _pin_config(out_dir: Path, args) -> RunConfig:
    """Resolve the effective config and keep the run directory self-describing."""
    pinned = out_dir / "config.json"
    if args.config is None and pinned.exists():
        return load_run_config(pinned, seed_override=args.seed)
    cfg = load_run_config(args.config, seed_override=args.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    if pinned.exists():
        stored = json.loads(pinned.read_text())
        if stored != run_config_to_dict(cfg) and not args.force:
            raise ConfigError(
                f"{pinned} was written by an earlier run with different "
                "settings; pass --force to replace it"
            )
    save_run_config(pinned, cfg)
    return cfg


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing artifact: {path}",
                              hint=f"run `opforge {producer}` first")
    return path


def _psf_sampler(cfg: RunConfig, family: str):
    from .psf import (GaussianPrior, MotionConfig, sample_gaussian_psf,
                      sample_motion_psf)
    k = cfg.psf.kernel_size
    if family == "gaussian":
        prior = GaussianPrior(cfg.psf.sigma_lo, cfg.psf.sigma_hi,
                              isotropic=cfg.psf.isotropic)
        return lambda rng: sample_gaussian_psf(rng, prior, k)
    walk = MotionConfig(kernel_size=k, steps=cfg.psf.walk_steps,
                        step_size=cfg.psf.step_size, turn_sigma=cfg.psf.turn_sigma)
    return lambda rng: sample_motion_psf(rng, walk)


def _derived_seed(seed: int, label: str) -> int:
    from . import rngs
    return int(rngs.stream(seed, label).integers(0, 2 ** 31))


def _move_log(log_path: Path, out_dir: Path) -> Path:
    traces = out_dir / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    target = traces / log_path.name
    return log_path.replace(target)


# ------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    out = Path(args.out)
    cfg = _pin_config(out, args)
    from .data import build_dataset

    data_dir = out / "data"
    if data_dir.exists():
        if not args.force:
            raise ConfigError(f"{data_dir} already exists; pass --force to regenerate")
        shutil.rmtree(data_dir)
    sampler = _psf_sampler(cfg, cfg.psf.family)
    build_dataset(data_dir / "train", cfg.corpus.n_images, cfg.corpus.image_shape,
                  cfg.psf.family, sampler, cfg.noise.sigma, cfg.seed, kind="train")
    build_dataset(data_dir / "eval", cfg.corpus.eval_items, cfg.corpus.image_shape,
                  cfg.psf.family, sampler, cfg.noise.sigma,
                  _derived_seed(cfg.seed, "eval-data"), kind="eval")
    pointer = {"train": "data/train/manifest.json", "eval": "data/eval/manifest.json"}
    (out / "manifest.json").write_text(json.dumps(pointer, indent=2) + "\n")
    print(out / "data" / "train" / "manifest.json")
    print(out / "data" / "eval" / "manifest.json")
    return 0


def cmd_train_gan(args) -> int:
    out = Path(args.out)
    cfg = _pin_config(out, args)
    from .data import load_manifest
    from .gan import GanTrainConfig, train

    man_path = _require(out / "data" / "train" / "manifest.json", "synth")
    manifest = load_manifest(man_path)
    gcfg = GanTrainConfig(
        steps=cfg.gan.steps, noise_sigma=cfg.gan.noise_sigma, seed=cfg.seed,
        batch_size=cfg.gan.batch_size, latent_dim=cfg.gan.latent_dim,
        kernel_size=cfg.psf.kernel_size, head_mode=cfg.gan.head_mode,
        lr=cfg.gan.lr, beta1=cfg.gan.beta1, beta2=cfg.gan.beta2,
        lr_decay_from=cfg.gan.lr_decay_from,
        checkpoint_every=cfg.gan.checkpoint_every,
    )
    ckpt, log = train(gcfg, manifest, man_path.parent, out / "checkpoints")
    print(ckpt)
    print(_move_log(log, out))
    return 0


def cmd_sample_psf(args) -> int:
    out = Path(args.out)
    cfg = _pin_config(out, args)
    import numpy as np

    from . import rngs
    from .fileio import save_checkpoint
    from .gan import load_generator, sample_psfs

    ckpt = _require(out / "checkpoints" / "gan_final.opfg", "train-gan")
    g = load_generator(ckpt)
    kernels = sample_psfs(g, rngs.stream(cfg.seed, "sample-psf"), 64)
    samples = out / "samples"
    samples.mkdir(parents=True, exist_ok=True)
    save_checkpoint(samples / "psf_samples.opfg", {"kernels": kernels})

    sums = kernels.sum(axis=(1, 2))
    with open(samples / "psf_sums.csv", "w") as fh:
        fh.write("kernel,sum\n")
        for i, s in enumerate(sums):
            fh.write(f"{i},{s:.9f}\n")
    _kernel_grid_png(samples / "psf_grid.png", kernels,
                     f"64 generated kernels ({g.head_mode} head)")
    deviation = float(np.max(np.abs(sums - 1.0)))
    print(f"kernel-sum max deviation: {deviation:.3e}")
    print(samples / "psf_grid.png")
    return 0


def cmd_train_score(args) -> int:
    out = Path(args.out)
    cfg = _pin_config(out, args)
    from .data import load_manifest, load_stack, training_view
    from .diffusion import DiffusionTrainConfig, train_score

    man_path = _require(out / "data" / "train" / "manifest.json", "synth")
    manifest = load_manifest(man_path)
    if args.domain == "image":
        section = cfg.diffusion_image
        data = load_stack(training_view(manifest, man_path.parent).clean_paths)
        source = None
    else:
        section = cfg.diffusion_kernel
        source = args.kernel_source or section.source
        data = _kernel_training_stack(cfg, out, source, section.n_train)
    dcfg = DiffusionTrainConfig(
        steps=section.steps, seed=cfg.seed, domain=args.domain,
        kernel_source=source, batch_size=section.batch_size, T=section.T,
        base_channels=section.base_channels, emb_dim=section.emb_dim,
        lr=section.lr, checkpoint_every=section.checkpoint_every,
    )
    ckpt, log = train_score(dcfg, data, out / "checkpoints")
    print(ckpt)
    print(_move_log(log, out))
    return 0


def _kernel_training_stack(cfg: RunConfig, out: Path, source: str, n: int):
    import numpy as np

    from . import rngs
    from .diffusion import uniform_kernels
    from .gan import load_generator, sample_psfs

    rng = rngs.stream(cfg.seed, "kernel-prior-data")
    if source == "uniform":
        return uniform_kernels(rng, n, cfg.psf.kernel_size)
    if source == "gan":
        ckpt = _require(out / "checkpoints" / "gan_final.opfg", "train-gan")
        return sample_psfs(load_generator(ckpt), rng, n)
    if source == "truth":
        family = cfg.psf.family
    else:  # mismatch: the family the data was NOT blurred with
        family = "motion" if cfg.psf.family == "gaussian" else "gaussian"
    sampler = _psf_sampler(cfg, family)
    return np.stack([sampler(rng).weights for _ in range(n)])


def cmd_deblur(args) -> int:
    out = Path(args.out)
    cfg = _pin_config(out, args)
    import numpy as np

    from .bdps import BdpsConfig, bdps_sample
    from .data import eval_view, load_manifest, load_stack
    from .diffusion import load_score_net
    from .fileio import save_checkpoint

    source = _PRIOR_TO_SOURCE[args.kernel_prior]
    man_path = _require(out / "data" / "eval" / "manifest.json", "synth")
    image_ckpt = _require(out / "checkpoints" / "score_image.opfg",
                          "train-score --domain image")
    kernel_ckpt = _require(
        out / "checkpoints" / f"score_kernel-{source}.opfg",
        f"train-score --domain kernel --kernel-source {source}",
    )
    image_net, schedule = load_score_net(image_ckpt)
    kernel_net, _ = load_score_net(kernel_ckpt)

    view = eval_view(load_manifest(man_path), man_path.parent)
    y = load_stack(view.measurement_paths)[: cfg.eval.n_items]
    bcfg = BdpsConfig(steps=schedule.T, seed=cfg.seed,
                      noise_sigma=cfg.solver.noise_sigma,
                      zeta_image=cfg.solver.zeta_image,
                      zeta_kernel=cfg.solver.zeta_kernel)
    images, kernels, trace = bdps_sample(y, image_net, kernel_net, bcfg)

    samples = out / "samples"
    samples.mkdir(parents=True, exist_ok=True)
    recon = samples / f"recon_{args.kernel_prior}.opfg"
    save_checkpoint(recon, {"images": images, "kernels": kernels})
    traces = out / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    with open(traces / f"bdps_{args.kernel_prior}.csv", "w") as fh:
        for row in trace.rows():
            fh.write(",".join(str(v) for v in row) + "\n")
    print(recon)
    print(f"final residual: {trace.residual[-1]:.6f}")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    _pin_config(out, args)
    from .data import EvalView, eval_view, load_manifest
    from .fileio import load_checkpoint
    from .metrics import evaluate_run

    man_path = _require(out / "data" / "eval" / "manifest.json", "synth")
    recons = sorted((out / "samples").glob("recon_*.opfg"))
    if not recons:
        raise DependencyError("no reconstructions under samples/",
                              hint="run `opforge deblur` first")
    full = eval_view(load_manifest(man_path), man_path.parent)
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    for path in recons:
        name = path.stem.removeprefix("recon_")
        arrays = load_checkpoint(path)
        n = len(arrays["images"])
        view = EvalView(
            clean_paths=full.clean_paths[:n],
            measurement_paths=full.measurement_paths[:n],
            truth_kernel_paths=full.truth_kernel_paths[:n],
            image_shape=full.image_shape,
            noise_sigma=full.noise_sigma,
            psf_family=full.psf_family,
        )
        report = evaluate_run(view, arrays["images"], arrays["kernels"],
                              out_csv=report_dir / f"metrics_{name}.csv")
        print(f"{name}: psnr={report.mean['psnr']:.2f} "
              f"ssim={report.mean['ssim']:.3f} mnc={report.mean['mnc']:.3f}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    _pin_config(out, args)
    import csv as csv_mod

    from .data import eval_view, load_manifest
    from .fileio import load_checkpoint

    report_dir = out / "report"
    metric_files = sorted(report_dir.glob("metrics_*.csv"))
    if not metric_files:
        raise DependencyError("no metric tables under report/",
                              hint="run `opforge eval` first")

    rows = []
    for path in metric_files:
        with open(path) as fh:
            table = list(csv_mod.reader(fh))
        rows.append([path.stem.removeprefix("metrics_")] + table[-1][1:])
    header = ["prior", "psnr", "ssim", "mse_img", "mae_img", "mse_ker",
              "mae_ker", "mnc"]
    with open(report_dir / "summary.csv", "w", newline="") as fh:
        w = csv_mod.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    _table_png(report_dir / "summary.png", header, rows)

    samples_path = out / "samples" / "psf_samples.opfg"
    if samples_path.exists():
        kernels = load_checkpoint(samples_path)["kernels"]
        _kernel_grid_png(report_dir / "generated_kernels.png", kernels,
                         "generated kernels")
    man_path = out / "data" / "eval" / "manifest.json"
    if man_path.exists():
        from .data import load_stack
        view = eval_view(load_manifest(man_path), man_path.parent)
        truth = load_stack(view.truth_kernel_paths)[:16]
        _kernel_grid_png(report_dir / "truth_kernels.png", truth, "truth kernels")
    for recon in sorted((out / "samples").glob("recon_*.opfg")):
        name = recon.stem.removeprefix("recon_")
        kernels = load_checkpoint(recon)["kernels"]
        _kernel_grid_png(report_dir / f"kernels_{name}.png", kernels[:16],
                         f"recovered kernels ({name} prior)")
    print(report_dir / "summary.csv")
    return 0


def _matplotlib():
    try:
        import matplotlib
    except ImportError:
        raise DependencyError("matplotlib is required for figure output",
                              hint="pip install matplotlib")
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _kernel_grid_png(path, kernels, title: str) -> None:
    import numpy as np

    plt = _matplotlib()
    n = len(kernels)
    cols = 8 if n >= 8 else n
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.1 * cols, 1.1 * rows + 0.4))
    for i, ax in enumerate(np.atleast_1d(axes).ravel()):
        ax.set_axis_off()
        if i < n:
            ax.imshow(kernels[i], cmap="magma", interpolation="nearest")
    fig.suptitle(title, fontsize=9)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _table_png(path, header, rows) -> None:
    plt = _matplotlib()
    fig, ax = plt.subplots(figsize=(1.2 * len(header), 0.5 * (len(rows) + 2)))
    ax.set_axis_off()
    table = ax.table(cellText=rows, colLabels=header, loc="center")
    table.scale(1.0, 1.4)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)


# ------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opforge",
        description="learned blur-operator priors and blind deconvolution",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="run config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default="opforge-run", help="run directory")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing artifacts")

    common(sub.add_parser("synth", help="generate the unpaired datasets"))
    common(sub.add_parser("train-gan", help="learn the operator distribution"))
    common(sub.add_parser("sample-psf", help="draw kernels from the trained generator"))

    p = sub.add_parser("train-score", help="train a diffusion prior")
    common(p)
    p.add_argument("--domain", choices=("image", "kernel"), default="image")
    p.add_argument("--kernel-source", default=None,
                   choices=("truth", "gan", "uniform", "mismatch"))

    p = sub.add_parser("deblur", help="blind-solve the held-out measurements")
    common(p)
    p.add_argument("--kernel-prior", required=True,
                   choices=tuple(_PRIOR_TO_SOURCE))

    common(sub.add_parser("eval", help="score reconstructions against truth"))
    common(sub.add_parser("report", help="render metric tables and kernel grids"))
    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "train-gan": cmd_train_gan,
    "sample-psf": cmd_sample_psf,
    "train-score": cmd_train_score,
    "deblur": cmd_deblur,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except OpforgeError as err:
        line = str(err).replace("\n", " ")
        if isinstance(err, DependencyError) and err.hint:
            line = f"{line} ({err.hint})"
        print(f"opforge: {type(err).__name__}: {line}", file=sys.stderr)
        if isinstance(err, ConfigError):
            return 2
        if isinstance(err, DependencyError):
            return 3
        if isinstance(err, DivergenceError):
            return 4
        return 1


if __name__ == "__main__":
    sys.exit(main())
