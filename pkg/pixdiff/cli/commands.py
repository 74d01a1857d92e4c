"""
Bodies of the `pixdiff` sub-commands. Each takes a resolved RunConfig and a rich
Console, writes its files under <output>/<command>/ and returns the exit code.
"""
import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

from ..analytics.snr import default_time_grid, snr_csv, snr_curve, verify_prop1
from ..analytics.trajectory import FAMILIES, expected_trajectory, trajectory_csv, verify_prop2
from ..core.errors import ArtifactError
from ..core.image import Grid, Image, read_image, write_frame
from ..core.rng import RngStream
from ..core.synthetic import synthetic_portrait
from ..diffusion.forward import default_stride, empirical_report, report_csv, simulate_chain, simulate_ensemble
from ..diffusion.posterior import OracleNoise, OracleScale, sample_trajectory, write_frames
from ..diffusion.schedule import Schedule, ScheduleConfig, baseline_linear, build_schedule, matched_baseline
from ..learner.corpus import SyntheticCorpus, batch_schedule
from ..learner.evaluate import evaluate_scale_estimator, head_validation_mse
from ..learner.network import NetworkConfig, ReversePredictor, ScaleEstimator
from ..learner.serialize import load_checkpoint, load_component, loss_curve_csv, save_component
from ..learner.train import TrainConfig, TrainResult, gradient_check, train
from ..metrics.ssim import ssim
from .config import RunConfig, write_manifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

# samples per gradient check in `train`
GRADIENT_CHECK_BATCH = 4


def _write(path: str, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)


def clean_image(cfg: RunConfig) -> Image:
    if cfg.image:
        return read_image(cfg.image)
    return synthetic_portrait(seed=cfg.seed, size=cfg.image_size)


def cmd_forward(cfg: RunConfig, console: Console) -> int:
    x0 = clean_image(cfg)
    schedule_cfg = ScheduleConfig(cfg.gamma, cfg.steps)
    if cfg.baseline == "linear":
        baseline = baseline_linear(cfg.beta_min, cfg.beta_max, cfg.steps)
    else:
        baseline = matched_baseline(x0, schedule_cfg)
    runs: Dict[str, Schedule] = {"baseline": baseline}
    if not cfg.baseline_only:
        runs = {"pixelwise": build_schedule(x0, schedule_cfg), **runs}
    write_manifest(cfg)

    stride = cfg.frame_stride or default_stride(cfg.steps)
    table = Table(title=f"forward diffusion, T={cfg.steps}, gamma={cfg.gamma:g}")
    table.add_column("schedule")
    table.add_column("converged at", justify="right")
    table.add_column("final mean", justify="right")
    table.add_column("final var", justify="right")
    summary = ["schedule,converged_at,final_mean,final_var"]
    for name, schedule in runs.items():
        # the same stream for every schedule, so the runs are paired
        run = simulate_ensemble(x0, schedule, RngStream(cfg.seed).stream(1), cfg.copies, record_stride=stride)
        report = empirical_report(run, mean_tol=cfg.mean_tol, var_tol=cfg.var_tol)
        _write(cfg.path(f"{name}_trajectory.csv"), report_csv(report))
        write_frames(cfg.path(f"{name}_frames"), run.trajectories[0])
        mean, var = report.empirical_mean[-1].mean(), report.empirical_var[-1].mean()
        summary.append(f"{name},{report.converged_at},{mean:.10g},{var:.10g}")
        converged = str(report.converged_at) if report.converged_at <= cfg.steps else "never"
        table.add_row(name, converged, f"{mean:.4f}", f"{var:.4f}")
    _write(cfg.path("convergence.csv"), "\n".join(summary) + "\n")
    console.print(table)
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, console: Console) -> int:
    write_manifest(cfg)
    grid = default_time_grid(cfg.grid_points, cfg.t_min, cfg.t_max)
    for x in (cfg.x_small, cfg.x_large):
        _write(cfg.path(f"snr_x0_{x:g}.csv"), snr_csv(snr_curve(x, cfg.gamma, grid)))

    pixels = np.linspace(0.1, 1.0, cfg.pixels)
    families = [expected_trajectory(family, pixels, gamma=cfg.gamma, a=cfg.a) for family in FAMILIES]
    _write(cfg.path("trajectories.csv"), trajectory_csv(*families))

    prop1 = verify_prop1(cfg.x_small, cfg.x_large, cfg.gamma, grid)
    prop2 = verify_prop2(pixels, cfg.gamma, cfg.a)
    rows: List[Tuple[str, str, str]] = [
        (
            "snr_rate_ordering",
            "holds" if prop1.holds else "fails",
            f"t_delta={prop1.t_delta} guaranteed_below={prop1.time_bound:.6g} worst_t={prop1.worst_t:.6g}",
        ),
        (
            "pixelwise_decay_faster",
            prop2.status,
            f"slope_t_end={prop2.slope_t_end} violations={prop2.violations} fd_error={prop2.max_fd_error:.3g}",
        ),
    ]
    _write(cfg.path("verdicts.csv"), "check,status,detail\n" + "".join(f"{n},{s},{d}\n" for n, s, d in rows))

    table = Table(title=f"analysis, gamma={cfg.gamma:g}, a={cfg.a:g}")
    table.add_column("check")
    table.add_column("status")
    table.add_column("detail")
    for name, status, detail in rows:
        style = "red" if status == "fails" else "yellow" if status != "holds" else "green"
        table.add_row(name, f"[{style}]{status}[/{style}]", detail)
    console.print(table)
    failed = any(status == "fails" for _, status, _ in rows)
    return EXIT_FAILURE if failed else EXIT_OK


def _fit(
    component, corpus: SyntheticCorpus, cfg: RunConfig, iterations: int, seed: int, scale_source=None
) -> TrainResult:
    resume = None
    if cfg.resume:
        checkpoint = load_checkpoint(cfg.resume)
        if checkpoint.component.kind == component.kind:
            resume = checkpoint
    train_cfg = TrainConfig(
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        iterations=iterations,
        seed=seed,
        checkpoint_every=cfg.checkpoint_every,
    )
    result = train(
        component,
        corpus,
        train_cfg,
        scale_source=scale_source,
        resume=resume,
        checkpoint_path=cfg.path(f"{component.kind}.ckpt"),
    )
    save_component(cfg.path(f"{component.kind}.pxdf"), component, corpus_seed=corpus.seed)
    _write(cfg.path(f"{component.kind}_loss.csv"), loss_curve_csv(result.loss_curve))
    return result


def _check(component, corpus: SyntheticCorpus, cfg: RunConfig, scale_source=None) -> bool:
    rng = RngStream(cfg.seed).stream(4)
    batch = component.sample_batch(corpus.validation, rng, GRADIENT_CHECK_BATCH, scale_source)
    report = gradient_check(component, batch, RngStream(cfg.seed).stream(5))
    _write(cfg.path(f"{component.kind}_gradcheck.csv"), report.csv())
    return report.passed


def cmd_train(cfg: RunConfig, console: Console) -> int:
    corpus = SyntheticCorpus.generate(seed=cfg.corpus_seed, count=cfg.corpus_size)
    network = NetworkConfig(image_shape=corpus.image_shape, total_steps=cfg.steps, gamma=cfg.gamma)
    write_manifest(cfg)
    table = Table(title=f"training on {corpus.count} synthetic images, T={cfg.steps}, gamma={cfg.gamma:g}")
    table.add_column("component")
    table.add_column("iterations", justify="right")
    table.add_column("final loss", justify="right")
    table.add_column("gradient check")
    table.add_column("validation")
    passed = True

    estimator: Optional[ScaleEstimator] = None
    if cfg.component in ("both", "scale_estimator"):
        estimator = ScaleEstimator.for_corpus(network, corpus, RngStream(cfg.seed).stream(1))
        result = _fit(estimator, corpus, cfg, cfg.iterations, cfg.seed)
        ok = _check(estimator, corpus, cfg)
        evaluation = evaluate_scale_estimator(estimator, corpus.validation, RngStream(cfg.seed).stream(6))
        table.add_row(
            estimator.kind,
            str(result.iterations),
            f"{np.mean(result.loss_curve[-100:]):.4g}" if result.loss_curve else "-",
            "passed" if ok else "[red]failed[/red]",
            f"scale SSIM {evaluation.scale_ssim:.3f}, image SSIM {evaluation.image_ssim:.3f}",
        )
        passed = passed and ok
    if cfg.component in ("both", "reverse_predictor"):
        if estimator is None:
            estimator = load_component(cfg.path("scale_estimator.pxdf"), kind="scale_estimator")
        predictor = ReversePredictor.initialize(network, RngStream(cfg.seed).stream(2))
        result = _fit(predictor, corpus, cfg, cfg.predictor_iterations, cfg.seed + 1, scale_source=estimator)
        ok = _check(predictor, corpus, cfg, scale_source=estimator)
        mse = head_validation_mse(predictor, corpus.validation, RngStream(cfg.seed).stream(7), estimator)
        _write(cfg.path("head_mse.csv"), "head,mse\n" + "".join(f"{j},{v!r}\n" for j, v in enumerate(mse, start=1)))
        table.add_row(
            predictor.kind,
            str(result.iterations),
            f"{np.mean(result.loss_curve[-100:]):.4g}" if result.loss_curve else "-",
            "passed" if ok else "[red]failed[/red]",
            f"head MSE {mse.min():.3f}..{mse.max():.3f}",
        )
        passed = passed and ok
    console.print(table)
    return EXIT_OK if passed else EXIT_FAILURE


def _ground_truth(cfg: RunConfig, shape: Optional[tuple]) -> Grid:
    if cfg.image:
        return read_image(cfg.image).data[None]
    corpus = SyntheticCorpus.generate(seed=cfg.corpus_seed, count=cfg.corpus_size, size=shape[0] if shape else 8)
    return corpus.validation[: cfg.count]


def cmd_sample(cfg: RunConfig, console: Console) -> int:
    artifacts = cfg.artifacts or os.path.join(os.path.dirname(cfg.run_dir), "train")
    estimator = predictor = None
    if not cfg.oracle_scale:
        estimator = load_component(os.path.join(artifacts, "scale_estimator.pxdf"), kind="scale_estimator")
    if not cfg.oracle_noise:
        predictor = load_component(os.path.join(artifacts, "reverse_predictor.pxdf"), kind="reverse_predictor")
    trained = predictor if predictor is not None else estimator
    network = trained.config if trained is not None else NetworkConfig(total_steps=cfg.steps, gamma=cfg.gamma)
    if trained is not None and (network.gamma, network.total_steps) != (cfg.gamma, cfg.steps):
        logger.info(f"Using gamma={network.gamma:g}, T={network.total_steps} from the trained artifacts")
    if estimator is not None and predictor is not None and estimator.config != predictor.config:
        raise ArtifactError(f"{artifacts} holds an estimator and a predictor trained for different configs")
    images = _ground_truth(cfg, network.image_shape if trained is not None else None)
    steps = cfg.from_steps or [network.total_steps]
    write_manifest(cfg)

    rows = ["image,step,ssim"]
    by_step: Dict[int, List[float]] = {i: [] for i in steps}
    for k, x0 in enumerate(images):
        sched = batch_schedule(x0, network.schedule)
        chain = simulate_chain(x0, sched, RngStream(cfg.seed).stream(1).child(k), record_stride=1)
        scale_source = OracleScale(sched.scale) if estimator is None else estimator
        noise_source = OracleNoise(chain.eps_sequence()) if predictor is None else predictor
        for i in steps:
            reverse = sample_trajectory(
                chain.state_at(i), i, scale_source, noise_source, RngStream(cfg.seed).stream(3).child(k).child(i)
            )
            write_frame(cfg.path(f"x0_hat_{k:03d}_from_{i:03d}.pgm"), reverse.final)
            write_frames(cfg.path(f"frames_{k:03d}_from_{i:03d}"), reverse)
            score = ssim(reverse.final, x0)
            by_step[i].append(score)
            rows.append(f"{k},{i},{score:.10g}")
    _write(cfg.path("ssim.csv"), "\n".join(rows) + "\n")
    if predictor is not None:
        logger.info(f"Predictor executed {predictor.calls} times for {len(images) * len(steps)} reconstructions")

    table = Table(title="reconstruction SSIM by starting step")
    table.add_column("from step", justify="right")
    table.add_column("mean SSIM", justify="right")
    table.add_column("images", justify="right")
    for i in steps:
        table.add_row(str(i), f"{np.mean(by_step[i]):.4f}", str(len(by_step[i])))
    console.print(table)
    return EXIT_OK
