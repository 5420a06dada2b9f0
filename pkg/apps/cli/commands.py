"""
Implementations of the CLI verbs. Each writes into one run directory and
prints a "Wrote ..." line per artifact.
"""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
from sklearn.model_selection import train_test_split

from apps.foveation import checkpoint, imaging
from apps.foveation.encoder import EncoderConfig, token_pixels
from apps.foveation.errors import ConfigError, ShapeMismatchError
from apps.foveation.flops import flops_table, timing_table
from apps.foveation.fovea import (
    GazePoint,
    PatternKind,
    TokenizedImage,
    assemble,
    build_pattern,
    resize_to_canvas,
    tokenize,
    tokenize_any,
)
from apps.foveation.gaze import (
    GazePredictorConfig,
    export_heatmap_png,
    fovea_contains,
    gaze_errors,
    gaze_frame,
    train_gaze_predictor,
)
from apps.foveation.mae import MaeConfig, MaskedAutoencoder, mae_mask, mae_reconstruct, train_mae, transfer_encoder
from apps.foveation.policy import FlowPolicy, PolicyConfig, train_policy
from apps.foveation.sync import (
    LatencyModel,
    make_frames,
    record_episode,
    sinusoid_benchmark,
    sinusoid_gaze,
    true_gaze,
    write_episode,
)
from apps.foveation.toytasks import (
    MIXTURE_COVS,
    MIXTURE_MEANS,
    MixtureDataset,
    PolicyVariant,
    ReachConfig,
    ReachDataset,
    blob_dataset,
    class_moments,
    mae_toy_images,
    mixture_policy_config,
    reach_episodes,
    run_closed_loop,
    sample_reach_starts,
    variant_policy_config,
)
from config.settings import Settings

logger = logging.getLogger(__name__)

TOY_TASKS = ("mixture2d", "blobgaze", "scripted-episode")


def _wrote(path: Path, detail: str, started: float) -> Path:
    elapsed_ms = int((time.perf_counter() - started) * 1000)
    print(f"Wrote {path} ({detail}) in {elapsed_ms} ms")
    return path


def _write_json(payload: dict[str, Any], path: Path) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@contextmanager
def _config_section(section: str):
    try:
        yield
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def encoder_config(settings: Settings, kind: PatternKind | str) -> EncoderConfig:
    with _config_section("encoder"):
        return _encoder_config(settings.encoder, kind)


def _encoder_config(enc, kind: PatternKind | str) -> EncoderConfig:
    if enc.preset == "vit-b":
        return EncoderConfig.vit_base(kind)
    return EncoderConfig.desk(
        kind,
        depth=enc.depth,
        dim=enc.dim,
        heads=enc.heads,
        mlp_ratio=enc.mlp_ratio,
        qformer_depth=enc.qformer_depth,
        n_queries=enc.n_queries,
    )


def policy_config(settings: Settings, **overrides) -> PolicyConfig:
    pol = settings.policy
    values = dict(
        chunk_size=pol.chunk_size,
        dim=pol.dim,
        depth=pol.depth,
        heads=pol.heads,
        mlp_ratio=pol.mlp_ratio,
        n_img_tokens=settings.encoder.n_queries,
        flow_steps=pol.flow_steps,
        ema_decay=pol.ema_decay,
        ensemble_m=pol.ensemble_m,
        proprio_dropout=pol.proprio_dropout,
        proprio_dropout_mode=pol.proprio_dropout_mode,
        lr=pol.lr,
        vit_lr=pol.vit_lr,
        schedule=pol.schedule,
        steps=pol.steps,
        batch_size=pol.batch_size,
        weight_decay=pol.weight_decay,
        grad_clip=pol.grad_clip,
        eval_every=pol.eval_every,
        seed=settings.run.seed,
        log_every=settings.run.log_every,
    )
    values.update(overrides)
    with _config_section("policy"):
        return PolicyConfig(**values)


def gaze_config(settings: Settings) -> GazePredictorConfig:
    with _config_section("gaze"):
        return _gaze_config(settings.gaze, settings)


def _gaze_config(g, settings: Settings) -> GazePredictorConfig:
    return GazePredictorConfig(
        downscale=g.downscale,
        grid=g.grid,
        temperature=g.temperature,
        lr=g.lr,
        steps=g.steps,
        batch_size=g.batch_size,
        seed=settings.run.seed,
        log_every=settings.run.log_every,
    )


def mae_config(settings: Settings) -> MaeConfig:
    m = settings.mae
    return MaeConfig(
        mask_ratio=m.mask_ratio,
        decoder_depth=m.decoder_depth,
        decoder_dim=m.decoder_dim,
        decoder_heads=m.decoder_heads,
        lr=m.lr,
        steps=m.steps,
        seed=settings.run.seed,
        log_every=settings.run.log_every,
    )


def latency_model(settings: Settings) -> LatencyModel:
    s = settings.sync
    with _config_section("sync"):
        return LatencyModel(base_delay=s.base_delay, jitter=s.jitter, jitter_scale=s.jitter_scale, drop_prob=s.drop_prob)


def _pattern(settings: Settings, kind: str | None):
    with _config_section("fovea"):
        return build_pattern(kind or settings.fovea.kind)


def _load_image(settings: Settings) -> np.ndarray | None:
    if not settings.fovea.image:
        return None
    return imaging.read_png(Path(settings.fovea.image))


def cmd_pattern(settings: Settings, out_dir: Path, kind: str | None = None) -> dict[str, Any]:
    started = time.perf_counter()
    pattern = _pattern(settings, kind)
    name = pattern.kind.value
    text_path = out_dir / f"pattern_{name}.txt"
    text_path.write_text(pattern.to_text(), encoding="utf-8")
    _wrote(text_path, f"{pattern.n_tokens} patches", started)

    image = _load_image(settings)
    if image is not None:
        image = resize_to_canvas(image, pattern)
    gaze = GazePoint(settings.fovea.gaze_x, settings.fovea.gaze_y)
    png_path = out_dir / f"pattern_{name}.png"
    rectangles = imaging.draw_pattern(pattern, png_path, image=image, gaze=gaze)
    _wrote(png_path, f"{rectangles} rectangles", started)
    return {"rectangles": rectangles, "text": text_path, "png": png_path}


def cmd_tokenize(settings: Settings, out_dir: Path, kind: str | None = None) -> dict[str, Any]:
    started = time.perf_counter()
    pattern = _pattern(settings, kind)
    image = _load_image(settings)
    if image is None:
        image = imaging.reference_card(pattern.canvas_width, pattern.canvas_height)
    gaze = GazePoint(settings.fovea.gaze_x, settings.fovea.gaze_y)
    tokenized = tokenize_any(image, pattern.kind, gaze if pattern.kind is PatternKind.FOVEATED else None)

    name = pattern.kind.value
    tokens_path = out_dir / f"tokens_{name}.npy"
    np.save(tokens_path, tokenized.tokens)
    _wrote(tokens_path, f"shape={tokenized.tokens.shape}", started)
    mosaic_path = imaging.save_mosaic(tokenized, out_dir / f"mosaic_{name}.png")
    _wrote(mosaic_path, "assembled tokens", started)
    return {"tokens": tokens_path, "mosaic": mosaic_path, "n_tokens": tokenized.n_tokens}


def cmd_flops(
    settings: Settings,
    out_dir: Path,
    preset: str = "vit-b",
    batch: int = 64,
    measure: bool = False,
) -> pd.DataFrame:
    started = time.perf_counter()
    table = flops_table(batch=batch, preset=preset)
    path = out_dir / "flops.csv"
    table.to_csv(path, index=False)
    print(table[["pattern", "tokens", "gflops"]].to_string(index=False))
    _wrote(path, f"preset={preset} batch={batch}", started)
    if measure:
        enc = settings.encoder
        timing = timing_table(batch=min(batch, 32), depth=enc.depth, dim=enc.dim, heads=enc.heads, mlp_ratio=enc.mlp_ratio)
        timing.to_csv(out_dir / "forward_time.csv", index=False)
        print(timing.to_string(index=False))
        _wrote(out_dir / "forward_time.csv", "desk-scale forward wall time", started)
    return table


def cmd_mae_demo(settings: Settings, out_dir: Path) -> dict[str, Any]:
    started = time.perf_counter()
    config = mae_config(settings)
    encoder = encoder_config(settings, PatternKind.FOVEATED)
    pattern = build_pattern(PatternKind.FOVEATED)
    center = GazePoint.center()
    images = mae_toy_images(settings.mae.n_images, seed=settings.run.seed)
    tokenized = [tokenize(image, pattern, center) for image in images]
    pixels = token_pixels(tokenized)

    torch.manual_seed(config.seed)
    model = MaskedAutoencoder(encoder, config.decoder_config(encoder))
    losses = train_mae(model, pixels, config)

    curve = pd.DataFrame({"step": np.arange(len(losses)), "loss": losses})
    curve_path = out_dir / "mae_loss.csv"
    curve.to_csv(curve_path, index=False)
    _wrote(curve_path, f"{len(losses)} steps", started)
    imaging.plot_curves(curve, "step", ["loss"], out_dir / "mae_loss.png", title="MAE masked-token loss", logy=True)

    plan = mae_mask(pattern.n_tokens, config.mask_ratio, seed=config.seed)
    with torch.no_grad():
        recon, _ = mae_reconstruct(model, pixels[:1], plan)
    first = tokenized[0]
    side = pattern.token_side
    masked_tokens = first.tokens.copy()
    masked_tokens[plan.masked] = 0.0
    recon_tokens = np.clip(recon[0].numpy().reshape(pattern.n_tokens, side, side, 3), 0.0, 1.0)
    # keep visible tokens as given, like the usual MAE visualization
    recon_tokens[plan.visible] = first.tokens[plan.visible]
    views = [
        assemble(first),
        assemble(TokenizedImage(pattern, masked_tokens, center, first.offset)),
        assemble(TokenizedImage(pattern, recon_tokens.astype(np.float32), center, first.offset)),
    ]
    triptych = imaging.save_mae_triptych(*views, out_dir / "mae_triptych.png")
    _wrote(triptych, "input / masked / reconstruction", started)

    ckpt = checkpoint.save_mae(out_dir / "mae.npz", model, encoder, config)
    _wrote(ckpt, "MAE weights", started)
    drop = 1.0 - float(np.mean(losses[-10:])) / float(np.mean(losses[:5]))
    metrics = {"first_loss": losses[0], "final_loss": losses[-1], "relative_drop": drop}
    _write_json(metrics, out_dir / "metrics.json")
    return metrics


def _train_mixture(settings: Settings, out_dir: Path, started: float) -> dict[str, Any]:
    config = mixture_policy_config(
        lr=settings.toytrain.mixture_lr,
        steps=settings.policy.steps,
        dim=settings.policy.dim,
        depth=settings.policy.depth,
        heads=settings.policy.heads,
        ema_decay=settings.policy.ema_decay,
        seed=settings.run.seed,
        log_every=settings.run.log_every,
    )
    dataset = MixtureDataset()
    torch.manual_seed(config.seed)
    policy = FlowPolicy(config)
    result = train_policy(policy, dataset, config)

    curve = pd.DataFrame({"step": np.arange(len(result.losses)), "loss": result.losses})
    curve.to_csv(out_dir / "policy_loss.csv", index=False)
    _wrote(out_dir / "policy_loss.csv", f"{len(result.losses)} steps", started)
    imaging.plot_curves(curve, "step", ["loss"], out_dir / "policy_loss.png", title="CFM loss", logy=True)

    rows = []
    for label in range(dataset.n_classes):
        mean, cov = class_moments(result.policy, label, dataset.n_classes, settings.toytrain.mixture_samples, seed=config.seed + label)
        rows.append(
            {
                "class": label,
                "mean_x": mean[0],
                "mean_y": mean[1],
                "mean_error": float(np.linalg.norm(mean - MIXTURE_MEANS[label])),
                "cov_error": float(np.linalg.norm(cov - MIXTURE_COVS[label], ord="fro")),
            }
        )
    moments = pd.DataFrame(rows)
    moments.to_csv(out_dir / "moments.csv", index=False)
    _wrote(out_dir / "moments.csv", "per-class sample moments", started)
    checkpoint.save_policy(out_dir / "policy.npz", result.policy)
    _wrote(out_dir / "policy.npz", "EMA policy", started)

    drop = 1.0 - float(np.mean(result.losses[-100:])) / float(np.mean(result.losses[:20]))
    return {
        "final_loss": result.losses[-1],
        "relative_drop": drop,
        "max_mean_error": float(moments["mean_error"].max()),
        "max_cov_error": float(moments["cov_error"].max()),
    }


def _train_blobgaze(settings: Settings, out_dir: Path, started: float) -> dict[str, Any]:
    config = gaze_config(settings)
    n_train, n_test = settings.gaze.n_train, settings.gaze.n_test
    images, gazes = blob_dataset(n_train + n_test, seed=settings.run.seed, side=config.input_side)
    train_x, test_x, train_y, test_y = train_test_split(
        images, gazes, test_size=n_test, random_state=settings.run.seed
    )
    result = train_gaze_predictor(train_x, train_y, config)
    predictor = result.predictor

    pd.DataFrame({"step": np.arange(len(result.losses)), "loss": result.losses}).to_csv(out_dir / "gaze_loss.csv", index=False)
    _wrote(out_dir / "gaze_loss.csv", f"{len(result.losses)} steps", started)

    errors = gaze_errors(predictor, test_x, test_y)
    with torch.no_grad():
        predicted = predictor.predict(torch.from_numpy(np.ascontiguousarray(test_x.transpose(0, 3, 1, 2)))).numpy()
    hits = [fovea_contains(GazePoint.from_array(p), GazePoint.from_array(t)) for p, t in zip(predicted, test_y)]
    frame_ids = np.arange(len(test_y))
    trajectory = pd.concat([gaze_frame(frame_ids, test_y, "human"), gaze_frame(frame_ids, predicted, "unet")])
    trajectory.to_csv(out_dir / "gaze_eval.csv", index=False)
    _wrote(out_dir / "gaze_eval.csv", f"{len(test_y)} held-out frames", started)

    export_heatmap_png(predictor, test_x[0], out_dir / "heatmap_000.png")
    checkpoint.save_gaze_predictor(out_dir / "gaze.npz", predictor)
    _wrote(out_dir / "gaze.npz", "gaze predictor", started)
    return {"mean_error": float(errors.mean()), "fovea_hit_rate": float(np.mean(hits)), "final_loss": result.losses[-1]}


def _load_pretrained_vit(settings: Settings, variant: PolicyVariant, policy: FlowPolicy) -> bool:
    """Copy MAE encoder weights into the policy ViT when the checkpoint was made for this token layout.

    Variants on another pattern train their ViT from scratch. A checkpoint for
    the same layout whose ViT settings differ is a configuration mistake.
    """
    path = settings.toytrain.mae_checkpoint
    if not path:
        return False
    mae, mae_encoder = checkpoint.load_mae(Path(path))
    vit = policy.observation_encoder.vit
    if mae_encoder.token_geometry != vit.config.token_geometry:
        logger.info("%s: %s was pretrained on another pattern; ViT starts from scratch", variant.value, path)
        return False
    try:
        transfer_encoder(mae, vit)
    except ShapeMismatchError as exc:
        raise ShapeMismatchError(f"{variant.value}: cannot load {path} ({exc})") from exc
    logger.info("%s: ViT initialized from %s", variant.value, path)
    return True


def _train_variant(
    settings: Settings,
    variant: PolicyVariant,
    train_episodes,
    val_episodes,
    reach: ReachConfig,
    out_dir: Path,
    started: float,
) -> dict[str, Any]:
    out_dir.mkdir(parents=True, exist_ok=True)
    config, encoder = variant_policy_config(
        variant, policy_config(settings), encoder_config(settings, variant.pattern)
    )
    dataset = ReachDataset(train_episodes, variant, config.chunk_size, reach)
    torch.manual_seed(config.seed)
    policy = FlowPolicy(config, encoder)
    pretrained = _load_pretrained_vit(settings, variant, policy)

    predictor = None
    if variant is PolicyVariant.FOV_UNET:
        images, gazes = dataset.gaze_training_set(settings.gaze.downscale)
        predictor = train_gaze_predictor(images, gazes, gaze_config(settings)).predictor
        checkpoint.save_gaze_predictor(out_dir / "gaze.npz", predictor)
        _wrote(out_dir / "gaze.npz", "two-stage gaze predictor", started)

    def evaluator(candidate: FlowPolicy) -> float:
        scores = [
            run_closed_loop(candidate, variant, ep.positions[0], ep.target, reach, predictor, seed=config.seed).final_distance
            for ep in val_episodes[:2]
        ]
        return -float(np.mean(scores))

    result = train_policy(policy, dataset, config, evaluator=evaluator if val_episodes else None, pretrained_vit=pretrained)
    pd.DataFrame({"step": np.arange(len(result.losses)), "loss": result.losses}).to_csv(out_dir / "policy_loss.csv", index=False)
    checkpoint.save_policy(out_dir / "policy.npz", result.policy)
    _wrote(out_dir / "policy.npz", f"{variant.value} EMA policy", started)
    if result.evaluations:
        pd.DataFrame(result.evaluations).to_csv(out_dir / "evaluations.csv", index=False)
    if result.best_state is not None:
        checkpoint.save_policy(out_dir / "policy_best.npz", result.policy, state=result.best_state)
        _wrote(out_dir / "policy_best.npz", f"best score {result.best_score:.4f}", started)
    return {"variant": variant.value, "final_loss": result.losses[-1], "best_score": result.best_score}


def _train_scripted(settings: Settings, out_dir: Path, started: float) -> dict[str, Any]:
    reach = ReachConfig(episode_length=settings.toytrain.episode_length)
    episodes = reach_episodes(settings.toytrain.episodes, seed=settings.run.seed, config=reach)
    train_eps, val_eps = train_test_split(episodes, test_size=0.125, random_state=settings.run.seed)
    variants = [PolicyVariant.parse(v) for v in settings.toytrain.variants.split(",") if v.strip()]
    rows = [
        _train_variant(settings, variant, train_eps, val_eps, reach, out_dir / variant.value, started)
        for variant in variants
    ]
    pd.DataFrame(rows).to_csv(out_dir / "variants.csv", index=False)
    _wrote(out_dir / "variants.csv", f"{len(rows)} variants", started)
    return {"variants": [row["variant"] for row in rows]}


def cmd_toytrain(settings: Settings, out_dir: Path, task: str | None = None) -> dict[str, Any]:
    started = time.perf_counter()
    task = task or settings.toytrain.task
    if task == "mixture2d":
        metrics = _train_mixture(settings, out_dir, started)
    elif task == "blobgaze":
        metrics = _train_blobgaze(settings, out_dir, started)
    elif task == "scripted-episode":
        metrics = _train_scripted(settings, out_dir, started)
    else:
        raise ConfigError(f"Unknown toy task {task!r} (expected one of: {', '.join(TOY_TASKS)})")
    _write_json({"task": task, **metrics}, out_dir / "metrics.json")
    _wrote(out_dir / "metrics.json", task, started)
    return metrics


def cmd_syncdemo(settings: Settings, out_dir: Path) -> dict[str, Any]:
    started = time.perf_counter()
    s = settings.sync
    latency = latency_model(settings)
    report = sinusoid_benchmark(
        latency,
        seconds=s.seconds,
        fps=s.fps,
        freq_hz=s.freq_hz,
        amplitude=s.amplitude,
        seed=settings.run.seed,
    )
    report.gap_errors.to_csv(out_dir / "sync_gaps.csv", index=False)
    _wrote(out_dir / "sync_gaps.csv", "per-gap error breakdown", started)

    frames = make_frames(report.n_frames, s.fps)
    source = sinusoid_gaze(s.freq_hz, s.amplitude)
    left, right = true_gaze(frames, source)
    t = np.array([f.t_emit for f in frames])
    imaging.plot_sync(t, (left + right) / 2.0, report.aligned.merged(), report.aligned.measured_mask, out_dir / "sync_plot.png")
    _wrote(out_dir / "sync_plot.png", "aligned vs true gaze", started)

    # the demo episode stores the true gaze as its joint column and its increments as actions
    joints = (left + right) / 2.0
    actions = np.vstack([np.diff(joints, axis=0), np.zeros((1, 2))])
    episode = record_episode(frames, report.aligned, joints, actions, fps=s.fps)
    episode_dir = write_episode(episode, out_dir / "episode")
    _wrote(episode_dir, f"{len(episode)} rows", started)

    summary = {
        "max_error": report.max_error,
        "mean_error": report.mean_error,
        "max_error_with_hold": report.max_error_with_hold,
        "n_frames": report.n_frames,
        "n_samples": report.n_samples,
        "latency": asdict(latency),
        "gaps": report.gap_errors.to_dict(orient="records"),
    }
    _write_json(summary, out_dir / "sync_summary.json")
    _wrote(out_dir / "sync_summary.json", f"max error {report.max_error:.5f}", started)
    return summary


def cmd_eval(settings: Settings, out_dir: Path, run_dir: Path) -> pd.DataFrame:
    started = time.perf_counter()
    run_dir = Path(run_dir)
    reach = ReachConfig(episode_length=settings.toytrain.episode_length)
    starts = sample_reach_starts(np.random.default_rng(settings.run.seed + 1000), settings.toytrain.eval_episodes)
    rows = []
    for variant in PolicyVariant:
        policy_path = run_dir / variant.value / "policy.npz"
        if not policy_path.exists():
            continue
        policy = checkpoint.load_policy(policy_path)
        predictor = None
        if variant is PolicyVariant.FOV_UNET:
            predictor = checkpoint.load_gaze_predictor(run_dir / variant.value / "gaze.npz")
        for index, (start, target) in enumerate(starts):
            result = run_closed_loop(policy, variant, start, target, reach, predictor, seed=settings.run.seed + index)
            rows.append(
                {
                    "variant": variant.value,
                    "episode": index,
                    "final_distance": result.final_distance,
                    "gaze_error": result.gaze_error,
                }
            )
    if not rows:
        raise FileNotFoundError(f"No variant checkpoints found under {run_dir}")
    table = pd.DataFrame(rows)
    table.to_csv(out_dir / "eval.csv", index=False)
    print(table.groupby("variant")[["final_distance", "gaze_error"]].mean().to_string())
    _wrote(out_dir / "eval.csv", f"{len(rows)} closed-loop episodes", started)
    return table
