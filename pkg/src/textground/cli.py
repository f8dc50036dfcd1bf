"""Command-line surface: data generation, training, guided sampling,
evaluation, and attention dumps.

Exit codes: 0 success, 1 usage or configuration problem, 2 bad or missing
data, 3 numeric failure (NaN anywhere aborts).  All outputs are functions
of (config, seed) and are written atomically.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .autodiff import Tensor
from .backbone import stage_grid
from .checkpoint import load_checkpoint, registry_state, restore_registry, save_checkpoint
from .config import RunConfig, load_run_config
from .errors import (ConfigError, DataError, GuidanceEmptyError, NumericError,
                     PlacementError, ShapeError, VocabularyError)
from .fusion import resize_bilinear
from .guidance import GuidanceConfig, build_noise_schedule, sample_with_guidance
from .ppm import read_ppm, write_pgm, write_ppm
from .synth import (BBox, embed_text_stub, evaluate_batch, generate_scene,
                    predicted_box_from_guidance)
from .training import (Models, TrainScene, build_models, frozen_features,
                       guidance_for_scene, meta_from_config, train_autoencoder,
                       train_denoiser, train_fusion)

__all__ = ["main"]

MANIFEST_NAME = "manifest.tsv"


# ---------------------------------------------------------------------------
# manifest I/O


def write_manifest(path: str, rows: list[tuple[str, str, BBox]]) -> None:
    lines = [f"{p}\t{caption}\t{b.x:.6f},{b.y:.6f},{b.w:.6f},{b.h:.6f}" for p, caption, b in rows]
    payload = ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def read_manifest(path: str) -> list[tuple[str, str, BBox]]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            img_path, caption, box_text = parts
            try:
                x, y, w, h = (float(v) for v in box_text.split(","))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad box {box_text!r}") from exc
            rows.append((img_path, caption, BBox(x=x, y=y, w=w, h=h)))
    return rows


def load_scenes(manifest_path: str) -> list[TrainScene]:
    base = os.path.dirname(os.path.abspath(manifest_path))
    scenes = []
    for img_path, caption, box in read_manifest(manifest_path):
        full = img_path if os.path.isabs(img_path) else os.path.join(base, img_path)
        if not os.path.exists(full):
            raise DataError(f"manifest references a missing image: {full}")
        scenes.append(TrainScene(image=read_ppm(full), caption=caption, gt_box=box))
    if not scenes:
        raise DataError(f"{manifest_path}: no scenes")
    return scenes


# ---------------------------------------------------------------------------
# shared model plumbing


def _models_from_checkpoint(cfg: RunConfig, ckpt_path: str) -> tuple[Models, dict[str, str]]:
    if not os.path.exists(ckpt_path):
        raise DataError(f"checkpoint not found: {ckpt_path}")
    models = build_models(cfg)
    meta = restore_registry(models.registry, load_checkpoint(ckpt_path))
    return models, meta


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")


def _guidance_config(cfg: RunConfig) -> GuidanceConfig:
    return GuidanceConfig(eta=cfg.eta, guided_steps=cfg.guided_steps, repeats=cfg.repeats,
                          beta_frac=cfg.beta_frac, retry_beta_frac=cfg.retry_beta_frac,
                          dilation=cfg.dilation, morph_k=cfg.morph_k,
                          use_activation=cfg.use_activation, use_dilation=cfg.use_dilation,
                          enabled=cfg.guidance_enabled)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(cfg.data_count):
        scene = generate_scene(cfg.seed + i, side=cfg.image_size, n_objects=cfg.scene_objects)
        name = f"scene_{i:04d}.ppm"
        write_ppm(os.path.join(out_dir, name), scene.image)
        rows.append((name, scene.caption, scene.gt_box))
    write_manifest(os.path.join(out_dir, MANIFEST_NAME), rows)
    print(f"{len(rows)} scenes -> {out_dir}")
    return 0


def cmd_train(cfg: RunConfig, data_path: str, out_path: str, resume: str | None) -> int:
    manifest = data_path if data_path.endswith(".tsv") else os.path.join(data_path, MANIFEST_NAME)
    scenes = load_scenes(manifest)
    models = build_models(cfg)
    start_epoch = 0
    if resume is not None:
        if not os.path.exists(resume):
            raise DataError(f"resume checkpoint not found: {resume}")
        meta = restore_registry(models.registry, load_checkpoint(resume))
        start_epoch = int(meta.get("epoch", "0"))

    def log(epoch: int, loss: float) -> None:
        if not np.isfinite(loss):
            raise NumericError(f"training loss is not finite at epoch {epoch}")
        print(f"{epoch}\t{loss:.12g}")

    trainers = {"fusion": train_fusion, "autoencoder": train_autoencoder, "denoiser": train_denoiser}
    trainers[cfg.train_target](models, scenes, cfg, cfg.epochs, start_epoch=start_epoch, log=log)

    meta = meta_from_config(cfg, {"epoch": str(start_epoch + cfg.epochs), "target": cfg.train_target})
    save_checkpoint(out_path, registry_state(models.registry, meta))
    return 0


def cmd_run(cfg: RunConfig, ckpt_path: str, image_path: str, caption: str, out_dir: str) -> int:
    models, _ = _models_from_checkpoint(cfg, ckpt_path)
    if not os.path.exists(image_path):
        raise DataError(f"input image not found: {image_path}")
    image = read_ppm(image_path)
    os.makedirs(out_dir, exist_ok=True)

    g, _ = guidance_for_scene(models, image, caption)
    _check_finite("guidance map", g.data)
    latent, _ = models.backbone.encode_image(Tensor(image))
    h_lat, w_lat, c_lat = latent.shape

    text = embed_text_stub(caption)
    schedule = build_noise_schedule(cfg.diffusion_steps)
    z_init = np.random.default_rng([cfg.seed, 999]).standard_normal((h_lat, w_lat, c_lat))
    z_final, trace = sample_with_guidance(z_init, g, text.appearance_tokens(), schedule,
                                          _guidance_config(cfg), models.denoiser, cfg.seed)
    _check_finite("sampled latent", z_final)

    out_img = models.backbone.decode_latent(Tensor(z_final))
    _check_finite("decoded image", out_img.data)
    write_ppm(os.path.join(out_dir, "output.ppm"), out_img.data)
    write_pgm(os.path.join(out_dir, "guidance.pgm"), g.data)
    trace_text = trace.lines()
    tmp = os.path.join(out_dir, "trace.tsv.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(trace_text)
    os.replace(tmp, os.path.join(out_dir, "trace.tsv"))
    print(f"guided steps: {trace.guided_steps}; outputs -> {out_dir}")
    return 0


def cmd_eval(cfg: RunConfig, ckpt_path: str, data_path: str, out_path: str) -> int:
    models, _ = _models_from_checkpoint(cfg, ckpt_path)
    manifest = data_path if data_path.endswith(".tsv") else os.path.join(data_path, MANIFEST_NAME)
    scenes = load_scenes(manifest)

    side = scenes[0].image.shape[0]
    eval_hw = stage_grid(side, side, 2)  # finer grid sharpens the box estimate
    gt, pred, names = [], [], []
    for i, sc in enumerate(scenes):
        g, _ = guidance_for_scene(models, sc.image, sc.caption)
        _check_finite(f"guidance map for scene {i}", g.data)
        up = resize_bilinear(g, eval_hw)
        gt.append(sc.gt_box)
        try:
            pred.append(predicted_box_from_guidance(up))
        except GuidanceEmptyError:
            pred.append(BBox(x=0.0, y=0.0, w=1.0, h=1.0))
        names.append(f"scene_{i:04d}")
    report = evaluate_batch(gt, pred)

    lines = [f"{names[i]}\t{report.ious[i]:.6f}\t{report.size_scores[i]:.6f}\t{report.dist_scores[i]:.6f}"
             for i in range(len(names))]
    lines.append(f"mean\t{report.mean_iou:.6f}\t{report.mean_size:.6f}\t{report.mean_dist:.6f}")
    tmp = f"{out_path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, out_path)
    print(f"scenes: {len(names)}  mean IoU: {report.mean_iou:.6f}")
    return 0


def cmd_dump_attn(cfg: RunConfig, ckpt_path: str, image_path: str, caption: str,
                  stage: int, out_dir: str) -> int:
    if stage not in (1, 2, 3, 4):
        raise ConfigError(f"stage must be 1..4, got {stage}")
    models, _ = _models_from_checkpoint(cfg, ckpt_path)
    if not os.path.exists(image_path):
        raise DataError(f"input image not found: {image_path}")
    image = read_ppm(image_path)
    os.makedirs(out_dir, exist_ok=True)

    _, diags = guidance_for_scene(models, image, caption)
    attn = diags["stages"][stage]["attention"].data  # [heads, N, T]
    side = image.shape[0]
    h, w = stage_grid(side, side, stage)
    maps = attn.mean(axis=2).reshape(-1, h, w)  # average over text keys
    peak = maps.max()
    if peak <= 0:
        raise NumericError("attention maps are empty")
    written = []
    for head in range(maps.shape[0]):
        name = f"stage{stage}_head{head}.pgm"
        write_pgm(os.path.join(out_dir, name), maps[head] / peak)
        written.append(name)
    write_pgm(os.path.join(out_dir, f"stage{stage}_mean.pgm"), maps.mean(axis=0) / peak)
    print(f"{len(written)} head maps + mean -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument surface


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textground", allow_abbrev=False,
                                     description="Text-grounded layout control on synthetic scenes")
    parser.add_argument("--config", default=None, help="path to a key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--out", default=None, help="output directory or file (per command)")
    parser.add_argument("--dfa-stages", default=None, metavar="LIST",
                        help="comma-separated stages to run deformable alignment on, e.g. 2,3,4")
    parser.add_argument("--no-offsets", action="store_true", help="freeze deformation offsets at zero")
    parser.add_argument("--no-scalar", action="store_true", help="freeze the attention modulation scalar at one")
    parser.add_argument("--no-card", action="store_true", help="drop the completion cardinality factor")
    parser.add_argument("--no-guidance", action="store_true", help="sample without gradient guidance")
    parser.add_argument("--no-activation", action="store_true", help="use the raw map rather than its thresholded core")
    parser.add_argument("--no-dilation", action="store_true", help="skip mask dilation after thresholding")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic scenes and a manifest")
    p.add_argument("--n", type=int, default=None, help="number of scenes")
    p.add_argument("--size", type=int, default=None, help="image side in pixels")
    p.add_argument("--objects", type=int, default=None, help="objects per scene")

    p = sub.add_parser("train", help="train one component on a scene set")
    p.add_argument("--data", required=True, help="manifest path or its directory")
    p.add_argument("--target", default=None, choices=("fusion", "autoencoder", "denoiser"))
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("run", help="guided sampling on one image + caption")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--caption", required=True)

    p = sub.add_parser("eval", help="grounding metrics over a scene set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("dump-attn", help="write per-head attention maps for one stage")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--stage", type=int, required=True)
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.dfa_stages is not None:
        overrides["fusion.dfa_stages"] = args.dfa_stages
    if args.no_offsets:
        overrides["fusion.drop_offsets"] = "true"
    if args.no_scalar:
        overrides["fusion.drop_scalar"] = "true"
    if args.no_card:
        overrides["fusion.drop_card"] = "true"
    if args.no_guidance:
        overrides["guidance.enabled"] = "false"
    if args.no_activation:
        overrides["guidance.use_activation"] = "false"
    if args.no_dilation:
        overrides["guidance.use_dilation"] = "false"
    if args.command == "gen-data":
        if args.n is not None:
            overrides["data.count"] = str(args.n)
        if args.size is not None:
            overrides["image.size"] = str(args.size)
        if args.objects is not None:
            overrides["scene.objects"] = str(args.objects)
    if args.command == "train":
        if args.target is not None:
            overrides["train.target"] = args.target
        if args.epochs is not None:
            overrides["train.epochs"] = str(args.epochs)
        if args.lr is not None:
            overrides["optim.lr"] = str(args.lr)
    return load_run_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        cfg = _config_from_args(args)
        out = args.out
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out or "data")
        if args.command == "train":
            return cmd_train(cfg, args.data, out or "checkpoint.bin", args.resume)
        if args.command == "run":
            return cmd_run(cfg, args.ckpt, args.image, args.caption, out or "run_out")
        if args.command == "eval":
            return cmd_eval(cfg, args.ckpt, args.data, out or "report.tsv")
        if args.command == "dump-attn":
            return cmd_dump_attn(cfg, args.ckpt, args.image, args.caption, args.stage, out or "attn_out")
        raise ConfigError(f"unknown command: {args.command}")
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, PlacementError, VocabularyError, GuidanceEmptyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
