"""Stage runners behind the CLI. Each reads an ExperimentConfig and writes bundles."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from pathlib import Path

import torch

from .checkpoint import CheckpointBundle, config_hash
from .codec import WatermarkDecoder, decode_message, harden_message, list_images, pretrain_decoder
from .config import ExperimentConfig, resolved
from .distortions import DistortionSpec, apply_distortion
from .errors import ConfigurationError, ContractError
from .finetune import evaluate_inr, finetune, freeze, generate_message
from .io import load_image, save_image
from .metrics import bit_accuracy, format_db
from .sampler import sample_image
from .siren import INRConfig, OptimizerSpec, Siren, fit_inr

log = logging.getLogger(__name__)


def _out(cfg: ExperimentConfig, out: str | Path | None, name: str) -> Path:
    return Path(out) if out is not None else Path(cfg.out) / name


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=str))


def inr_from_bundle(bundle: CheckpointBundle) -> Siren:
    net = Siren(INRConfig(**bundle.extra["inr_config"]))
    net.load_state_dict(bundle.tensors["inr"])
    return freeze(net)


def decoder_from_bundle(bundle: CheckpointBundle) -> WatermarkDecoder:
    dec = WatermarkDecoder(bundle.extra["message_length"], bundle.extra["channels"])
    dec.load_state_dict(bundle.tensors["decoder"])
    return freeze(dec)


def load_inr(path) -> Siren:
    bundle = CheckpointBundle.load(path)
    if bundle.stage not in ("fit", "embed"):
        raise ContractError(f"{path} is a {bundle.stage!r} checkpoint, not an INR")
    return inr_from_bundle(bundle)


def load_decoder(path) -> WatermarkDecoder:
    return decoder_from_bundle(CheckpointBundle.load(path, stage="decoder"))


def run_fit(cfg: ExperimentConfig, out=None) -> Path:
    section = cfg.fit
    if section.image is None:
        raise ConfigurationError("fit.image is not set")
    image = load_image(section.image, section.resolution)
    seed = cfg.seed_for("fit")
    inr_cfg = section.inr_config(seed)
    net, report = fit_inr(image, inr_cfg, OptimizerSpec(lr=section.lr, steps=section.steps))
    bundle = CheckpointBundle(
        stage="fit",
        config={"fit": resolved(section), "seed": seed},
        tensors={"inr": net.state_dict()},
        metrics={
            "final_loss": report.final_loss,
            "final_psnr": format_db(report.final_psnr),
            "steps": report.steps,
            "wall_time": report.wall_time,
        },
        extra={"inr_config": dataclasses.asdict(inr_cfg), "image_size": list(image.shape[1:])},
    )
    path = bundle.save(_out(cfg, out, "fit"))
    log.info("fit: %.2f dB after %d steps -> %s", report.final_psnr, report.steps, path)
    return path


def run_pretrain(cfg: ExperimentConfig, out=None) -> Path:
    pcfg = cfg.pretrain.pretrain_config(cfg.seed_for("pretrain"))
    if pcfg.dataset is None:
        raise ConfigurationError("pretrain.settings.dataset is not set")
    found = list_images(pcfg.dataset)
    if len(found) < 2:
        raise ConfigurationError(f"dataset {pcfg.dataset} has {len(found)} image(s); need at least 2")
    resume = None
    if cfg.pretrain.resume is not None:
        saved = CheckpointBundle.load(cfg.pretrain.resume, stage="pretrain_state")
        resume = dict(saved.tensors)
        resume["generator"] = resume["generator"].to(torch.uint8)
        resume["epoch"] = saved.extra["epoch"]
        resume["report"] = _report_from_dict(saved.extra["report"])
    dec, report, state = pretrain_decoder(pcfg, resume=resume, return_state=True)

    out_dir = _out(cfg, out, "pretrain")
    report_dict = dataclasses.asdict(report)
    config = resolved(pcfg)
    CheckpointBundle(
        stage="decoder",
        config=config,
        tensors={"decoder": dec.state_dict()},
        metrics={"val_accuracy": report.val_accuracy, "val_per_distortion": report.val_per_distortion},
        extra={"message_length": pcfg.message_length, "channels": pcfg.channels},
    ).save(out_dir / "decoder")
    CheckpointBundle(
        stage="pretrain_state",
        config=config,
        tensors={k: state[k] for k in ("encoder", "decoder", "optimizer", "scheduler", "generator")},
        extra={"epoch": state["epoch"], "report": report_dict},
    ).save(out_dir / "pretrain_state")
    _write_json(out_dir / "train_report.json", report_dict)
    log.info("pretrain: held-out accuracy %.2f%% -> %s", report.val_accuracy, out_dir)
    return out_dir / "decoder"


def _report_from_dict(d: dict):
    from .codec import TrainReport

    d = dict(d)
    d["val_curve"] = [tuple(x) for x in d["val_curve"]]
    return TrainReport(**d)


def embed_identity(cfg: ExperimentConfig) -> dict:
    """What an embed run depends on; its hash ties evaluate to the embed that produced a bundle."""
    section = cfg.finetune
    if section.inr_checkpoint is None:
        raise ConfigurationError("finetune.inr_checkpoint is not set")
    if section.decoder_checkpoint is None:
        raise ConfigurationError("embed needs a decoder checkpoint (finetune.decoder_checkpoint)")
    fit = CheckpointBundle.load(section.inr_checkpoint, stage="fit")
    dec = CheckpointBundle.load(section.decoder_checkpoint, stage="decoder")
    return {
        "finetune": resolved(cfg.finetune.finetune_config(cfg.seed_for("finetune"))),
        "message_length": section.message_length,
        "message_seed": cfg.seed_for("finetune"),
        "fit_config_hash": fit.config_hash,
        "decoder_config_hash": dec.config_hash,
    }


def run_embed(cfg: ExperimentConfig, out=None) -> Path:
    identity = embed_identity(cfg)
    section = cfg.finetune
    clean = load_inr(section.inr_checkpoint)
    dec = load_decoder(section.decoder_checkpoint)
    if dec.message_length != section.message_length:
        raise ConfigurationError(
            f"decoder extracts {dec.message_length} bits but finetune.message_length is {section.message_length}"
        )
    seed = cfg.seed_for("finetune")
    msg = generate_message(section.message_length, torch.Generator().manual_seed(seed))
    fcfg = section.finetune_config(seed)
    wm, report = finetune(clean, dec, msg, fcfg)

    out_dir = _out(cfg, out, "embed")
    CheckpointBundle(
        stage="embed",
        config=identity,
        tensors={"inr": wm.state_dict()},
        message=msg.tolist(),
        metrics={
            "best_epoch": report.best_epoch,
            "best_accuracy": report.best_accuracy,
            "best_psnr": format_db(report.best_psnr),
        },
        extra={
            "inr_config": dataclasses.asdict(clean.config),
            "inr_checkpoint": str(section.inr_checkpoint),
            "decoder_checkpoint": str(section.decoder_checkpoint),
        },
    ).save(out_dir)
    _write_json(
        out_dir.parent / f"{out_dir.name}_report.json",
        {
            "best_epoch": report.best_epoch,
            "best_accuracy": report.best_accuracy,
            "best_psnr": format_db(report.best_psnr),
            "eval_history": report.eval_history,
            "loss_curve": [dataclasses.asdict(x) for x in report.loss_curve],
        },
    )
    log.info("embed: best epoch %d, accuracy %.2f%% -> %s", report.best_epoch, report.best_accuracy, out_dir)
    return out_dir


def run_sample(checkpoint, height: int, width: int, out) -> Path:
    net = load_inr(checkpoint)
    with torch.no_grad():
        image = sample_image(net, height, width)
    save_image(image, out)
    return Path(out)


def run_attack(image_path, spec: DistortionSpec | str, out, seed: int = 0) -> Path:
    if isinstance(spec, str):
        spec = DistortionSpec.parse(spec)
    image = load_image(image_path)
    attacked = apply_distortion(image, spec, torch.Generator().manual_seed(seed))
    save_image(attacked, out)
    return Path(out)


def run_extract(decoder_checkpoint, image_path, embed_checkpoint=None) -> dict:
    dec = load_decoder(decoder_checkpoint)
    image = load_image(image_path)
    with torch.no_grad():
        logits = decode_message(dec, image)
    bits = harden_message(logits)
    report = {
        "image": str(image_path),
        "height": image.shape[1],
        "width": image.shape[2],
        "bits": bits.tolist(),
        "logits": logits.tolist(),
    }
    if embed_checkpoint is not None:
        expected = CheckpointBundle.load(embed_checkpoint, stage="embed").message
        report["bit_accuracy"] = bit_accuracy(expected, bits)
    return report


def run_evaluate(cfg: ExperimentConfig, out=None) -> list[dict]:
    section = cfg.evaluate
    ckpt = section.checkpoint or str(Path(cfg.out) / "embed")
    bundle = CheckpointBundle.load(ckpt, stage="embed")
    expected = config_hash(embed_identity(cfg))
    if bundle.config_hash != expected:
        raise ContractError(
            f"config drift: {ckpt} was embedded with config hash {bundle.config_hash[:12]}, "
            f"this config hashes to {expected[:12]}"
        )
    wm = inr_from_bundle(bundle)
    clean = load_inr(cfg.finetune.inr_checkpoint)
    dec = load_decoder(cfg.finetune.decoder_checkpoint)
    resolutions = [tuple(r) for r in (section.resolutions or cfg.finetune.finetune_config(0).resolutions)]
    pool = [DistortionSpec.parse(s) for s in section.pool]
    rows = evaluate_inr(
        wm, clean, dec, torch.tensor(bundle.message), resolutions, pool,
        seed=cfg.seed_for("evaluate"), quantize=section.quantize,
    )
    out_dir = _out(cfg, out, "evaluate")
    out_dir.mkdir(parents=True, exist_ok=True)
    table = [{**r, "psnr": format_db(r["psnr"])} for r in rows]
    with open(out_dir / "evaluation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(table[0]))
        writer.writeheader()
        writer.writerows(table)
    _write_json(out_dir / "evaluation.json", {"checkpoint": ckpt, "config_hash": expected, "rows": table})
    return rows
