"""Command-line entry point: ``tailfuse <subcommand> --config run.json``.

Subcommands run one pipeline phase each and communicate through files under
the configured output directory::

    data/manifest.json          synth
    checkpoints/                train
    cams/                       cam
    augment/ours@<s>/           augment
    eval/eval_report.{json,csv} eval
    report/report.{json,csv}    report
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cam_engine, eval_suite, fusion_engine, il_trainer, latent_store
from .config import RunConfig, load_config
from .errors import ConfigError, TailfuseError
from .sparse_models import student_forward

log = logging.getLogger("tailfuse")


def _data_manifest(cfg: RunConfig) -> Path:
    return cfg.out / "data" / "manifest.json"


def _partition(cfg: RunConfig, m: latent_store.DatasetManifest) -> latent_store.PartitionSpec:
    p = cfg.partition
    if p.threshold is not None:
        return latent_store.partition_head_tail(m, threshold=p.threshold)
    return latent_store.partition_head_tail(m, head=p.head, tail=p.tail)


def _method_dirs(cfg: RunConfig) -> dict[str, int]:
    return {"ours@0": 0, f"ours@{cfg.denoise.steps}": cfg.denoise.steps}


def cmd_synth(cfg: RunConfig) -> None:
    m = latent_store.synth_longtail(cfg.synth, cfg.phase_seed("synth"))
    path = latent_store.save_manifest(m, _data_manifest(cfg))
    part = _partition(cfg, m)
    (path.parent / "partition.json").write_text(json.dumps(part.to_json()) + "\n", encoding="utf-8")
    log.info("wrote %s (%d records)", path, len(m.records))


def cmd_train(cfg: RunConfig) -> None:
    m = latent_store.load_manifest(_data_manifest(cfg))
    il_cfg = cfg.il.model_copy(update={"seed": cfg.phase_seed("train")})
    ckpt = il_trainer.run_il(il_cfg, m, _partition(cfg, m), out_dir=cfg.out / "checkpoints")
    last = ckpt.history[-1]
    log.info("trained %d generations; final L_R=%.4f L_C=%.4f", len(ckpt.students), last["L_R"], last["L_C"])


def cmd_cam(cfg: RunConfig) -> None:
    m = latent_store.load_manifest(_data_manifest(cfg))
    part = _partition(cfg, m)
    ckpt = il_trainer.load_checkpoints(cfg.out / "checkpoints")
    ids, z, y = m.arrays("train")
    zs = student_forward(ckpt.student, z)
    out = cfg.out / "cams"
    index = []
    classes = range(m.num_classes) if cfg.cam.export == "all" else sorted(part.tail_classes)
    for c in classes:
        members = np.flatnonzero(y[:, c] > 0)
        cams = cam_engine.class_cams(ckpt.classifier, zs[members], c, cfg.cam.class_agnostic)
        for i, cam in zip(members, cams):
            stem = f"{ids[i]}_c{c}"
            latent_store.write_tensor(cam, out / f"{stem}.lta")
            cam_engine.write_pgm(cam, out / f"{stem}.pgm")
            masks = cam_engine.threshold_masks(cam, cfg.cam.tau_high, cfg.cam.tau_low)
            index.append({"id": ids[i], "class": c, "cam": f"{stem}.lta", "pgm": f"{stem}.pgm",
                          "specific_fraction": float(masks.specific.mean()),
                          "generic_fraction": float(masks.generic.mean())})
    (out / "index.json").write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    log.info("exported %d CAMs to %s", len(index), out)


def cmd_augment(cfg: RunConfig) -> None:
    m = latent_store.load_manifest(_data_manifest(cfg))
    part = _partition(cfg, m)
    ckpt = il_trainer.load_checkpoints(cfg.out / "checkpoints")
    fusions = fusion_engine.generate_fusions(
        m, part, ckpt, cfg.cam.tau_high, cfg.cam.tau_low, cfg.fusion.k, cfg.fusion.target,
        cfg.phase_seed("augment"), cfg.cam.class_agnostic,
    )
    for name, steps in _method_dirs(cfg).items():
        aug = fusion_engine.fusions_to_manifest(m, fusions, cfg.denoise, steps=steps)
        path = latent_store.save_manifest(aug, cfg.out / "augment" / name / "manifest.json")
        log.info("%s: %d synthetic records -> %s", name, len(fusions), path)


def cmd_eval(cfg: RunConfig) -> None:
    m = latent_store.load_manifest(_data_manifest(cfg))
    part = _partition(cfg, m)
    seed = cfg.phase_seed("eval")
    ecfg = eval_suite.EvalConfig(**cfg.eval.model_dump(exclude={"smote_k"}))
    manifests = {
        "baseline": m,
        "smote": fusion_engine.smote_augment(m, part, cfg.fusion.target, cfg.eval.smote_k, cfg.phase_seed("smote")),
    }
    for name in _method_dirs(cfg):
        manifests[name] = latent_store.load_manifest(cfg.out / "augment" / name / "manifest.json")
    rows = [eval_suite.downstream_eval(mm, m, part, ecfg, seed, name) for name, mm in manifests.items()]

    _, z, y = m.arrays("train")
    oracle = eval_suite.train_classifier(z, y, ecfg, seed)
    diagnostics = {"label_preservation": eval_suite.label_preservation(manifests["ours@0"], oracle)}
    out = cfg.out / "eval"
    eval_suite.write_report(rows, out / "eval_report.json", out / "eval_report.csv",
                            {"seed": cfg.seed, "diagnostics": diagnostics})
    log.info("wrote %s", out / "eval_report.json")


def cmd_report(cfg: RunConfig) -> None:
    src = cfg.out / "eval" / "eval_report.json"
    if not src.is_file():
        raise TailfuseError(f"{src} missing; run `eval` first")
    doc = json.loads(src.read_text(encoding="utf-8"))
    rows = {r.method: r for r in eval_suite.read_report(src)}
    order = ["baseline", "smote", *_method_dirs(cfg)]
    merged = [rows[k] for k in order if k in rows] + [r for k, r in rows.items() if k not in order]
    out = cfg.out / "report"
    eval_suite.write_report(merged, out / "report.json", out / "report.csv",
                            {"seed": cfg.seed, "config": cfg.model_dump(mode="json"),
                             "diagnostics": doc.get("diagnostics", {})})
    for r in merged:
        fd = "-" if r.avg_tail_fd is None else f"{r.avg_tail_fd:.3f}"
        log.info("%-10s fd=%-10s head_mAP=%.3f tail_mAP=%.3f", r.method, fd, r.head_map, r.tail_map)


HELP = {
    "synth": "generate the synthetic long-tailed dataset",
    "train": "run iterated learning and write checkpoints",
    "cam": "export class activation maps for the train split",
    "augment": "fuse tail/head latents into new tail records",
    "eval": "downstream evaluation of baseline, SMOTE and fused sets",
    "report": "merge evaluation rows into the final table",
}

COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "cam": cmd_cam,
    "augment": cmd_augment,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tailfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True, help="run configuration JSON")
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 1
    except TailfuseError as exc:
        log.error("%s failed: %s", args.command, exc)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
