"""``flexedit`` command line: invert, edit, evaluate, gen-syno, curate."""
import argparse
import dataclasses
import importlib
import json
import os
import sys

import numpy as np

from flexedit import benchgen
from flexedit.backend import LatentTrajectory, NoiseSchedule, forward_stage
from flexedit.constraints import KINDS, TargetSpec
from flexedit.editor import EditConfig, EditSpec, EditSpecError, EditStageError, edit, write_diagnostics, write_manifest
from flexedit.evaluation import HashScorer, MeanAbsDistance, read_manifest, run_benchmark
from flexedit.imageio import file_sha256, load_image, save_heatmap, save_image, save_mask
from flexedit.segmentation import FixtureProvider, HttpSegmentationProvider, fixtures_root
from flexedit.toy import ToyBackend, ToyCodec

EXIT_OK, EXIT_USAGE, EXIT_STAGE = 0, 2, 3


class StageFailure(Exception):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")


def load_plugin(ref: str):
    """Resolve ``package.module:attribute``."""
    module, _, attr = ref.partition(":")
    if not attr:
        raise ValueError(f"plugin reference must look like module:attribute, got {ref!r}")
    return getattr(importlib.import_module(module), attr)


def make_backend(name: str, seed: int, latent_shape):
    if name == "toy":
        return ToyBackend(seed=seed, latent_shape=latent_shape)
    return load_plugin(name)(seed=seed, latent_shape=latent_shape)


def _csv_floats(text):
    return tuple(float(v) for v in text.split(","))


def _csv_ints(text):
    return tuple(int(v) for v in text.split(","))


def _csv_words(text):
    return tuple(w.strip() for w in text.split(",") if w.strip())


def _add_config_flags(p):
    """One flag per EditConfig field, named after the field."""
    g = p.add_argument_group("editing hyper-parameters")
    for f in dataclasses.fields(EditConfig):
        flag = "--T" if f.name == "T" else "--" + f.name.replace("_", "-")
        if f.name == "checkpoint_steps":
            kind = _csv_ints
        elif f.name.endswith("thresholds"):
            kind = _csv_floats
        elif f.type in (int, "int"):
            kind = int
        else:
            kind = float
        g.add_argument(flag, dest=f"cfg_{f.name}", type=kind, default=None, metavar=f.name.upper())


def _config_from_args(args) -> EditConfig:
    overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in dataclasses.fields(EditConfig)
                 if getattr(args, f"cfg_{f.name}", None) is not None}
    return EditConfig(**overrides)


def _common(p):
    p.add_argument("--backend", default="toy", help="'toy' or module:factory(seed=, latent_shape=)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def cmd_invert(args) -> int:
    image = load_image(args.image)
    codec = ToyCodec()
    shape = codec.latent_shape(image.shape)
    backend = make_backend(args.backend, args.seed, shape)
    sched = NoiseSchedule.linear(args.T)
    try:
        traj = forward_stage(codec.encode(image), backend, sched, backend.encode_text(args.prompt))
    except Exception as exc:
        raise StageFailure("forward", exc) from exc
    traj.seed = args.seed
    traj.save(args.out)
    print(f"wrote trajectory T={traj.T} shape={list(traj.shape)} to {args.out}")
    return EXIT_OK


def _provider(args):
    if args.provider == "http":
        if not args.provider_url:
            raise ValueError("--provider http needs --provider-url")
        return HttpSegmentationProvider(args.provider_url, image_dir=args.fixtures)
    root = args.fixtures or fixtures_root("fixtures")
    return FixtureProvider(root)


def _spec_from_args(args) -> EditSpec:
    centroid = None
    if args.centroid:
        centroid = _csv_floats(args.centroid)
        if len(centroid) != 2:
            raise ValueError("--centroid expects x,y")
    target = TargetSpec(centroid, args.size)
    return EditSpec(args.kind, args.source_prompt, args.target_prompt, _csv_words(args.source_tokens),
                    _csv_words(args.target_tokens), target, _csv_words(args.existing_tokens), args.seed)


def cmd_edit(args) -> int:
    if bool(args.image) == bool(args.trajectory):
        raise ValueError("give exactly one of --image or --trajectory")
    cfg = _config_from_args(args)
    spec = _spec_from_args(args)
    codec = ToyCodec()
    inputs = {}
    if args.image:
        source = load_image(args.image)
        shape = codec.latent_shape(source.shape)
        inputs["image"] = file_sha256(args.image)
        image_id = args.image_id or os.path.splitext(os.path.basename(args.image))[0]
    else:
        try:
            source = LatentTrajectory.load(args.trajectory)
        except Exception as exc:
            raise StageFailure("load", exc) from exc
        shape = source.shape
        inputs["trajectory_meta"] = file_sha256(os.path.join(args.trajectory, "meta.json"))
        image_id = args.image_id or os.path.basename(os.path.normpath(args.trajectory))
    backend = make_backend(args.backend, args.seed, shape)
    try:
        result = edit(source, spec, cfg, backend, codec, _provider(args), image_id)
    except EditStageError as exc:
        raise StageFailure(exc.stage, exc) from exc

    os.makedirs(args.out, exist_ok=True)
    image_path = os.path.join(args.out, "edited.png")
    diag_path = os.path.join(args.out, "diagnostics.jsonl")
    save_image(image_path, result.edited_image)
    write_diagnostics(diag_path, result.diagnostics)
    write_manifest(os.path.join(args.out, "manifest.json"), spec, cfg, args.seed, inputs, image_path, diag_path,
                   {"backend": args.backend, "image_id": image_id})
    if args.debug_attention:
        _dump_attention(result, spec, cfg, backend, os.path.join(args.out, "attention"))
    steps = sum(r["optimizer_steps"] for r in result.diagnostics)
    print(f"{spec.kind}: {len(result.steps)} denoising steps, {steps} optimizer steps -> {image_path}")
    return EXIT_OK


def _dump_attention(result, spec, cfg, backend, folder):
    """Per-step cross / refined / binary heatmaps for each target token."""
    from flexedit.attention import average_maps, binarize, refine

    text = backend.encode_text(spec.target_prompt)
    for snap in result.steps:
        rec = backend.attention(snap.latent, snap.timestep, text)
        avg_cross, avg_self = average_maps(rec)
        for tok in spec.target_tokens:
            j = text.index(tok)
            refined = refine(avg_cross[j], avg_self, cfg.tau, token=j, fine_shape=rec.fine_shape)
            stem = os.path.join(folder, f"{tok}_t{snap.timestep:03d}")
            save_heatmap(stem + "_cross.png", avg_cross[j])
            save_heatmap(stem + "_refined.png", refined.values)
            save_mask(stem + "_mask.png", np.kron(binarize(refined, cfg.beta).bits, np.ones((8, 8), np.uint8)))
        save_mask(os.path.join(folder, f"adaptive_t{snap.timestep:03d}.png"),
                  np.kron(snap.mask.bits, np.ones((8, 8), np.uint8)))


def cmd_evaluate(args) -> int:
    entries = read_manifest(args.manifest)
    provider = FixtureProvider(args.fixtures or fixtures_root("fixtures"))
    scorer = HashScorer(args.seed) if args.scorer == "hash" else load_plugin(args.scorer)()
    pd = MeanAbsDistance() if args.distance == "mad" else load_plugin(args.distance)()
    base = os.path.dirname(os.path.abspath(args.manifest))
    report = run_benchmark(entries, pd, scorer, provider, base_dir=base, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    report.write_json(os.path.join(args.out, "report.json"))
    report.write_scatter_csv(os.path.join(args.out, "scatter.csv"))
    print(report.summary_table())
    if report.samples and all(s.error is not None for s in report.samples):
        print("all samples failed", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


def cmd_gen_syno(args) -> int:
    samples = benchgen.gen_syno(benchgen.load_groups(args.groups))
    if args.kind:
        samples = [s for s in samples if s.task == args.kind]
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    benchgen.write_manifest(samples, args.out)
    counts = {k: sum(1 for s in samples if s.task == k) for k in KINDS}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_curate(args) -> int:
    with open(args.instructions) as fh:
        instructions = [line.strip() for line in fh if line.strip()]
    if args.transcript:
        client = benchgen.ReplayClient(args.transcript)
    elif args.command:
        client = benchgen.CommandClient(args.command.split())
    else:
        raise ValueError("give --transcript (offline replay) or --command")
    try:
        records = benchgen.curate(args.kind, instructions, client)
    except Exception as exc:
        raise StageFailure("curate", exc) from exc
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    benchgen.write_transcript(records, args.out)
    ok = sum(1 for r in records if r["parsed"] is not None)
    print(f"{ok}/{len(records)} responses parsed -> {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="flexedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invert", help="DDIM-invert an image into a trajectory directory")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--T", type=int, default=50)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("edit", help="edit an image or a recorded trajectory")
    _common(p)
    p.add_argument("--image")
    p.add_argument("--trajectory")
    p.add_argument("--image-id", help="segmentation fixture id (defaults to the input file stem)")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--source-prompt", required=True)
    p.add_argument("--target-prompt", required=True)
    p.add_argument("--source-tokens", default="", help="comma-separated")
    p.add_argument("--target-tokens", default="", help="comma-separated")
    p.add_argument("--existing-tokens", default="", help="comma-separated; objects to keep apart when adding")
    p.add_argument("--centroid", help="target centroid x,y in [0,1] image coordinates")
    p.add_argument("--size", type=float, help="target size as a fraction of the image")
    p.add_argument("--fixtures", help="fixture root (default: $FLEXEDIT_FIXTURES or ./fixtures)")
    p.add_argument("--provider", choices=("fixture", "http"), default="fixture")
    p.add_argument("--provider-url")
    p.add_argument("--debug-attention", action="store_true", help="dump per-step attention heatmaps")
    _add_config_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("evaluate", help="masked LPIPS / CLIP-O / CLIP-NO over a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fixtures")
    p.add_argument("--scorer", default="hash", help="'hash' stub or module:factory")
    p.add_argument("--distance", default="mad", help="'mad' stub or module:factory")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gen-syno", help="generate the SynO manifest")
    p.add_argument("--groups", help="groups JSON (default: bundled object groups)")
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_syno)

    p = sub.add_parser("curate", help="classify instructions with an external LLM or a replayed transcript")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--instructions", required=True, help="text file, one instruction per line")
    p.add_argument("--transcript", help="replay responses from a JSON-lines transcript")
    p.add_argument("--command", help="external command reading the prompt on stdin")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageFailure as exc:
        print(f"flexedit: stage failure {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (EditSpecError, ValueError, KeyError) as exc:
        print(f"flexedit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"flexedit: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
