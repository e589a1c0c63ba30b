"""Command-line entry point: every pipeline stage as a subcommand.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error. Every run
writes a manifest JSON (resolved options + seeds + library versions) beside
its outputs; `lodseg replay MANIFEST` re-runs the recorded command and, on
the same backend, reproduces the outputs bit-identically.

Train runs are driven by a JSON config file; unknown keys anywhere in the
config are rejected by name, and `--set dotted.path=value` overrides
individual entries (flags win over the file). Relative paths inside the
config resolve against the config file's directory. The LODSEG_CACHE
environment variable (default ~/.cache/lodseg) holds intermediate artifacts
such as augmentation previews without a --out-dir.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentationSpec, augment_sample
from .errors import ConfigError, LodsegError
from .evaluator import (aggregate, evaluate_set, infer_volume,
                        plot_group_boxplots, plot_robustness, rank_discordant,
                        robustness_sweep, save_aggregate_csv, save_mesh_ply,
                        save_report_jsonl, save_robustness_csv, extract_surface)
from .lod_net import NetworkConfig, load_checkpoint
from .motion_sim import MotionSpec, simulate_motion
from .rng import derive_rng
from .trainer import (TrainConfig, load_pair_dataset, run_pipeline_raw,
                      run_pipeline_skullstripped, run_stage)
from .volume_io import (conform, get_scheme, load_labels, load_volume,
                        normalize_intensity, save_labels, save_volume)

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_NETWORK_FIELDS = {f.name for f in dataclasses.fields(NetworkConfig)}
_PIPELINES = {"raw": ("adult_prior", "infant_upper"),
              "skullstripped": ("skullstripped_upper", "finetune")}


def cache_dir() -> Path:
    root = os.environ.get("LODSEG_CACHE", "~/.cache/lodseg")
    return Path(root).expanduser()


# -- manifest ----------------------------------------------------------------

def _versions() -> dict:
    import scipy
    import skimage
    import torch
    return {"lodseg": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__, "scipy": scipy.__version__,
            "torch": torch.__version__, "skimage": skimage.__version__}


def write_manifest(subcommand: str, options: dict, anchor: Path) -> Path:
    """Store the resolved run description beside its primary output.

    Directory anchors get a manifest.json inside; file anchors get a sibling
    <name>.manifest.json.
    """
    anchor = Path(anchor)
    if anchor.is_dir() or anchor.suffix == "":
        anchor.mkdir(parents=True, exist_ok=True)
        path = anchor / "manifest.json"
    else:
        anchor.parent.mkdir(parents=True, exist_ok=True)
        path = anchor.with_name(anchor.name + ".manifest.json")
    payload = {"tool": "lodseg", "subcommand": subcommand,
               "options": options, "versions": _versions(),
               "created": datetime.now(timezone.utc).isoformat()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


# -- train config parsing ----------------------------------------------------

def _set_override(config: dict, assignment: str) -> None:
    """Apply one 'dotted.path=value' override; values parse as JSON if valid."""
    if "=" not in assignment:
        raise ConfigError(f"--set needs KEY=VALUE, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    keys = dotted.split(".")
    for i, key in enumerate(keys[:-1]):
        if isinstance(node, list):
            node = node[int(key)]
        elif key in node:
            node = node[key]
        else:
            raise ConfigError(f"--set path {dotted!r}: no key {key!r}")
        if not isinstance(node, (dict, list)):
            raise ConfigError(f"--set path {dotted!r}: {key!r} is a leaf")
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def _parse_augmentation(value) -> AugmentationSpec:
    if value is None or value == "default":
        return AugmentationSpec()
    if value == "disabled":
        return AugmentationSpec.disabled()
    if isinstance(value, dict):
        return AugmentationSpec.from_dict(value)
    raise ConfigError(f"augmentation must be 'default', 'disabled', or a "
                      f"table, got {value!r}")


def _parse_network(value) -> NetworkConfig | None:
    if value is None:
        return None
    unknown = set(value) - _NETWORK_FIELDS
    if unknown:
        raise ConfigError(f"network: unknown config key {sorted(unknown)[0]!r}")
    value = dict(value)
    if "input_shape" in value:
        value["input_shape"] = tuple(value["input_shape"])
    return NetworkConfig(**value)


def _resolve_path(value, base: Path):
    if value is None:
        return None
    path = Path(value)
    return path if path.is_absolute() else base / path


def _parse_stage(block: dict, base: Path, global_seed) -> tuple[TrainConfig, dict]:
    unknown = set(block) - _TRAIN_FIELDS - {"data"}
    if unknown:
        raise ConfigError(
            f"stage {block.get('stage', '?')!r}: unknown config key "
            f"{sorted(unknown)[0]!r}")
    if "data" not in block:
        raise ConfigError(f"stage {block.get('stage', '?')!r}: missing data block")
    data = block["data"]
    unknown = set(data) - {"train", "val"}
    if unknown:
        raise ConfigError(f"data: unknown config key {sorted(unknown)[0]!r}")
    for split in ("train", "val"):
        if split not in data:
            raise ConfigError(f"data: missing {split!r} block")
        extra = set(data[split]) - {"volumes", "labels"}
        if extra:
            raise ConfigError(
                f"data.{split}: unknown config key {sorted(extra)[0]!r}")

    fields = {k: v for k, v in block.items() if k != "data"}
    fields["augmentation"] = _parse_augmentation(fields.get("augmentation"))
    fields["network"] = _parse_network(fields.get("network"))
    if fields.get("frozen_levels") is not None:
        fields["frozen_levels"] = frozenset(
            str(l) for l in fields["frozen_levels"])
    if "seed" not in fields and global_seed is not None:
        fields["seed"] = global_seed
    for key in ("checkpoint_in", "checkpoint_out", "log_path"):
        if fields.get(key) is not None:
            fields[key] = _resolve_path(fields[key], base)
    config = TrainConfig(**fields)
    datasets = {split: (_resolve_path(data[split]["volumes"], base),
                        _resolve_path(data[split]["labels"], base))
                for split in ("train", "val")}
    return config, datasets


def _parse_raw_config(raw: dict, base: Path) -> tuple[str | None, list]:
    unknown = set(raw) - {"pipeline", "stages", "seed"}
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    pipeline = raw.get("pipeline")
    if pipeline is not None and pipeline not in _PIPELINES:
        raise ConfigError(
            f"pipeline must be one of {sorted(_PIPELINES)}, got {pipeline!r}")
    stages = raw.get("stages")
    if not stages:
        raise ConfigError("config needs a non-empty 'stages' list")
    if pipeline is None and len(stages) != 1:
        raise ConfigError("without 'pipeline', exactly one stage is expected")
    parsed = [_parse_stage(block, base, raw.get("seed")) for block in stages]
    return pipeline, parsed


def parse_train_config(path, overrides=()) -> tuple[str | None, list, dict]:
    """Read the JSON run config; returns (pipeline, [(config, dirs)], raw)."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    for assignment in overrides:
        _set_override(raw, assignment)
    pipeline, parsed = _parse_raw_config(raw, path.parent.resolve())
    return pipeline, parsed, raw


def _load_datasets(config: TrainConfig, dirs: dict):
    return tuple(load_pair_dataset(dirs[split][0], dirs[split][1],
                                   config.scheme)
                 for split in ("train", "val"))


# -- subcommand implementations ----------------------------------------------

def cmd_conform(opts: dict) -> None:
    shape = opts.get("shape", 256)
    if opts.get("labels"):
        scheme = get_scheme(opts["scheme"])
        data = load_labels(opts["in"], scheme)
        out = conform(data, target_shape=shape)
        save_labels(out, opts["out"])
    else:
        data = load_volume(opts["in"])
        out = conform(data, target_shape=shape,
                      interp=opts.get("order", "linear"))
        if opts.get("normalize"):
            out = normalize_intensity(out)
        save_volume(out, opts["out"])
    write_manifest("conform", opts, Path(opts["out"]))
    print(f"wrote {opts['out']} shape={out.shape}")


def cmd_train(opts: dict) -> None:
    if "config_resolved" in opts:
        # replay path: the manifest embeds the fully resolved config
        pipeline, parsed = _parse_raw_config(opts["config_resolved"],
                                             Path(opts["config_base"]))
    else:
        pipeline, parsed, raw = parse_train_config(opts["config"],
                                                   opts.get("set", ()))
        opts = {**opts, "config_resolved": raw,
                "config_base": str(Path(opts["config"]).parent.resolve())}
    if opts.get("workers"):
        parsed = [(dataclasses.replace(c, workers=opts["workers"]), d)
                  for c, d in parsed]
    resume = bool(opts.get("resume"))

    if pipeline is None:
        config, dirs = parsed[0]
        train_set, val_set = _load_datasets(config, dirs)
        _, records = run_stage(config, train_set, val_set)
        results = {config.stage: records}
    else:
        data = {}
        for config, dirs in parsed:
            data[config.stage] = _load_datasets(config, dirs)
        configs = [c for c, _ in parsed]
        runner = run_pipeline_raw if pipeline == "raw" \
            else run_pipeline_skullstripped
        _, results = runner(configs, data, resume=resume)

    anchor = parsed[-1][0].checkpoint_out or Path(opts["config"])
    write_manifest("train", opts, Path(anchor))
    for stage, records in results.items():
        if records:
            best = min(r.val_loss for r in records)
            print(f"stage {stage}: {len(records)} epochs, "
                  f"final val_loss {records[-1].val_loss:.17g}, "
                  f"best val_loss {best:.17g}")
        else:
            print(f"stage {stage}: skipped (resume)")


def cmd_infer(opts: dict) -> None:
    scheme = get_scheme(opts["scheme"])
    state = load_checkpoint(opts["checkpoint"],
                            expect_num_classes=scheme.num_classes)
    volume = load_volume(opts["in"])
    labels = infer_volume(state, volume, scheme)
    save_labels(labels, opts["out"])
    write_manifest("infer", opts, Path(opts["out"]))
    print(f"wrote {opts['out']}")


def cmd_evaluate(opts: dict) -> None:
    out_dir = Path(opts["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    scheme = get_scheme(opts["scheme"])
    methods = {}
    for spec in opts["pred"]:
        if "=" not in spec:
            raise ConfigError(f"--pred needs METHOD=DIR, got {spec!r}")
        name, directory = spec.split("=", 1)
        methods[name] = directory

    reports = []
    for name, directory in methods.items():
        report = evaluate_set(directory, opts["gt"],
                              metadata=opts.get("metadata"),
                              scheme=scheme, method=name)
        reports.append(report)
        save_report_jsonl(report, out_dir / f"records_{name}.jsonl")
        save_aggregate_csv(aggregate(report), out_dir / f"aggregate_{name}.csv")
        plot_group_boxplots(report, out_dir / f"plots_{name}")
        print(f"method {name}: {len(report.records)} volumes, "
              f"{len(report.exclusions)} excluded")

    if len(reports) >= 2:
        ranked = rank_discordant(reports, k=opts.get("top_k", 30))
        (out_dir / "discordant.txt").write_text(
            "\n".join(ranked) + "\n", encoding="utf-8")
        print(f"top-{len(ranked)} discordant volumes -> discordant.txt")
    write_manifest("evaluate", opts, out_dir)


def cmd_robustness(opts: dict) -> None:
    out_dir = Path(opts["out_dir"])
    scheme = get_scheme(opts["scheme"])
    state = load_checkpoint(opts["checkpoint"],
                            expect_num_classes=scheme.num_classes)
    volumes = load_pair_dataset(opts["volumes"], opts["labels"], scheme)
    alphas = [float(a) for a in str(opts["alphas"]).split(",") if a != ""]
    seeds = [int(s) for s in str(opts["seeds"]).split(",") if s != ""]
    rows = robustness_sweep(state, volumes, alphas, seeds)
    save_robustness_csv(rows, out_dir / "sweep.csv")
    plot_robustness(rows, out_dir / "sweep.png")
    write_manifest("robustness", opts, out_dir)
    for row in rows:
        print(f"alpha {row.alpha}: mean dice {row.mean:.4f}")


def cmd_augment_preview(opts: dict) -> None:
    out_dir = Path(opts.get("out_dir") or cache_dir() / "augment-preview")
    out_dir.mkdir(parents=True, exist_ok=True)
    volume = load_volume(opts["in"])
    labels = None
    if opts.get("labels"):
        labels = load_labels(opts["labels"], get_scheme(opts["scheme"]))
    spec = AugmentationSpec()
    for k in range(opts.get("samples", 3)):
        rng = derive_rng(opts.get("seed", 0), k)
        out_v, out_l, plan = augment_sample(volume, labels, spec, rng)
        save_volume(out_v, out_dir / f"sample_{k}.nii.gz")
        if out_l is not None:
            save_labels(out_l, out_dir / f"sample_{k}_labels.nii.gz")
        (out_dir / f"sample_{k}_plan.json").write_text(
            json.dumps(plan, indent=2) + "\n", encoding="utf-8")
    write_manifest("augment-preview", opts, out_dir)
    print(f"wrote {opts.get('samples', 3)} previews under {out_dir}")


def cmd_motion_sim(opts: dict) -> None:
    volume = load_volume(opts["in"])
    spec = MotionSpec(alpha=opts["alpha"],
                      num_events=opts.get("num_events", 4),
                      seed=opts.get("seed", 0))
    out = simulate_motion(volume, spec)
    save_volume(out, opts["out"])
    write_manifest("motion-sim", opts, Path(opts["out"]))
    print(f"wrote {opts['out']} (alpha={spec.alpha})")


def cmd_mesh(opts: dict) -> None:
    scheme = get_scheme(opts["scheme"])
    labels = load_labels(opts["in"], scheme)
    mesh = extract_surface(labels, opts["class_name"],
                           smoothing_iters=opts.get("smooth_iters", 10))
    save_mesh_ply(mesh, opts["out"])
    write_manifest("mesh", opts, Path(opts["out"]))
    print(f"wrote {opts['out']}: {len(mesh.vertices)} vertices, "
          f"{len(mesh.faces)} faces")


_COMMANDS = {
    "conform": cmd_conform,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "robustness": cmd_robustness,
    "augment-preview": cmd_augment_preview,
    "motion-sim": cmd_motion_sim,
    "mesh": cmd_mesh,
}


def cmd_replay(opts: dict) -> None:
    manifest = json.loads(Path(opts["manifest"]).read_text(encoding="utf-8"))
    for key in ("subcommand", "options"):
        if key not in manifest:
            raise ConfigError(f"manifest missing {key!r}")
    subcommand = manifest["subcommand"]
    if subcommand not in _COMMANDS:
        raise ConfigError(f"manifest names unknown subcommand {subcommand!r}")
    print(f"replaying {subcommand} from {opts['manifest']}")
    _COMMANDS[subcommand](manifest["options"])


# -- argument parsing --------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lodseg",
                     description="Two-level LOD brain MRI segmentation")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="chatty progress output")
    sub = parser.add_subparsers(dest="subcommand", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("conform", help="resample to 1 mm RAS+ cube")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shape", type=int, default=256)
    p.add_argument("--labels", action="store_true",
                   help="treat the input as a label map (nearest neighbour)")
    p.add_argument("--scheme", default="raw8")
    p.add_argument("--order", choices=("linear", "nearest"), default="linear")
    p.add_argument("--normalize", action="store_true",
                   help="percentile-normalize intensities after resampling")

    p = sub.add_parser("train", help="run a training stage or pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry (dotted path)")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("infer", help="segment one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", required=True)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", action="append", required=True,
                   metavar="METHOD=DIR")
    p.add_argument("--gt", required=True)
    p.add_argument("--metadata")
    p.add_argument("--scheme", default="raw8")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--top-k", type=int, default=30)

    p = sub.add_parser("robustness", help="Dice vs motion severity sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volumes", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--scheme", default="raw8")
    p.add_argument("--alphas", required=True, help="comma list, e.g. 0,0.5,1,2")
    p.add_argument("--seeds", default="0", help="comma list of seeds")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("augment-preview", help="sample augmented copies")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--labels")
    p.add_argument("--scheme", default="raw8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--out-dir")

    p = sub.add_parser("motion-sim", help="synthesize motion artefacts")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-events", type=int, default=4)
    p.add_argument("--out", required=True)

    p = sub.add_parser("mesh", help="extract a class surface as PLY")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--scheme", default="raw8")
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--smooth-iters", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="re-run a recorded manifest")
    p.add_argument("manifest")
    return parser


def _options_from_args(args: argparse.Namespace) -> dict:
    skip = {"subcommand", "verbose"}
    options = {}
    for key, value in vars(args).items():
        if key in skip or value is None:
            continue
        options["in" if key == "in_path" else key] = value
    return options


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    options = _options_from_args(args)
    command = cmd_replay if args.subcommand == "replay" \
        else _COMMANDS[args.subcommand]
    try:
        command(options)
    except (LodsegError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
