"""Command-line pipeline: prepare-data, train, transform, evaluate, report,
plus toy-data for materializing the synthetic desk-scale dataset.

Every flag has a config-file equivalent (JSON, sections named after the
commands with dashes replaced by underscores, plus "common"); flags override
file values and unknown keys are rejected. Exit status: 0 success, 1
usage/input error, 2 internal or numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import shlex
import sys

from .data import (
    load_manifest_entries,
    load_paired_dataset,
    load_split,
    make_attribute_split,
    make_subject_disjoint_split,
    manifest_hash,
    save_image,
    save_split,
    synthesize_toy_dataset,
    export_dataset,
    _decode_image,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    EmbedderLookupError,
    GalleryError,
    TrainingDiverged,
)
from .losses import LossWeights
from .pipeline import evaluate_identification
from .recognition import external_embedder, toy_embedder
from .reporting import (
    aggregate_cmc,
    aggregate_rank_table,
    compose_image_grid,
    load_metrics,
    render_cmc_csv,
    render_table_csv,
    render_table_markdown,
)
from .training import TrainConfig, TransformModel, train

COMMON_KEYS = {"seed", "out_dir", "resolution"}
SECTION_KEYS = {
    "common": COMMON_KEYS,
    "prepare_data": {"manifest", "mode", "n_test", "attribute", "out", "seed"},
    "train": {
        "model",
        "manifest",
        "split",
        "out_dir",
        "epochs",
        "learning_rate",
        "beta1",
        "beta2",
        "lambda1",
        "lambda2",
        "batch_size",
        "seed",
        "resolution",
        "augment",
        "checkpoint_every",
        "gen_base_channels",
        "disc_base_channels",
        "disc_trunk_layers",
        "patch_size",
        "patch_channels",
        "patch_train_stride",
    },
    "transform": {"checkpoint", "model", "out_dir", "resolution", "stochastic", "seed"},
    "evaluate": {
        "manifest",
        "splits",
        "models",
        "protocol",
        "embedder",
        "embedder_cmd",
        "ks",
        "out_dir",
        "seed",
        "resolution",
        "rank_per_subject",
    },
    "report": {"format", "out_dir", "grid_rows", "grid_out"},
    "toy_data": {"subjects", "per_subject", "resolution", "seed", "out"},
}


class CliParser(argparse.ArgumentParser):
    # usage errors are input errors: exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class Resolver:
    """Layered lookup: CLI flag, then config section, then common section."""

    def __init__(self, args, section):
        self.args = args
        self.section_name = section
        config = {}
        if getattr(args, "config", None):
            try:
                with open(args.config, encoding="utf-8") as f:
                    config = json.load(f)
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {args.config}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from exc
            if not isinstance(config, dict):
                raise ConfigError("config file must contain a JSON object")
            for name, body in config.items():
                if name not in SECTION_KEYS:
                    raise ConfigError(f"unknown config section {name!r}")
                if not isinstance(body, dict):
                    raise ConfigError(f"config section {name!r} must be an object")
                unknown = set(body) - SECTION_KEYS[name]
                if unknown:
                    raise ConfigError(
                        f"unknown config key(s) in [{name}]: {sorted(unknown)}"
                    )
        self.section = config.get(section, {})
        self.common = config.get("common", {})

    def get(self, key, default=None):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        if key in self.section:
            return self.section[key]
        if key in self.common and key in COMMON_KEYS:
            return self.common[key]
        return default

    def require(self, key, hint=None):
        value = self.get(key)
        if value is None:
            raise ConfigError(f"missing required option --{(hint or key).replace('_', '-')}")
        return value


def _parse_ops(text):
    if text is None:
        return None
    text = text.strip()
    if text in ("", "none"):
        return frozenset()
    return frozenset(part.strip() for part in text.split(",") if part.strip())


def _parse_ks(text):
    return tuple(int(part) for part in str(text).split(",") if str(part).strip())


def _json_dump(payload, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_prepare_data(args):
    res = Resolver(args, "prepare_data")
    manifest = res.require("manifest")
    out = res.require("out")
    mode = res.get("mode", "random")
    seed = int(res.get("seed", 0))
    entries = load_manifest_entries(manifest)
    if mode == "random":
        n_test = int(res.get("n_test", 8))
        split = make_subject_disjoint_split(entries, n_test, seed)
    elif mode == "attribute":
        attribute = res.require("attribute")
        split = make_attribute_split(entries, attribute)
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    save_split(split, out)
    print(
        f"split written to {out}: {len(split.train_subjects)} train subjects, "
        f"{len(split.test_subjects)} test subjects"
    )
    return 0


def cmd_train(args):
    res = Resolver(args, "train")
    model_kind = res.require("model")
    manifest = res.require("manifest")
    split_path = res.require("split")
    out_dir = res.require("out_dir")
    resolution = int(res.get("resolution", 256))

    lambda1 = float(res.get("lambda1", 100.0))
    lambda2 = float(res.get("lambda2", 100.0))
    if model_kind == "pix2pix":
        lambda2 = 0.0
    ops = _parse_ops(res.get("augment"))
    cfg = TrainConfig(
        model_kind=model_kind,
        learning_rate=float(res.get("learning_rate", 0.0002)),
        beta1=float(res.get("beta1", 0.5)),
        beta2=float(res.get("beta2", 0.999)),
        batch_size=int(res.get("batch_size", 1)),
        epochs=int(res.get("epochs")) if res.get("epochs") is not None else None,
        weights=LossWeights(lambda1, lambda2),
        seed=int(res.get("seed", 0)),
        augmentation=ops if ops is not None else frozenset({"hflip", "rotate", "crop"}),
        checkpoint_every=int(res.get("checkpoint_every", 10)),
        resolution=resolution,
        gen_base_channels=int(res.get("gen_base_channels", 64)),
        disc_base_channels=int(res.get("disc_base_channels", 64)),
        disc_trunk_layers=int(res.get("disc_trunk_layers", 4)),
        patch_size=int(res.get("patch_size", 25)),
        patch_channels=int(res.get("patch_channels", 64)),
        patch_train_stride=int(res.get("patch_train_stride", 12)),
    )
    dataset = load_paired_dataset(manifest, resolution)
    split = load_split(split_path)
    run_meta = {
        "dataset_manifest": os.path.abspath(manifest),
        "dataset_manifest_sha256": manifest_hash(manifest),
        "split_file": os.path.abspath(split_path),
    }
    if getattr(args, "config", None):
        run_meta["config_file"] = os.path.abspath(args.config)
    model, history = train(model_kind, dataset, split, cfg, out_dir=out_dir, run_meta=run_meta)
    last = history[-1] if history else {}
    print(
        f"trained {model_kind} for {cfg.resolved_epochs} epochs "
        f"({len(history)} steps); final total_g={last.get('total_g', float('nan')):.4f}; "
        f"artifacts in {out_dir}"
    )
    return 0


def cmd_transform(args):
    res = Resolver(args, "transform")
    out_dir = res.require("out_dir")
    inputs = args.inputs
    if not inputs:
        raise ConfigError("no input images given")
    checkpoint = res.get("checkpoint")
    kind = res.get("model")
    if checkpoint is not None:
        model = TransformModel.from_checkpoint(checkpoint)
        resolution = model.resolution
    elif kind == "plain":
        model = TransformModel.plain()
        resolution = int(res.get("resolution", 256))
    else:
        raise ConfigError("need --checkpoint or --model plain")
    stochastic = bool(res.get("stochastic", False))
    seed = int(res.get("seed", 0))

    from .training import transform as run_transform

    os.makedirs(out_dir, exist_ok=True)
    for path in inputs:
        image, _ = _decode_image(path, "L", resolution)
        out = run_transform(model, image, stochastic=stochastic, seed=seed)
        stem = os.path.splitext(os.path.basename(path))[0]
        save_image(out, os.path.join(out_dir, stem + ".png"))
    print(f"wrote {len(inputs)} transformed image(s) to {out_dir}")
    return 0


def _build_models(specs):
    models = []
    for spec in specs:
        if spec == "plain":
            models.append(("plain", TransformModel.plain()))
            continue
        if "=" not in spec:
            raise ConfigError(
                f"model spec {spec!r} must be 'plain' or 'kind=checkpoint.ckpt'"
            )
        kind, path = spec.split("=", 1)
        model = TransformModel.from_checkpoint(path)
        if model.kind != kind:
            raise ConfigError(
                f"checkpoint {path} holds a {model.kind} model, not {kind}"
            )
        models.append((kind, model))
    return models


def _build_embedder(spec, command_text, resolution):
    if spec is None or spec == "toy":
        embedder = toy_embedder(resolution)
        if command_text:
            raise ConfigError("--embedder-cmd only applies to external embedders")
        return embedder
    command = shlex.split(command_text) if command_text else None
    if spec.startswith("file:"):
        return external_embedder(embedding_file=spec[len("file:") :], command=command)
    if spec.startswith("cmd:"):
        if command:
            raise ConfigError("give the command either as cmd:... or --embedder-cmd, not both")
        return external_embedder(command=shlex.split(spec[len("cmd:") :]))
    raise ConfigError(f"unknown embedder spec {spec!r} (expected toy, file:..., or cmd:...)")


def cmd_evaluate(args):
    res = Resolver(args, "evaluate")
    manifest = res.require("manifest")
    split_paths = res.require("splits")
    if isinstance(split_paths, str):
        split_paths = [split_paths]
    model_specs = res.require("models")
    if isinstance(model_specs, str):
        model_specs = [model_specs]
    out_dir = res.require("out_dir")
    protocol = res.get("protocol", "A")
    ks = _parse_ks(res.get("ks", "1,3,5,7"))
    seed = int(res.get("seed", 0))
    subject_min = bool(res.get("rank_per_subject", False))

    models = _build_models(model_specs)
    resolutions = {m.resolution for _, m in models if m.resolution is not None}
    if len(resolutions) > 1:
        raise ConfigError(f"checkpoints disagree on resolution: {sorted(resolutions)}")
    resolution = resolutions.pop() if resolutions else int(res.get("resolution", 256))

    dataset = load_paired_dataset(manifest, resolution)
    embedder = _build_embedder(res.get("embedder"), res.get("embedder_cmd"), resolution)

    os.makedirs(out_dir, exist_ok=True)
    written = []
    for split_path in split_paths:
        split = load_split(split_path)
        split_name = os.path.splitext(os.path.basename(split_path))[0]
        for method, model in models:
            record = evaluate_identification(
                dataset,
                split,
                model,
                embedder,
                protocol=protocol,
                ks=ks,
                gallery_seed=seed,
                subject_min=subject_min,
                split_name=split_name,
                method=method,
            )
            out_path = os.path.join(
                out_dir, f"{method}__{split_name}__{protocol}.metrics.json"
            )
            _json_dump(record, out_path)
            written.append(out_path)
            accs = ", ".join(f"rank{k}={100 * a:.1f}%" for k, a in record["accuracies"])
            print(f"{method} on {split_name} (protocol {protocol}): {accs}")
    print(f"wrote {len(written)} metrics file(s) to {out_dir}")
    return 0


def cmd_report(args):
    res = Resolver(args, "report")
    out_dir = res.require("out_dir")
    fmt = res.get("format", "csv")
    if fmt not in ("csv", "markdown"):
        raise ConfigError(f"unknown report format {fmt!r}")
    records = load_metrics(args.metrics)
    table = aggregate_rank_table(records)
    cmc = aggregate_cmc(records)

    os.makedirs(out_dir, exist_ok=True)
    if fmt == "csv":
        table_text = render_table_csv(table)
        table_path = os.path.join(out_dir, "rank_table.csv")
    else:
        table_text = render_table_markdown(table)
        table_path = os.path.join(out_dir, "rank_table.md")
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(table_text)
    cmc_path = os.path.join(out_dir, "cmc.csv")
    with open(cmc_path, "w", encoding="utf-8") as f:
        f.write(render_cmc_csv(cmc))
    sys.stdout.write(table_text)
    print(f"table: {table_path}\ncmc: {cmc_path}")

    grid_rows = res.get("grid_rows")
    if args.grid_col:
        if not grid_rows:
            raise ConfigError("--grid-col needs --grid-rows")
        columns = []
        for spec in args.grid_col:
            if "=" not in spec:
                raise ConfigError(f"grid column {spec!r} must be label=directory")
            label, directory = spec.split("=", 1)
            columns.append((label, directory))
        names = [n.strip() for n in str(grid_rows).split(",") if n.strip()]
        grid_out = os.path.join(out_dir, res.get("grid_out", "grid.png"))
        compose_image_grid(columns, names, grid_out)
        print(f"grid: {grid_out}")
    return 0


def cmd_toy_data(args):
    res = Resolver(args, "toy_data")
    out = res.require("out")
    subjects = int(res.get("subjects", 8))
    per_subject = int(res.get("per_subject", 10))
    resolution = int(res.get("resolution", 64))
    seed = int(res.get("seed", 0))
    samples = synthesize_toy_dataset(subjects, per_subject, resolution, seed)
    manifest = export_dataset(samples, out)
    print(f"toy dataset with {len(samples)} pairs written; manifest: {manifest}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = CliParser(prog="t2vface", description=__doc__)
    parser.add_argument("--config", help="JSON config file; flags override its values")
    # global positions of the shared flags; the per-command versions use
    # SUPPRESS defaults so they only override when given explicitly
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", dest="out_dir", default=None)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)
    sup = dict(default=argparse.SUPPRESS)

    p = sub.add_parser("prepare-data", help="write a train/test subject split")
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=["random", "attribute"])
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--attribute")
    p.add_argument("--seed", type=int, **sup)
    p.add_argument("--out")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train a transformation model")
    p.add_argument("--model", choices=["tvgan", "pix2pix", "patch", "plain"])
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--out-dir", dest="out_dir", **sup)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int, **sup)
    p.add_argument("--resolution", type=int)
    p.add_argument("--augment", help="comma list of hflip,rotate,crop or 'none'")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--gen-base-channels", dest="gen_base_channels", type=int)
    p.add_argument("--disc-base-channels", dest="disc_base_channels", type=int)
    p.add_argument("--disc-trunk-layers", dest="disc_trunk_layers", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--patch-channels", dest="patch_channels", type=int)
    p.add_argument("--patch-train-stride", dest="patch_train_stride", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transform", help="translate thermal images to visible")
    p.add_argument("inputs", nargs="*", metavar="IMAGE")
    p.add_argument("--checkpoint")
    p.add_argument("--model", choices=["plain"])
    p.add_argument("--out-dir", dest="out_dir", **sup)
    p.add_argument("--resolution", type=int)
    p.add_argument("--stochastic", action="store_const", const=True)
    p.add_argument("--seed", type=int, **sup)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("evaluate", help="rank-k identification for trained models")
    p.add_argument("--manifest")
    p.add_argument("--splits", nargs="+")
    p.add_argument(
        "--models",
        nargs="+",
        help="each entry 'plain' or 'kind=checkpoint.ckpt' (kind: tvgan/pix2pix/patch)",
    )
    p.add_argument("--protocol", choices=["A", "B"])
    p.add_argument("--embedder", help="toy | file:embeddings.jsonl | cmd:'prog args'")
    p.add_argument("--embedder-cmd", dest="embedder_cmd")
    p.add_argument("--ks")
    p.add_argument("--seed", type=int, **sup)
    p.add_argument("--resolution", type=int)
    p.add_argument("--rank-per-subject", dest="rank_per_subject", action="store_const", const=True)
    p.add_argument("--out-dir", dest="out_dir", **sup)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate metrics into tables and CMC data")
    p.add_argument("metrics", nargs="+", metavar="METRICS_JSON")
    p.add_argument("--format", choices=["csv", "markdown"])
    p.add_argument("--out-dir", dest="out_dir", **sup)
    p.add_argument("--grid-col", dest="grid_col", action="append", metavar="LABEL=DIR")
    p.add_argument("--grid-rows", dest="grid_rows", help="comma list of image file names")
    p.add_argument("--grid-out", dest="grid_out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("toy-data", help="materialize the synthetic paired dataset")
    p.add_argument("--subjects", type=int)
    p.add_argument("--per-subject", dest="per_subject", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--seed", type=int, **sup)
    p.add_argument("--out")
    p.set_defaults(func=cmd_toy_data)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (
        ConfigError,
        DatasetError,
        GalleryError,
        CheckpointError,
        EmbedderLookupError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, RuntimeError, ArithmeticError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
