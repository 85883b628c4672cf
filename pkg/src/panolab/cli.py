"""Command-line surface.

Subcommands: gradcheck, synth, train, eval, ablate, fuse, viz-attention.
Model, loss and training options live in a flat key=value config file; every
key is also exposed as a CLI flag of the same name, and flags win over the
file. Exit status is nonzero whenever a check fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .fusion import InstancePrediction, fuse
from .metrics import render_report, write_report_kv
from .model import Model, ModelConfig
from .panoptic import Categories, CategoryMeta, load_relations
from .panoptic_io import (
    default_categories,
    encode_panoptic,
    render_heatmap,
    save_png,
    write_dataset,
)
from .train import (
    LossWeights,
    TrainConfig,
    evaluate,
    make_split,
    render_ablation,
    run_ablation,
    train,
)

FUSION_DEFAULTS = {"keep_fraction": 0.5, "stuff_area_min": 64,
                   "mask_threshold": 0.5}


def read_config_file(path):
    """Flat `key = value` document; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value, got "
                                 f"{raw.strip()!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


def _coerce(text, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(type(like[0])(v) for v in text.split(","))
    return text


# one flat namespace; `seed` appears in both model and train configs and is
# resolved to the training seed, which cmd_train copies onto the model
_CONFIG_FIELDS = {}
for _cls, _group in ((ModelConfig, "model"), (TrainConfig, "train"),
                     (LossWeights, "loss")):
    _defaults = _cls()
    for _f in dataclasses.fields(_cls):
        _CONFIG_FIELDS[_f.name] = (_group, getattr(_defaults, _f.name))
for _k, _v in FUSION_DEFAULTS.items():
    _CONFIG_FIELDS[_k] = ("fusion", _v)


def add_config_flags(parser):
    parser.add_argument("--config", help="flat key=value config file")
    for name, (_, default) in sorted(_CONFIG_FIELDS.items()):
        flag = "--" + name.replace("_", "-")
        parser.add_argument(flag, dest=f"cfg_{name}", default=None,
                            metavar="V", help=f"{name} (default {default})")


def resolve_config(args):
    """Defaults <- config file <- CLI flags; returns the four config objects."""
    merged = {}
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for name in _CONFIG_FIELDS:
        v = getattr(args, f"cfg_{name}", None)
        if v is not None:
            merged[name] = v
    groups = {"model": {}, "train": {}, "loss": {}, "fusion": {}}
    for key, text in merged.items():
        if key not in _CONFIG_FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        group, default = _CONFIG_FIELDS[key]
        groups[group][key] = _coerce(str(text), default)
    model_cfg = ModelConfig(**groups["model"])
    train_cfg = TrainConfig(**groups["train"])
    weights = LossWeights(**{k: float(v) for k, v in groups["loss"].items()})
    fusion = {**FUSION_DEFAULTS, **groups["fusion"]}
    return model_cfg, train_cfg, weights, fusion


def _load_categories(path):
    if path is None:
        return default_categories()
    with open(path) as fh:
        doc = json.load(fh)
    return Categories([CategoryMeta(c["id"], c["name"], bool(c["isthing"]))
                       for c in doc])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gradcheck(args):
    from .gradsuite import full_model_check, operator_suite, render_suite

    entries = operator_suite(tolerance=args.tolerance)
    if not args.ops_only:
        entry, _ = full_model_check(tolerance=args.model_tolerance)
        entries.append(entry)
    print(render_suite(entries))
    failed = [e for e in entries if not e.ok]
    if failed:
        print(f"{len(failed)} check(s) FAILED")
        return 2
    print("all gradient checks passed")
    return 0


def cmd_synth(args):
    scenes = make_split(args.count, base_seed=args.seed, size=args.size)
    cats = default_categories()
    out = write_dataset(args.out, scenes, cats, split=args.split)
    print(f"wrote {args.count} scenes to {out}")
    return 0


def cmd_train(args):
    model_cfg, train_cfg, weights, fusion = resolve_config(args)
    model_cfg.seed = train_cfg.seed
    cats = _load_categories(args.categories)
    if args.relations:
        load_relations(args.relations, cats)

    if not args.skip_gradcheck:
        # gate every training run on the construction-scale gradient check
        from .gradsuite import full_model_check
        entry, _ = full_model_check(tolerance=1e-4, max_coords=2)
        print(f"full-model gradient gate: max rel err "
              f"{entry.max_rel_error:.2e} ({entry.seconds:.1f}s)")
        if not entry.ok:
            print("gradient gate FAILED; refusing to train", file=sys.stderr)
            return 2

    train_scenes = make_split(args.train_scenes, base_seed=10_000,
                              size=model_cfg.image_size)
    eval_scenes = make_split(args.eval_scenes, base_seed=90_000,
                             size=model_cfg.image_size)
    model = Model(model_cfg)

    def progress(rec):
        if rec.eval_pq is not None:
            print(f"step {rec.step + 1}: loss {rec.loss:.4f} "
                  f"eval PQ {rec.eval_pq:.4f}")
        elif (rec.step + 1) % 100 == 0:
            print(f"step {rec.step + 1}: loss {rec.loss:.4f} lr {rec.lr:g}")

    train(model, train_scenes, cats, train_cfg, weights=weights,
          eval_scenes=eval_scenes, fusion_kwargs=fusion, progress=progress)
    model.save(args.out)
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_eval(args):
    model_cfg, train_cfg, weights, fusion = resolve_config(args)
    cats = _load_categories(args.categories)
    if args.relations:
        load_relations(args.relations, cats)
    model = Model.load(args.checkpoint)
    scenes = make_split(args.eval_scenes, base_seed=90_000,
                        size=model.cfg.image_size)
    report = evaluate(model, scenes, cats, **fusion)
    print(render_report(report, cats))
    if args.report:
        write_report_kv(report, args.report)
        print(f"wrote {args.report}")
    return 0


def cmd_ablate(args):
    model_cfg, train_cfg, weights, fusion = resolve_config(args)
    cats = _load_categories(args.categories)
    train_scenes = make_split(args.train_scenes, base_seed=10_000,
                              size=model_cfg.image_size)
    eval_scenes = make_split(args.eval_scenes, base_seed=90_000,
                             size=model_cfg.image_size)
    seeds = tuple(int(s) for s in args.seeds.split(","))

    def progress(name, seed, pq):
        print(f"  {name} seed {seed}: PQ {pq:.4f}")

    rows = run_ablation(train_scenes, eval_scenes, cats, model_cfg, train_cfg,
                        seeds=seeds, weights=weights, progress=progress)
    print(render_ablation(rows))
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(render_ablation(rows) + "\n")
    return 0


def cmd_fuse(args):
    _, _, _, fusion = resolve_config(args)
    cats = _load_categories(args.categories)
    if args.relations:
        load_relations(args.relations, cats)
    blob = np.load(args.instances)
    semantic = np.load(args.semantic)
    instances = [
        InstancePrediction(mask=blob["masks"][i],
                           class_id=int(blob["class_ids"][i]),
                           score=float(blob["scores"][i]))
        for i in range(len(blob["scores"]))
    ]
    pmap = fuse(instances, semantic, cats, **fusion)
    id_img, records = encode_panoptic(pmap)
    save_png(id_img, args.out + ".png")
    with open(args.out + ".json", "w") as fh:
        json.dump({"segments_info": records}, fh, indent=2)
    print(f"wrote {args.out}.png and {args.out}.json "
          f"({len(records)} segments)")
    return 0


def cmd_viz_attention(args):
    model = Model.load(args.checkpoint)
    if not (model.cfg.pam or model.cfg.mam):
        print("model has no attention modules enabled", file=sys.stderr)
        return 2
    scenes = make_split(1, base_seed=args.scene_seed,
                        size=model.cfg.image_size)
    from .train import predict_scene
    cats = _load_categories(args.categories)
    _, _, outputs = predict_scene(model, scenes[0], cats)
    os.makedirs(args.out_dir, exist_ok=True)
    wrote = []
    for tag, maps in (("pam", outputs.pam_maps), ("mam", outputs.mam_maps)):
        for lvl, arr in maps.items():
            path = os.path.join(args.out_dir, f"{tag}_level{lvl}.png")
            save_png(render_heatmap(arr), path)
            wrote.append(path)
    print("wrote " + ", ".join(wrote) if wrote else "no attention maps")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="panolab",
        description="desk-scale panoptic segmentation lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference operator suite")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--model-tolerance", type=float, default=1e-4)
    p.add_argument("--ops-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset split")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=10_000)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on the synthetic split")
    add_config_flags(p)
    p.add_argument("--out", default="model.npz")
    p.add_argument("--train-scenes", type=int, default=200)
    p.add_argument("--eval-scenes", type=int, default=50)
    p.add_argument("--categories")
    p.add_argument("--relations")
    p.add_argument("--skip-gradcheck", action="store_true",
                   help="skip the construction-scale gradient gate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-scenes", type=int, default=50)
    p.add_argument("--categories")
    p.add_argument("--relations")
    p.add_argument("--report", help="write key=value metrics here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate the flag grid")
    add_config_flags(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--train-scenes", type=int, default=200)
    p.add_argument("--eval-scenes", type=int, default=50)
    p.add_argument("--categories")
    p.add_argument("--report")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("fuse", help="fuse instance + semantic files")
    add_config_flags(p)
    p.add_argument("--instances", required=True,
                   help=".npz with masks, class_ids, scores")
    p.add_argument("--semantic", required=True, help=".npy category map")
    p.add_argument("--categories")
    p.add_argument("--relations")
    p.add_argument("--out", default="panoptic")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("viz-attention", help="dump attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-seed", type=int, default=90_000)
    p.add_argument("--out-dir", default="attention")
    p.add_argument("--categories")
    p.set_defaults(func=cmd_viz_attention)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
