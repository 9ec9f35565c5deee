"""Command-line entry point: ``hdlc <subcommand> ...``.

Exit codes: 0 success, 2 input or configuration error, 3 taxonomy error,
4 verification failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import collections
import logging
import sys
from pathlib import Path

import numpy as np

from . import crbm, dataio, hierarchy, taxonomy, training
from .errors import (ContainerError, HdlcError, InputError, ShapeError, TaxonomyError, TaxonomyParseError,
                     VerificationError)
from .tensor_core import network

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_TAXONOMY, EXIT_VERIFY = 0, 1, 2, 3, 4


def _exit_code(exc):
    if isinstance(exc, TaxonomyParseError):
        return EXIT_INPUT
    if isinstance(exc, TaxonomyError):
        return EXIT_TAXONOMY
    if isinstance(exc, VerificationError):
        return EXIT_VERIFY
    if isinstance(exc, (InputError, ShapeError, ContainerError, FileNotFoundError)):
        return EXIT_INPUT
    return EXIT_FAIL


# -- taxonomy -----------------------------------------------------------------------


def cmd_taxonomy_build(args):
    isa = taxonomy.read_isa_file(args.isa)
    synsets = taxonomy.read_synset_list(args.synsets)
    tree = taxonomy.build_htree(synsets, isa, args.iterations)
    taxonomy.save_tree(tree, args.out)
    print(f"nodes: {len(tree.nodes)}  roots: {len(tree.roots())}  depth: {tree.depth()}  "
          f"roll-up passes: {tree.iteration}")
    for w in tree.warnings:
        print(f"warning: {w}", file=sys.stderr)


def cmd_taxonomy_partition(args):
    tree = taxonomy.load_tree(args.tree)
    part = taxonomy.partition_leaves(tree, args.max_leaf, args.min_leaf)
    taxonomy.save_partition(part, args.out)
    sizes = [len(g) for g in part.leaves]
    print(f"groups: {len(sizes)}  synsets: {sum(sizes)}  min size: {min(sizes)}  max size: {max(sizes)}")
    for size, count in sorted(collections.Counter(sizes).items()):
        print(f"  size {size}: {count}")
    for w in part.warnings:
        print(f"warning: {w}", file=sys.stderr)


# -- training -----------------------------------------------------------------------


def _load_arrays(data_dir, geometry, split, fraction, seed):
    ds = dataio.load_dataset(data_dir, geometry, split, fraction, seed)
    return ds, ds.arrays()


def _regroup(ds, images, labels, partition_path, group):
    """Relabel a synset-per-class dataset for the root model or one leaf model.

    ``group`` is ``"root"`` (labels become RID - 1) or a RID (keep that group's
    synsets, labels become LID - 1). Returns ``(images, labels, class_names)``.
    """
    part = taxonomy.load_partition(partition_path)
    by_name = {str(s): s for s in part.gid_of}
    missing = [n for n in ds.class_names if n not in by_name]
    if missing:
        raise InputError(f"dataset classes not in partition: {missing[:5]}")
    synsets = [by_name[ds.class_names[l]] for l in labels]
    if group == "root":
        return images, np.array([part.rid_of[s] - 1 for s in synsets]), [f"rid{r}" for r in
                                                                          range(1, part.group_count + 1)]
    try:
        rid = int(group)
    except ValueError:
        raise InputError(f"--group must be 'root' or a RID, got {group!r}") from None
    if not 1 <= rid <= part.group_count:
        raise InputError(f"RID {rid} outside 1..{part.group_count}")
    keep = np.array([part.rid_of[s] == rid for s in synsets])
    if not keep.any():
        raise InputError(f"no images for RID {rid}")
    lids = np.array([part.lid_of[s] - 1 for s, k in zip(synsets, keep) if k])
    return images[keep], lids, [str(s) for s in part.leaves[rid - 1]]


def _training_arrays(args, geometry, fraction):
    ds, (images, labels) = _load_arrays(args.data, geometry, "train", fraction, args.seed)
    if args.partition:
        return _regroup(ds, images, labels, args.partition, args.group)
    if args.group:
        raise InputError("--group needs --partition")
    return images, labels, ds.class_names


def cmd_train(args):
    spec = network.load_spec(args.spec)
    recipe = training.load_recipe(args.recipe, epochs=args.epochs, lr=args.lr, momentum=args.momentum,
                                  batch_size=args.batch_size, seed=args.seed)
    images, labels, class_names = _training_arrays(args, spec.input_shape, args.split)
    if len(class_names) != spec.class_count:
        raise InputError(f"dataset has {len(class_names)} classes, spec expects {spec.class_count}")
    init = None
    if args.init:
        init = training.warm_start(spec, dataio.load_model(args.init), args.init_layers, recipe.seed)
    model, history = training.train_model(spec, (images, labels), recipe, init, log_path=args.log)
    model.meta["class_names"] = class_names
    dataio.save_model(model, args.out)
    last = history[-1]
    print(f"trained {len(history)} epochs: loss {last.mean_loss:.4f} top1 {last.top1:.3f} top5 {last.top5:.3f}")


def cmd_pretrain_crbm(args):
    geometry = (args.channels, args.height, args.width)
    images, _, _ = _training_arrays(args, geometry, args.split)
    cfg = crbm.Cd1Config(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                         momentum_switch_epoch=args.momentum_switch)
    state, history = crbm.train_crbm(images, (args.filters, args.kernel, args.kernel, args.pool_block), cfg,
                                     log_path=args.log)
    dataio.save_model(state, args.out)
    if args.export:
        crbm.export_filters(state, args.export)
    print(f"CD-1 {len(history)} epochs: recon mse {history[0].recon_mse:.5f} -> {history[-1].recon_mse:.5f}, "
          f"lr {history[-1].lr:.4g}")


def cmd_transfer(args):
    source = dataio.load_model(args.source)
    into = Path(args.into)
    if into.suffix == ".json":
        spec = network.load_spec(into)
        target = network.init_model(spec, np.random.default_rng(args.seed))
    else:
        target = dataio.load_model(into)
    if isinstance(target, crbm.CrbmState):
        raise InputError("transfer target must be a CNN model or spec")
    if isinstance(source, crbm.CrbmState):
        out = crbm.transfer_to_cnn(source, target, args.layer)
        moved = [out.meta["crbm_transfer"]]
    else:
        fresh = training.warm_start(target.spec, source, args.layers, args.seed)
        if into.suffix != ".json":
            for i in target.spec.param_layers():
                if i not in fresh.meta["transferred"]:
                    fresh.params[i] = [p.copy() for p in target.params[i]]
        out, moved = fresh, fresh.meta["transferred"]
    dataio.save_model(out, args.out)
    print(f"transferred layers {moved} -> {args.out}")


# -- hierarchy ----------------------------------------------------------------------


def cmd_classify(args):
    bundle = hierarchy.load_bundle(args.bundle)
    c, h, w = bundle.root.spec.input_shape
    img = dataio.resize(dataio.match_channels(dataio.read_image(args.image), c), h, w)
    top = hierarchy.classify_hierarchical(bundle, img, args.root_k, args.leaf_k, args.topk)
    synsets = bundle.partition.synsets()
    for rank, (gid, conf) in enumerate(top, start=1):
        print(f"{rank}\t{gid}\t{synsets[gid - 1]}\t{conf:.6f}")


def cmd_evaluate(args):
    bundle = hierarchy.load_bundle(args.bundle)
    ds = dataio.load_dataset(args.data, bundle.root.spec.input_shape, "train", 1.0, args.seed)
    images, labels = ds.arrays()
    gid_by_name = {str(s): g for s, g in bundle.partition.gid_of.items()}
    missing = [n for n in ds.class_names if n not in gid_by_name]
    if missing:
        raise InputError(f"dataset classes not in partition: {missing[:5]}")
    gids = [gid_by_name[ds.class_names[l]] for l in labels]
    report = hierarchy.evaluate_top5(bundle, [(g, None, img) for g, img in zip(gids, images)],
                                     args.root_k, args.leaf_k, 5, threads=args.threads)
    text = report.render()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)


def cmd_bundle(args):
    part = taxonomy.load_partition(args.partition)
    if len(args.leaf) != part.group_count:
        raise InputError(f"partition has {part.group_count} groups but {len(args.leaf)} leaf models were given")
    root = dataio.load_model(args.root)
    leaves = {rid: dataio.load_model(path) for rid, path in enumerate(args.leaf, start=1)}
    for m in [root, *leaves.values()]:
        if isinstance(m, crbm.CrbmState):
            raise InputError("bundle models must be CNNs")
    bundle = hierarchy.HierarchyBundle(root, leaves, part)
    path = hierarchy.save_bundle(bundle, args.out)
    print(f"wrote {path} with {part.group_count} leaf models")


# -- verification -------------------------------------------------------------------


def cmd_export_filters(args):
    source = dataio.load_model(args.model)
    canvas = crbm.export_filters(source, args.out, args.layer)
    print(f"wrote {args.out} ({canvas.shape[-1]}x{canvas.shape[-2]})")


def cmd_gradcheck(args):
    from . import gradcheck

    spec = network.load_spec(args.spec) if args.spec else gradcheck.toy_spec()
    results = gradcheck.check_spec(spec, args.seed, args.batch)
    for r in results:
        print(r.line(args.tol))
    bad = [r for r in results if not r.passed(args.tol)]
    if bad:
        w = gradcheck.worst(bad)
        raise VerificationError(f"gradient check failed: worst offender {w.name} rel err {w.worst:.3e}")


def cmd_synth_shapes(args):
    from . import synthetic

    images, labels, _ = synthetic.shape_dataset(args.per_class, args.size, args.seed)
    isa, leaves = synthetic.shape_taxonomy()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_dataset(out / "images", images, labels, [str(s) for s in leaves])
    (out / "isa.txt").write_text(taxonomy.serialize_isa_map(isa))
    (out / "synsets.txt").write_text("".join(f"{s}\n" for s in leaves))
    print(f"wrote {len(labels)} images in {len(leaves)} classes under {out}")


# -- parser -------------------------------------------------------------------------


def _group_args(s):
    s.add_argument("--partition", help="partition JSON; with --group, relabel the dataset by leaf group")
    s.add_argument("--group", help="'root' (labels are RIDs) or a RID (that group's synsets, labels are LIDs)")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for evaluation (default 1)")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="hdlc", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("taxonomy-build", parents=[common], help="build the rolled-up hierarchy tree")
    s.add_argument("--isa", required=True, help="ISA file of 'parent child' lines")
    s.add_argument("--synsets", required=True, help="file with one synset id per line")
    s.add_argument("--iterations", type=int, default=9, help="roll-up passes (default 9)")
    s.add_argument("--out", required=True, help="tree JSON output")
    s.set_defaults(func=cmd_taxonomy_build)

    s = sub.add_parser("taxonomy-partition", parents=[common], help="split a tree into leaf groups")
    s.add_argument("--tree", required=True)
    s.add_argument("--max-leaf", type=int, default=256)
    s.add_argument("--min-leaf", type=int, default=1)
    s.add_argument("--out", required=True, help="partition JSON output")
    s.set_defaults(func=cmd_taxonomy_partition)

    s = sub.add_parser("train", parents=[common], help="train a CNN with SGD + momentum")
    s.add_argument("--spec", required=True, help="network spec JSON")
    s.add_argument("--data", required=True, help="dataset root (<root>/<class>/<img>.pgm|ppm)")
    s.add_argument("--recipe", help="recipe JSON; flags below override it")
    s.add_argument("--init", help="model container to warm-start from")
    s.add_argument("--init-layers", type=int, help="number of parameterised layers to copy (default all)")
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="append 'epoch, mean_loss, top1, top5' lines here")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--momentum", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--split", type=float, default=1.0, help="fraction of each class used for training")
    _group_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("pretrain-crbm", parents=[common], help="train a first-layer CRBM with CD-1")
    s.add_argument("--data", required=True)
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--filters", type=int, default=8)
    s.add_argument("--kernel", type=int, default=5)
    s.add_argument("--pool-block", type=int, default=2)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--batch-size", type=int, default=10)
    s.add_argument("--momentum-switch", type=int, default=5, help="epoch at which momentum goes 0.5 -> 0.9")
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="append 'epoch, recon_mse, var_ratio_mean, lr' lines here")
    s.add_argument("--export", help="also write the filters as a PGM/PPM image")
    s.add_argument("--split", type=float, default=1.0, help="fraction of each class used for training")
    _group_args(s)
    s.set_defaults(func=cmd_pretrain_crbm)

    s = sub.add_parser("transfer", parents=[common], help="copy weights from a CRBM or CNN into a CNN")
    s.add_argument("--from", dest="source", required=True, help="source container (CRBM or CNN)")
    s.add_argument("--into", required=True, help="target CNN container or spec JSON")
    s.add_argument("--layers", type=int, help="CNN source: parameterised layers to copy (default all)")
    s.add_argument("--layer", type=int, help="CRBM source: target conv layer index (default first)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("bundle", parents=[common], help="assemble root and leaf models into a bundle directory")
    s.add_argument("--root", required=True, help="root model container")
    s.add_argument("--leaf", action="append", default=[], required=True,
                   help="leaf model container; repeat once per RID, in RID order")
    s.add_argument("--partition", required=True)
    s.add_argument("--out", required=True, help="bundle directory")
    s.set_defaults(func=cmd_bundle)

    s = sub.add_parser("classify", parents=[common], help="two-level top-k for one image")
    s.add_argument("--bundle", required=True, help="bundle.json or its directory")
    s.add_argument("--image", required=True)
    s.add_argument("--topk", type=int, default=5)
    s.add_argument("--root-k", type=int, default=5)
    s.add_argument("--leaf-k", type=int, default=5)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("evaluate", parents=[common], help="two-level top-5 error over a dataset")
    s.add_argument("--bundle", required=True)
    s.add_argument("--data", required=True, help="dataset root whose class directories are synset ids")
    s.add_argument("--out", help="write the report here as well")
    s.add_argument("--root-k", type=int, default=5)
    s.add_argument("--leaf-k", type=int, default=5)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-filters", parents=[common], help="write conv filters as a tiled image")
    s.add_argument("--model", required=True)
    s.add_argument("--layer", type=int, help="conv layer index (default first parameterised layer)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_filters)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a network spec")
    s.add_argument("--spec", help="spec JSON (default: built-in conv-relu-fc toy)")
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--tol", type=float, default=1e-3)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth-shapes", parents=[common], help="write the synthetic 16-class shape dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int, default=200)
    s.add_argument("--size", type=int, default=16)
    s.set_defaults(func=cmd_synth_shapes)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except HdlcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
