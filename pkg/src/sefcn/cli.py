"""``sefcn`` command-line interface.

Exit codes: 0 success, 2 configuration error (including a checkpoint that
does not fit the configured network), 3 I/O error, 4 training diverged.
"""
import argparse
import glob
import logging
import os
import re
import sys

from . import __version__
from .architectures import ConfigurationError, assemble_network, count_parameters
from .config import ConfigError, load_config
from .data import DataConfigError, DatasetError, generate_dataset, load_split_arrays, \
    read_manifest
from .losses import format_metrics_row, median_frequency_weights, metrics_header, \
    write_metrics_csv
from .pgm import write_pgm
from .se import SE_MODES, ChannelSE, SEConfigError
from .tensor import InvalidShapeError, TensorFormatError, read_tensor
from .trainer import TrainingDiverged, evaluate, load_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
COMMANDS = ("gen-data", "train", "eval", "count-params", "inspect-excitation")
CKPT_RE = re.compile(r"epoch_(\d+)\.ckpt$")

log = logging.getLogger("sefcn")


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def config_error(msg):
    return CommandError(msg, EXIT_CONFIG)


def io_error(msg):
    return CommandError(msg, EXIT_IO)


# -- helpers -----------------------------------------------------------------


def checkpoint_epoch(path):
    m = CKPT_RE.search(os.path.basename(path))
    return int(m.group(1)) if m else None


def list_checkpoints(path):
    """Checkpoint files of a run directory (or its ``checkpoints/``), by epoch."""
    root = os.path.join(path, "checkpoints") if os.path.isdir(
        os.path.join(path, "checkpoints")) else path
    found = [p for p in glob.glob(os.path.join(root, "epoch_*.ckpt")) if checkpoint_epoch(p) is not None]
    return sorted(found, key=checkpoint_epoch)


def resolve_checkpoints(path, latest_only):
    if path is None:
        raise config_error("--checkpoint is required")
    if os.path.isfile(path):
        return [path]
    if not os.path.isdir(path):
        raise io_error(f"checkpoint not found: {path}")
    found = list_checkpoints(path)
    if not found:
        raise io_error(f"no epoch_*.ckpt files under {path}")
    return found[-1:] if latest_only else found


def build_network(cfg):
    try:
        return assemble_network(cfg.network, seed=cfg.train.seed)
    except (ConfigurationError, SEConfigError) as e:
        raise config_error(str(e)) from e


def restore(network, path):
    try:
        load_checkpoint(network, path)
    except InvalidShapeError as e:
        raise config_error(f"checkpoint {path} does not match the network: {e}") from e
    except (OSError, TensorFormatError) as e:
        raise io_error(f"cannot read checkpoint {path}: {e}") from e
    return network


def load_splits(cfg, splits):
    path = cfg.data.manifest_path
    try:
        manifest = read_manifest(path)
        data = {s: load_split_arrays(path, s) for s in splits}
    except DatasetError as e:
        raise io_error(str(e)) from e
    if manifest["num_classes"] != cfg.network.num_classes:
        raise config_error(f"manifest has {manifest['num_classes']} classes but "
                           f"network.num_classes is {cfg.network.num_classes}")
    return data


def spatial_se(network, block_id):
    """The SE layer of ``block_id`` whose spatial map can be dumped."""
    try:
        blk = network.find_se(block_id)
    except KeyError:
        raise config_error(f"unknown block id {block_id!r}") from None
    if blk.se is None:
        raise config_error(f"block {block_id} has no SE block at position {network.spec.position}")
    if isinstance(blk.se, ChannelSE):
        raise config_error(f"block {block_id} is channel-only (cSE); no spatial map exists")
    return blk.se


def dump_excitation(network, image, block_ids, out_dir, tag):
    """Write the spatial excitation of every block in ``block_ids`` as PGM files."""
    layers = [(b, spatial_se(network, b)) for b in block_ids]
    network.forward(image[None], mode="eval")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for block_id, se in layers:
        path = os.path.join(out_dir, f"{block_id}_{tag}.pgm")
        write_pgm(path, se.scale[0, 0])
        paths.append(path)
    return paths


def epoch_tag(checkpoint):
    epoch = checkpoint_epoch(checkpoint)
    if epoch is None:
        return os.path.splitext(os.path.basename(checkpoint))[0]
    return f"epoch{epoch:03d}"


# -- commands ----------------------------------------------------------------


def cmd_gen_data(cfg, args):
    d = cfg.data
    try:
        path = generate_dataset(d.out_dir, d.seed, d.n_samples, d.height, d.width,
                                d.num_classes, d.profile, d.val_fraction, d.test_fraction)
    except DataConfigError as e:
        raise config_error(str(e)) from e
    print(f"wrote {d.n_samples} samples ({d.height}x{d.width}, {d.num_classes} classes, "
          f"{d.profile}) and {path}")
    return EXIT_OK


def cmd_train(cfg, args):
    data = load_splits(cfg, ("train", "val"))
    network = build_network(cfg)
    try:
        network.check_input_shape(data["train"][0].shape)
    except InvalidShapeError as e:
        raise config_error(str(e)) from e
    run_dir = cfg.output.run_dir
    on_epoch_end = None
    if cfg.inspect.enabled:
        for b in cfg.inspect.blocks:
            spatial_se(network, b)
        x_probe = (data["val"][0] if len(data["val"][0]) else data["train"][0])[0]
        out_dir = cfg.inspect.out_dir or os.path.join(run_dir, "excitation")
        wanted = set(cfg.inspect.epochs)

        def on_epoch_end(epoch, net):
            if not wanted or epoch in wanted:
                dump_excitation(net, x_probe, cfg.inspect.blocks, out_dir, f"epoch{epoch:03d}")

    try:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as f:
            f.write(cfg.dumps())
        history = train(network, data, cfg.train, run_dir=run_dir, on_epoch_end=on_epoch_end)
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    val = [r for r in history if r[1] == "val"] or history
    last = val[-1]
    print(f"trained {int(last[0]) + 1} epochs; last {last[1]} loss {float(last[3]):.4f} "
          f"global Dice {float(last[4]):.4f}; run directory {run_dir}")
    return EXIT_OK


def cmd_eval(cfg, args):
    ckpt = resolve_checkpoints(args.checkpoint or cfg.output.run_dir, latest_only=True)[0]
    network = restore(build_network(cfg), ckpt)
    data = load_splits(cfg, ("train", args.split))
    x, y = data[args.split]
    if not len(x):
        raise config_error(f"split {args.split!r} is empty")
    # the loss uses the training-split class weights, as during training
    y_train = data["train"][1]
    weights = median_frequency_weights(list(y_train if len(y_train) else y),
                                       cfg.network.num_classes)
    try:
        loss, per_class = evaluate(network, x, y, weights, lam=cfg.train.lam)
    except InvalidShapeError as e:
        raise config_error(str(e)) from e
    epoch = checkpoint_epoch(ckpt)
    row = format_metrics_row(-1 if epoch is None else epoch, args.split, float("nan"), loss,
                             per_class)
    out = args.output or os.path.join(cfg.output.run_dir, f"eval_{args.split}.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    write_metrics_csv(out, [row], cfg.network.num_classes)
    for name, value in zip(metrics_header(cfg.network.num_classes)[3:], row[3:]):
        print(f"{name:>12} {float(value):.4f}")
    print(f"checkpoint {ckpt}; wrote {out}")
    return EXIT_OK


def param_report(spec):
    """``{mode: ParameterCount}`` for every SE mode on ``spec``'s architecture."""
    d = spec.to_dict()
    out = {}
    for mode in SE_MODES:
        d["se"] = dict(d["se"], mode=mode)
        out[mode] = count_parameters(assemble_network(type(spec).from_dict(d)))
    return out


def cmd_count_params(cfg, args):
    spec = cfg.network
    try:
        report = param_report(spec)
    except (ConfigurationError, SEConfigError) as e:
        raise config_error(str(e)) from e
    print(f"family={spec.family} depth={spec.depth} channels={spec.channels} "
          f"position={spec.position} r={spec.se.r} aggregation={spec.se.aggregation} "
          f"skip_config={spec.skip_config}")
    print(f"{'mode':<6} {'total':>10} {'se_added':>9} {'percent':>8}")
    for mode, pc in report.items():
        print(f"{mode:<6} {pc.total:>10d} {pc.se_total:>+9d} {pc.percentage:>7.3f}%")
    print(f"\nper block ({spec.se.mode}):")
    print(f"{'block':<12} {'in':>5} {'out':>5} {'params':>10} {'se':>7}")
    for row in report[spec.se.mode].per_block:
        print(f"{row['block']:<12} {row['in_channels']:>5} {row['out_channels']:>5} "
              f"{row['params']:>10d} {row['se_params']:>7d}")
    return EXIT_OK


def cmd_inspect_excitation(cfg, args):
    network = build_network(cfg)
    blocks = cfg.inspect.blocks
    for b in blocks:
        spatial_se(network, b)
    checkpoints = resolve_checkpoints(args.checkpoint or cfg.output.run_dir, latest_only=False)
    if cfg.inspect.epochs:
        wanted = set(cfg.inspect.epochs)
        checkpoints = [c for c in checkpoints if checkpoint_epoch(c) in wanted]
        if not checkpoints:
            raise io_error(f"no checkpoints for epochs {sorted(wanted)}")
    if args.sample:
        try:
            image = read_tensor(args.sample)
        except (OSError, TensorFormatError) as e:
            raise io_error(f"cannot read sample {args.sample}: {e}") from e
        if image.ndim == 2:
            image = image[None]
    else:
        x = load_splits(cfg, ("test",))["test"][0]
        if not len(x):
            raise config_error("no --sample given and the test split is empty")
        image = x[0]
    try:
        network.check_input_shape((1,) + image.shape)
    except InvalidShapeError as e:
        raise config_error(str(e)) from e
    out_dir = cfg.inspect.out_dir or os.path.join(cfg.output.run_dir, "excitation")
    n = 0
    for ckpt in checkpoints:
        restore(network, ckpt)
        n += len(dump_excitation(network, image, blocks, out_dir, epoch_tag(ckpt)))
    print(f"wrote {n} excitation maps to {out_dir}")
    return EXIT_OK


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "count-params": cmd_count_params, "inspect-excitation": cmd_inspect_excitation}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sefcn", description="Squeeze & excitation segmentation networks in numpy.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {"gen-data": "write a synthetic corpus", "train": "train a network",
             "eval": "Dice of a checkpoint on one split",
             "count-params": "parameter audit for every SE mode",
             "inspect-excitation": "dump spatial excitation maps as PGM"}
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON run config; defaults apply to missing keys")
        p.add_argument("--print-config", action="store_true",
                       help="print the resolved config and exit")
        p.add_argument("--seed", type=int, help="override train and data seeds (beats $SEFCN_SEED and the file)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "inspect-excitation"):
            p.add_argument("--checkpoint",
                           help="checkpoint file or run directory (default: output.run_dir)")
        if name == "eval":
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
            p.add_argument("--output", help="metrics CSV path (default: <run_dir>/eval_<split>.csv)")
        if name == "inspect-excitation":
            p.add_argument("--sample", help=".tns image (default: first test sample)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return EXIT_IO
    if args.print_config:
        sys.stdout.write(cfg.dumps())
        return EXIT_OK
    try:
        return HANDLERS[args.command](cfg, args)
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
