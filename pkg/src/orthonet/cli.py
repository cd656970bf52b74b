"""Command-line driver: ``orthonet {train,eval,probe,corrupt-eval} CONFIG``.

Extra ``--section.key=value`` arguments override the config file; the last
occurrence wins.  The output directory is ``[output] dir`` unless the
``ORTHONET_OUTPUT_DIR`` environment variable is set.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, spec_to_dict
from .config import load_config, resolve_layers, serialize_config
from .data import load_cifar10_bin, load_mnist, synth_blobs
from .errors import OrthoNetError
from .network import build_network
from .probe import isometry_ratio_stats, layer_spectra, local_region_radius, radius_context
from .train import Trainer, corruption_table, evaluate, steps_per_epoch, write_jsonl

LATEST = "latest.onet"


def load_data(cfg):
    d = cfg.data
    if d["dataset"] == "blobs":
        args = (d["classes"], d["dim"], d["per_class"], d["separation"], d["seed"])
        train, test = synth_blobs(*args), synth_blobs(*args, split="test")
    elif d["dataset"] == "mnist":
        train, test = load_mnist(d["path"], "train"), load_mnist(d["path"], "test")
    else:
        root = Path(d["path"])
        if root.is_dir():
            train = load_cifar10_bin(sorted(root.glob("data_batch_*.bin")), "train")
            test = load_cifar10_bin(root / "test_batch.bin", "test")
        else:
            train = test = load_cifar10_bin(root)
    if d["subset"]:
        train = train.subset(d["subset"], d["seed"])
    if d["test_subset"]:
        test = test.subset(d["test_subset"], d["seed"])
    return train, test


def build_from_config(cfg, data):
    shape = tuple(cfg.model["input_shape"] or data.input_shape)
    layers = resolve_layers(cfg.layers, shape)
    return build_network(layers, shape, seed=cfg.model["seed"])


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _checkpoint_path(cfg, given):
    return Path(given) if given else Path(cfg.output_dir) / LATEST


def cmd_train(cfg, args):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_data(cfg)
    net, params = build_from_config(cfg, train)
    tcfg = cfg.train_config(steps_per_epoch(len(train), cfg.train["batch_size"]))
    metrics_path = out / "metrics.jsonl"
    config_text = serialize_config(cfg)

    def save(trainer, name):
        ckpt = Checkpoint(trainer.net, trainer.params, trainer.momentum, trainer.step,
                          trainer.epoch, trainer.rng.bit_generator.state,
                          {"config": config_text, "metrics": trainer.metrics})
        save_checkpoint(out / name, ckpt)

    def on_epoch(trainer):
        save(trainer, f"checkpoint-e{trainer.epoch:04d}.onet")
        save(trainer, LATEST)

    def on_record(rec):
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")

    trainer = Trainer(net, params, train, test, tcfg, on_epoch=on_epoch, on_record=on_record)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if spec_to_dict(ckpt.net) != spec_to_dict(net):
            raise OrthoNetError("checkpoint network does not match the configured model")
        trainer.params = ckpt.params
        trainer.restore(ckpt.momentum, {"step": ckpt.step, "epoch": ckpt.epoch,
                                        "rng": ckpt.rng_state,
                                        "metrics": ckpt.extra.get("metrics", [])})
    write_jsonl(metrics_path, trainer.metrics)
    trainer.run()
    save(trainer, LATEST)
    final = trainer.metrics[-1]
    _write_json(out / "summary.json", {
        "epochs": trainer.epoch,
        "steps": trainer.step,
        "train_error": final["train_error"],
        "test_error": final["test_error"],
        "train_loss": final["train_loss"],
    })
    print(f"trained {trainer.epoch} epochs ({trainer.step} steps): "
          f"test error {final['test_error']:.2f}%")
    return 0


def _load_model(cfg, args):
    ckpt = load_checkpoint(_checkpoint_path(cfg, args.checkpoint))
    return ckpt.net, ckpt.params


def cmd_eval(cfg, args):
    net, params = _load_model(cfg, args)
    train, test = load_data(cfg)
    doc = {"test_error": evaluate(net, params, test), "train_error": evaluate(net, params, train)}
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", doc)
    print(f"test error: {doc['test_error']:.4f}%")
    return 0


def _pairs(kind, data, count, rng, noise):
    x, y = data.inputs, data.labels
    pairs = []
    while len(pairs) < count:
        i = int(rng.integers(len(data)))
        if kind == "noise":
            pairs.append((x[i], x[i] + noise * rng.standard_normal(x.shape[1])))
            continue
        j = int(rng.integers(len(data)))
        if i != j and (y[i] == y[j]) == (kind == "same_class"):
            pairs.append((x[i], x[j]))
    return pairs


def cmd_probe(cfg, args):
    net, params = _load_model(cfg, args)
    _, test = load_data(cfg)
    p = cfg.probe
    rng = np.random.default_rng(p["seed"])
    doc = {}
    if p["spectra"]:
        rep = layer_spectra(net, params)
        doc["spectra"] = rep.as_dict()
        print(f"prod sigma_max = {rep.prod_sigma_max:.6f}, prod sigma_min = {rep.prod_sigma_min:.6f}")
    if p["radius"]:
        anchors = test.inputs[rng.choice(len(test), min(p["anchors"], len(test)), replace=False)]
        context = radius_context(net, params)
        radii = [local_region_radius(net, params, a, context) for a in anchors]
        doc["radius"] = {"per_anchor": radii, "min": min(radii)}
    if p["isometry"]:
        doc["isometry"] = {
            kind: isometry_ratio_stats(net, params, _pairs(kind, test, p["pairs"], rng, p["noise"]),
                                       check_sandwich=False).as_dict()
            for kind in ("same_class", "cross_class", "noise")
        }
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "probe.json", doc)
    return 0


def cmd_corrupt_eval(cfg, args):
    net, params = _load_model(cfg, args)
    _, test = load_data(cfg)
    if len(test.input_shape) != 3:
        raise OrthoNetError("corrupt-eval needs an image dataset")
    table = corruption_table(net, params, test, seed=cfg.data["seed"])
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "corrupt_eval.json", table)
    print(f"clean: {table['clean']:.2f}%")
    for kind, row in table.items():
        if kind != "clean":
            print(f"{kind:>15}: " + "  ".join(f"{row[s]:6.2f}" for s in sorted(row)))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "corrupt-eval": cmd_corrupt_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="orthonet", description="Orthogonality-constrained training")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="TOML run configuration")
        if name == "train":
            sp.add_argument("--resume", help="checkpoint to continue from")
        else:
            sp.add_argument("--checkpoint", help="checkpoint to load (default: output/latest.onet)")
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = []
    for item in extra:
        name = item.split("=", 1)[0]
        if not item.startswith("--") or "=" not in item or "." not in name:
            parser.error(f"unrecognized argument {item!r} (overrides look like --section.key=value)")
        overrides.append(item[2:])
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (OrthoNetError, ValueError, OSError, KeyError) as exc:
        print(f"orthonet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
