"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, checkpoint_load
from .data import (
    ImageFormatError,
    load_image_dir,
    read_image,
    resize_bilinear,
    save_image_dir,
    stratified_split,
    synth_generate,
    evaluate_oa,
)
from .dccnn import ConfigError
from .mil import export_attention_map
from .runner import (
    RunConfig,
    check_dataset,
    fit,
    gradcheck_profile,
    build_network,
    load_run_config,
    network_from_config,
    parse_run_config,
    run_protocol,
    save_run,
)
from .tensor import Tensor, no_grad
from .training import gradcheck, write_history_csv

log = logging.getLogger("midccnn")


class UsageError(Exception):
    pass


def _prepare_out(out: Path, force: bool = False) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    data = args.data or cfg.data.path
    if not data:
        raise UsageError("no dataset given (--data or data.path in the config)")
    cfg.data.path = str(data)
    return cfg, Path(data)


def cmd_synth(args) -> int:
    out = _prepare_out(Path(args.out), args.force)
    ds = synth_generate(args.classes, args.per_class, args.size, args.seed)
    n = save_image_dir(ds, out)
    print(f"wrote {n} images in {ds.num_classes} classes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg, data = _resolve(args)
    ds = load_image_dir(data, cfg.model.input_size)
    check_dataset(cfg, ds)
    out = _prepare_out(Path(args.out), args.force)
    (out / "resolved_config.json").write_text(cfg.to_json())
    train_ds, test_ds = stratified_split(ds, cfg.data.train_ratio, cfg.data.split_seed)
    net, state, history = fit(cfg, train_ds)
    write_history_csv(history, out / "history.csv")
    save_run(out / "model.midc", cfg, net, state)
    oa, cm = evaluate_oa(net, test_ds)
    (out / "report.json").write_text(json.dumps({"oa": oa, "confusion": cm.tolist()}, indent=2) + "\n")
    print(f"trained {len(history)} epochs; test OA {oa:.2f}%")
    return 0


def _load_checkpoint(path):
    config, _, _ = checkpoint_load(path)
    net = network_from_config(config)
    checkpoint_load(path, net)
    net.eval()
    return net, config


def cmd_eval(args) -> int:
    net, config = _load_checkpoint(args.checkpoint)
    cfg = parse_run_config(config["run"])
    ds = load_image_dir(args.data, cfg.model.input_size)
    check_dataset(cfg, ds)
    if args.split == "test":
        _, ds = stratified_split(ds, cfg.data.train_ratio, cfg.data.split_seed)
    oa, cm = evaluate_oa(net, ds)
    print(f"OA {oa:.2f}% on {len(ds)} images")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("confusion.json")
    out.write_text(json.dumps({"oa": oa, "confusion": cm.tolist()}, indent=2) + "\n")
    return 0


def cmd_protocol(args) -> int:
    cfg, data = _resolve(args)
    if args.reps is not None:
        cfg.data.repetitions = args.reps
    ds = load_image_dir(data, cfg.model.input_size)
    check_dataset(cfg, ds)
    out = _prepare_out(Path(args.out), args.force)
    (out / "resolved_config.json").write_text(cfg.to_json())
    result = run_protocol(cfg, ds)
    write_history_csv(result.history, out / "history.csv")
    save_run(out / "model.midc", cfg, result.net, result.adam, result.rep)
    (out / "report.json").write_text(result.report.to_json())
    r = result.report
    print(f"OA over {len(r.per_rep_oa)} repetitions: {r.mean_oa:.2f} +- {r.std_oa:.2f}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.profile == "custom" and not args.config:
        raise UsageError("--profile custom needs --config")
    cfg = gradcheck_profile() if args.profile == "desk" else load_run_config(args.config)
    cfg.train.dropout = 0.0
    net = build_network(cfg)
    rng = np.random.default_rng(args.seed)
    size = cfg.model.input_size
    images = rng.random((2, 3, size, size))
    labels = rng.integers(0, cfg.model.num_classes, size=2)
    report = gradcheck(net, images, labels, tolerance=args.tolerance, n_coords=args.coords, seed=args.seed)
    print(report.summary())
    for name, idx, a, n in report.failures[:20]:
        print(f"  {name}{list(idx)}: analytic {a:.6e} numeric {n:.6e}")
    return 0 if report.passed else 1


def cmd_attention(args) -> int:
    net, config = _load_checkpoint(args.checkpoint)
    if net.method != "attention":
        raise UsageError(f"checkpoint uses {net.method!r} pooling; attention maps need the attention method")
    size = net.model_cfg.input_size
    img = resize_bilinear(read_image(args.image), size)
    with no_grad():
        pred = net.predict(Tensor(img[None]))
    csv_path, pgm_path = export_attention_map(pred, Path(args.out), size)
    grid = pred.attention_weights.data[0]
    i, j = np.unravel_index(int(np.argmax(grid)), grid.shape)
    print(f"wrote {csv_path} and {pgm_path}; peak cell ({i}, {j}), class {int(np.argmax(pred.p_bag.data[0]))}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="midccnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic localized-glyph dataset")
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_synth)

    for name, fn, helptext in (
        ("train", cmd_train, "train once and write checkpoint + history"),
        ("protocol", cmd_protocol, "repeated split/train/evaluate, reports mean +- std OA"),
    ):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config")
        t.add_argument("--data")
        t.add_argument("--out", required=True)
        t.add_argument("--force", action="store_true")
        if name == "protocol":
            t.add_argument("--reps", type=int)
        t.set_defaults(fn=fn)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("test", "all"), default="test")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of all parameter gradients")
    g.add_argument("--profile", choices=("desk", "custom"), default="desk")
    g.add_argument("--config")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--coords", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("attention", help="export the attention map of one image")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--image", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_attention)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except (UsageError, CheckpointError, ImageFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
