"""
Command-line entry point wiring all stages, see ``EndoAct --help``.

Exit codes: 0 on success, 1 on malformed input (with a one-line cause on stderr),
2 on invariant violations (frozen-parameter drift, divergence).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import textwrap

import yaml

from .. import config as cfg
from .. import geotrans
from .. import plot
from .. import policy
from .. import scenegen
from .. import simrobot
from .. import version


class BlankLinesHelpFormatter(argparse.RawTextHelpFormatter, argparse.ArgumentDefaultsHelpFormatter):
    def _split_lines(self, text, width):
        return super()._split_lines(text, width) + [""]


class Parser(argparse.ArgumentParser):
    """
    Report malformed arguments as :py:class:`ValueError` (exit code 1).
    """

    def error(self, message):
        raise ValueError(message)


def _add_common(parser: argparse.ArgumentParser, out: str = "Output directory."):
    parser.add_argument("-c", "--config", type=str, help="Run configuration (YAML).")
    parser.add_argument("-o", "--out", type=str, required=True, help=out)
    parser.add_argument("--seed", type=int, help="Master seed (overrides the configuration).")
    parser.add_argument("-f", "--force", action="store_true", help="Overwrite without prompting.")
    parser.add_argument("-s", "--silent", action="store_true", help="Run without status bars.")


def _EndoAct_parser() -> argparse.ArgumentParser:
    """
    Return parser for :py:func:`main`.
    """

    parser = Parser(
        prog="EndoAct",
        formatter_class=BlankLinesHelpFormatter,
        description=textwrap.dedent(
            """\
            Endoscope-centric visuomotor policy learning:

            1.  Generate synthetic stereo data with exact point maps (gen-data).
            2.  Train the geometry transformer (train-geo), optionally on pseudo-labels (pseudo-label).
            3.  Record expert demonstrations in the simulator (collect-demos).
            4.  Train connector and policy on top of the frozen geometry transformer (train-policy).
            5.  Evaluate in closed loop (eval), time inference (bench),
                export reconstructions (export-ply), plot metrics (plot).
            """
        ),
    )

    parser.add_argument("-v", "--version", action="version", version=version)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", formatter_class=BlankLinesHelpFormatter, help="Generate a dataset.")
    _add_common(p)
    p.add_argument("-n", "--num", type=int, required=True, help="Number of samples.")
    p.add_argument("--start", type=int, default=0, help="Index of the first sample.")

    p = sub.add_parser("train-geo", formatter_class=BlankLinesHelpFormatter, help="Train the geometry transformer.")
    _add_common(p)
    p.add_argument("--data", type=str, action="append", required=True, help="Dataset directory (repeatable).")
    p.add_argument("--held-out", type=str, help="Dataset directory evaluated after every epoch.")
    p.add_argument("--epochs", type=int, help="Number of epochs (overrides the configuration).")
    p.add_argument("--device", type=str, help="Device (overrides the configuration).")
    p.add_argument("--deterministic", action="store_true", default=None, help="Deterministic algorithms only.")

    p = sub.add_parser("pseudo-label", formatter_class=BlankLinesHelpFormatter, help="Pseudo-label a dataset.")
    _add_common(p)
    p.add_argument("--geo-ckpt", type=str, required=True, help="Geometry checkpoint.")
    p.add_argument("--in", dest="source", type=str, required=True, help="Dataset directory (labels are ignored).")
    p.add_argument("--conf-threshold", type=float, required=True, help="Minimal retained confidence (>= 1).")

    p = sub.add_parser("collect-demos", formatter_class=BlankLinesHelpFormatter, help="Record expert demonstrations.")
    _add_common(p)
    p.add_argument("--task", type=str, required=True, choices=simrobot.TASKS, help="Task.")
    p.add_argument("-n", "--num", type=int, help="Number of demonstrations (all in the train region).")
    p.add_argument("--region-split", type=str, help='Demonstrations per region, e.g. "train=120,wide=60".')

    p = sub.add_parser("train-policy", formatter_class=BlankLinesHelpFormatter, help="Train connector and policy.")
    _add_common(p)
    p.add_argument("--demos", type=str, action="append", required=True, help="Demonstration directory (repeatable).")
    p.add_argument("--geo-ckpt", type=str, required=True, help="Geometry checkpoint (frozen).")
    p.add_argument("--connector", type=str, choices=("msfc", "lfc", "msc"), help="Connector variant.")
    p.add_argument("--epochs", type=int, help="Number of epochs (overrides the configuration).")
    p.add_argument("--device", type=str, help="Device (overrides the configuration).")
    p.add_argument("--deterministic", action="store_true", default=None, help="Deterministic algorithms only.")

    p = sub.add_parser("eval", formatter_class=BlankLinesHelpFormatter, help="Closed-loop evaluation.")
    _add_common(p)
    p.add_argument("--policy-ckpt", type=str, help="Policy checkpoint.")
    p.add_argument("--geo-ckpt", type=str, help="Geometry checkpoint.")
    p.add_argument("--expert", action="store_true", help="Evaluate the scripted expert.")
    p.add_argument("--random", action="store_true", help="Evaluate the random-reach baseline.")
    p.add_argument("--task", type=str, required=True, choices=simrobot.TASKS, help="Task.")
    p.add_argument("--episodes", type=int, default=50, help="Number of episodes.")
    p.add_argument("--region", type=str, default="train", choices=simrobot.REGIONS, help="Target region.")
    p.add_argument("--device", type=str, default="cpu", help="Device.")
    p.add_argument("--allow-mismatch", action="store_true", help="Only warn on a fingerprint mismatch.")

    p = sub.add_parser("bench", formatter_class=BlankLinesHelpFormatter, help="Time per-inference latency.")
    p.add_argument("--geo-ckpt", type=str, required=True, help="Geometry checkpoint.")
    p.add_argument("--policy-ckpt", type=str, help="Time the full policy stack instead.")
    p.add_argument("--runs", type=int, default=100, help="Number of timed inferences.")
    p.add_argument("--device", type=str, default="cpu", help="Device.")
    p.add_argument("-o", "--out", type=str, help="Write the timings to this directory.")
    p.add_argument("-f", "--force", action="store_true", help="Overwrite without prompting.")

    p = sub.add_parser("export-ply", formatter_class=BlankLinesHelpFormatter, help="Export a reconstruction.")
    p.add_argument("--geo-ckpt", type=str, required=True, help="Geometry checkpoint.")
    p.add_argument("--sample", type=str, required=True, help="Sample directory.")
    p.add_argument("-o", "--out", type=str, required=True, help="Output PLY file.")
    p.add_argument("--conf-threshold", type=float, default=1.0, help="Minimal retained confidence (>= 1).")
    p.add_argument("--device", type=str, default="cpu", help="Device.")

    p = sub.add_parser("plot", formatter_class=BlankLinesHelpFormatter, help="Plot metrics and evaluation logs.")
    p.add_argument("--metrics", type=str, nargs="+", required=True, help="JSONL metrics or evaluation logs.")
    p.add_argument("-o", "--out", type=str, required=True, help="Output directory.")

    return parser


def _parse(parser: argparse.ArgumentParser, cli_args: list[str]) -> argparse.Namespace:
    if cli_args is None:
        return parser.parse_args(sys.argv[1:])

    return parser.parse_args([str(arg) for arg in cli_args])


def _resolve(args: argparse.Namespace, overrides: dict = None) -> cfg.RunConfig:
    """
    Resolve the run configuration (flag > file > default) and print it.
    """
    overrides = cfg.merge({"seed": getattr(args, "seed", None)}, overrides or {})
    config = cfg.load(getattr(args, "config", None), overrides)
    print(yaml.safe_dump(dict(config.to_dict(), code_version=cfg.code_version()), sort_keys=False))
    return config


def _store(directory: str, config: cfg.RunConfig, force: bool, name: str = "config.yaml", **kwargs):
    """
    Embed the configuration and code version in an output directory.
    """
    cfg.yaml_dump(os.path.join(directory, name), cfg.provenance(config, **kwargs), force=force)


def _check_images(geo: geotrans.GeometryTransformer, config: simrobot.SimConfig):
    if tuple(geo.config.image_size) != (config.height, config.width):
        raise ValueError(
            f"Geometry transformer expects {geo.config.image_size} images, "
            f"simulator renders {(config.height, config.width)}"
        )


def _gen_data(args):
    config = _resolve(args, {"scenegen": {"seed": args.seed}})
    if args.num < 0 or args.start < 0:
        raise ValueError("--num and --start must be non-negative")
    _store(args.out, config, args.force)
    _store(args.out, config, True, "dataset.yaml", kind="dataset", num=args.num, start=args.start)
    paths = scenegen.generate_dataset(config.scenegen, args.out, args.num, args.start, silent=args.silent)
    print(f"{len(paths)} samples written to {args.out}")


def _train_geo(args):
    config = _resolve(
        args,
        {
            "deterministic": args.deterministic,
            "geotrain": {"epochs": args.epochs, "device": args.device},
        },
    )
    dataset = geotrans.GeoDataset.from_directories(args.data)
    held_out = None
    if args.held_out is not None:
        held_out = [scenegen.read_sample(path) for path in scenegen.list_samples(args.held_out)]
    _store(args.out, config, args.force, data=args.data)
    model = geotrans.train_geo(
        dataset,
        args.out,
        config.geotrans,
        config.geotrain,
        seed=config.seed,
        deterministic=config.deterministic,
        provenance=cfg.provenance(config, data=args.data),
        held_out=held_out,
        silent=args.silent,
    )
    print(f"checkpoint: {os.path.join(args.out, 'geo.pt')} ({geotrans.fingerprint(model)})")
    if held_out:
        result = geotrans.evaluate_geo(model, held_out)
        print(f"median error: {result['median_error']:.3e} m ({100 * result['relative_error']:.2f}% of depth range)")


def _pseudo_label(args):
    config = _resolve(args)
    model, meta = geotrans.load_geo(args.geo_ckpt)
    paths = scenegen.list_samples(args.source)
    samples = [scenegen.read_sample(path) for path in paths]
    retained, discarded = scenegen.pseudo_label(model, samples, args.conf_threshold, silent=args.silent)
    _store(args.out, config, args.force)
    _store(
        args.out,
        config,
        True,
        "dataset.yaml",
        kind="pseudo",
        source=args.source,
        geo_fingerprint=meta["fingerprint"],
        conf_threshold=args.conf_threshold,
        retained=len(retained),
        discarded=discarded,
    )
    for sample in retained:
        scenegen.write_sample(sample, os.path.join(args.out, scenegen.sample_dirname(sample.scene_id)))
    print(f"{len(retained)} samples retained, {discarded} discarded")


def _collect_demos(args):
    config = _resolve(args)
    if args.region_split is not None:
        split = simrobot.parse_region_split(args.region_split)
        if args.num is not None and args.num != sum(split.values()):
            raise ValueError(f"--num {args.num} does not match --region-split {args.region_split}")
    elif args.num is not None:
        split = {"train": args.num}
    else:
        raise ValueError("Specify --num or --region-split")
    _store(args.out, config, args.force, task=args.task, split=split)
    paths = simrobot.collect_demos(config.simrobot, args.task, split, config.seed, args.out, silent=args.silent)
    print(f"{len(paths)} demonstrations written to {args.out}")


def _train_policy(args):
    config = _resolve(
        args,
        {
            "deterministic": args.deterministic,
            "connector": {"variant": args.connector},
            "policytrain": {"epochs": args.epochs, "device": args.device},
        },
    )
    geo, meta = geotrans.load_geo(args.geo_ckpt)
    demos = []
    for directory in args.demos:
        demos += [simrobot.load_demonstration(path) for path in simrobot.list_demonstrations(directory)]
    if len(demos) == 0:
        raise ValueError(f"No demonstrations found in {args.demos}")
    for demo in demos:
        simrobot.check_demonstration(demo)
    h, w = demos[0].frame(0)[0].shape[:2]
    if (h, w) != tuple(geo.config.image_size):
        raise ValueError(f"Demonstration frames {(h, w)} do not match the geometry transformer")
    provenance = cfg.provenance(config, demos=args.demos, geo_fingerprint=meta["fingerprint"])
    _store(args.out, config, args.force, demos=args.demos, geo_ckpt=args.geo_ckpt)
    policy.train_policy(
        demos,
        geo,
        args.out,
        config.connector,
        config.policy,
        config.policytrain,
        seed=config.seed,
        deterministic=config.deterministic,
        provenance=provenance,
        silent=args.silent,
    )
    print(f"checkpoint: {os.path.join(args.out, 'policy.pt')}")


def _eval(args):
    config = _resolve(args)

    if args.expert and args.random:
        raise ValueError("--expert and --random are mutually exclusive")
    if args.expert:
        controller = simrobot.ExpertController(config.simrobot)
        name = "expert"
    elif args.random:
        controller = simrobot.RandomController(config.simrobot)
        name = "random"
    else:
        if args.policy_ckpt is None or args.geo_ckpt is None:
            raise ValueError("Specify --policy-ckpt and --geo-ckpt (or --expert / --random)")
        geo, _ = geotrans.load_geo(args.geo_ckpt, args.device)
        _check_images(geo, config.simrobot)
        connector, net, _ = policy.load_policy(args.policy_ckpt, geo, args.allow_mismatch)
        controller = policy.Agent(geo, connector, net)
        name = "policy"

    _store(args.out, config, args.force, controller=name, task=args.task, region=args.region)
    result = simrobot.evaluate(
        controller,
        config.simrobot,
        args.task,
        args.episodes,
        args.region,
        seed=config.seed,
        log=os.path.join(args.out, "eval.jsonl"),
        silent=args.silent,
    )
    summary = dict(
        controller=name,
        task=args.task,
        region=args.region,
        episodes=args.episodes,
        success_rate=result["success_rate"],
        subtasks=result["subtasks"],
    )
    cfg.yaml_dump(os.path.join(args.out, "summary.yaml"), summary, force=True)
    print(f"success rate: {result['success_rate']:.3f} ({args.task}, {args.region}, {name})")
    for key, value in result["subtasks"].items():
        print(f"  {key}: {value:.3f}")


def _bench(args):
    config = _resolve(args)
    geo, _ = geotrans.load_geo(args.geo_ckpt, args.device)
    stack = None
    if args.policy_ckpt is not None:
        connector, net, _ = policy.load_policy(args.policy_ckpt, geo)
        stack = policy.Agent(geo, connector, net)
    result = geotrans.bench(geo, args.runs, stack=stack)
    if args.out is not None:
        _store(args.out, config, args.force)
        with open(os.path.join(args.out, "bench.json"), "w") as file:
            json.dump(result, file, indent=2)
    print(f"runs: {result['runs']}, mean: {result['mean_ms']:.3f} ms, median: {result['median_ms']:.3f} ms")


def _export_ply(args):
    geo, _ = geotrans.load_geo(args.geo_ckpt, args.device)
    sample = scenegen.read_sample(args.sample)
    points, confidence = geo.predict(sample.left[None], sample.right[None])
    count = geotrans.export_pointcloud(points[0, 0], confidence[0, 0], sample.left, args.out, args.conf_threshold)
    print(f"{count} points written to {args.out}")


def _plot(args):
    for path in plot.plot(args.metrics, args.out):
        print(path)


COMMANDS = {
    "gen-data": _gen_data,
    "train-geo": _train_geo,
    "pseudo-label": _pseudo_label,
    "collect-demos": _collect_demos,
    "train-policy": _train_policy,
    "eval": _eval,
    "bench": _bench,
    "export-ply": _export_ply,
    "plot": _plot,
}


def main(cli_args: list[str] = None) -> int:
    """
    Command-line tool, see ``--help``.

    :param cli_args: Command-line arguments (default: ``sys.argv[1:]``).
    :return: Exit code.
    """
    try:
        args = _parse(_EndoAct_parser(), cli_args)
        COMMANDS[args.command](args)
    except (policy.FrozenParameterError, geotrans.DivergenceError) as error:
        print(f"{type(error).__name__}: {error}", file=sys.stderr)
        return 2
    except (OSError, ValueError, scenegen.FrustumError) as error:
        print(f"{type(error).__name__}: {error}", file=sys.stderr)
        return 1

    return 0


if __name__ == "__main__":
    sys.exit(main())
