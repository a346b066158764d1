"""EndoActShow
  Show the metadata embedded in an artifact:
  a checkpoint (geometry or policy), a dataset, or a demonstration directory.

Usage:
  EndoActShow [options] <input>

Arguments:
  input                   Checkpoint (*.pt) or directory.

Options:
  -c, --config            Also print the stored run configuration.
      --version           Show version.
  -h, --help              Show help.

(c - MIT) T.W.J. de Geus | tom@geus.me | www.geus.me | github.com/tdegeus/EndoAct
"""
# ==================================================================================================
import json
import os
import re

import docopt
import torch
import yaml

from .. import scenegen
from .. import simrobot
from .. import version

# ========================================== MAIN PROGRAM ==========================================


def _checkpoint(path: str, config: bool):
    data = torch.load(path, map_location="cpu", weights_only=True)

    if not isinstance(data, dict) or "kind" not in data:
        raise OSError(f'"{path}" is not an EndoAct checkpoint')

    out = {key: data[key] for key in ["kind", "format_version", "seed"]}
    provenance = data.get("provenance", {})
    out["code_version"] = provenance.get("code_version")

    if data["kind"] == "geotrans":
        out["fingerprint"] = data["fingerprint"]
        out["geotrans"] = data["config"]
        out["parameters"] = int(sum(value.numel() for value in data["state_dict"].values()))
    else:
        out["geo_fingerprint"] = data["geo_fingerprint"]
        out["connector"] = data["connector_config"]
        out["policy"] = data["policy_config"]
        out["grid"] = data["grid"]
        out["parameters"] = int(
            sum(value.numel() for key in ["connector", "policy"] for value in data[key].values())
        )

    if config:
        out["config"] = provenance.get("config")

    return out


def _directory(path: str, config: bool):
    out = {}

    for name, key in [("dataset.yaml", "dataset"), ("config.yaml", "run")]:
        filename = os.path.join(path, name)
        if os.path.isfile(filename):
            with open(filename) as file:
                data = yaml.safe_load(file.read())
            out["code_version"] = data.get("code_version")
            if config:
                out["config"] = data.get("config")
            info = {k: v for k, v in data.items() if k not in ["config", "code_version"]}
            if len(info) > 0:
                out[key] = info

    samples = scenegen.list_samples(path)
    demos = simrobot.list_demonstrations(path)

    if len(samples) > 0:
        with open(os.path.join(samples[0], "meta.json")) as file:
            meta = json.load(file)
        out["samples"] = len(samples)
        out["source"] = meta["source"]
        out["generator_version"] = meta["generator_version"]
        out["image"] = [meta["rig"]["height"], meta["rig"]["width"]]

    if len(demos) > 0:
        tasks = {}
        regions = {}
        lengths = []
        for demo in demos:
            with open(os.path.join(demo, "meta.json")) as file:
                meta = json.load(file)
            tasks[meta["task"]] = tasks.get(meta["task"], 0) + 1
            regions[meta["region"]] = regions.get(meta["region"], 0) + 1
            lengths.append(meta["length"])
        out["demonstrations"] = len(demos)
        out["tasks"] = tasks
        out["regions"] = regions
        out["length"] = dict(min=min(lengths), max=max(lengths), mean=sum(lengths) / len(lengths))

    return out


def main():
    # --------------------------------- parse command line arguments -------------------------------

    # parse command-line options/arguments
    args = docopt.docopt(__doc__, version=version)

    # change keys to simplify implementation:
    # - remove leading "-" and "--" from options
    args = {re.sub(r"([\-]{1,2})(.*)", r"\2", key): args[key] for key in args}
    # - remove "<...>"
    args = {re.sub(r"(<)(.*)(>)", r"\2", key): args[key] for key in args}

    # --------------------------------------- check arguments --------------------------------------

    if not os.path.exists(args["input"]):
        raise OSError('"{input:s}" does not exist'.format(**args))

    # ------------------------------------------- show ---------------------------------------------

    if os.path.isdir(args["input"]):
        out = _directory(args["input"], args["config"])
    else:
        out = _checkpoint(args["input"], args["config"])

    print(yaml.safe_dump(out, sort_keys=False))
