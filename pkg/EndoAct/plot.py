"""
Loss curves (training metrics) and success bars (evaluation logs).
"""
from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_jsonl(path: str) -> list[dict]:
    """
    Read a line-delimited JSON file (empty lines are skipped).
    """
    if not os.path.isfile(path):
        raise OSError(f'"{path}" does not exist')

    ret = []

    with open(path) as file:
        for i, line in enumerate(file):
            if len(line.strip()) == 0:
                continue
            try:
                ret.append(json.loads(line))
            except json.JSONDecodeError as error:
                raise ValueError(f'"{path}", line {i + 1}: {error}')

    return ret


def _label(path: str) -> str:
    dirname = os.path.basename(os.path.dirname(os.path.abspath(path)))
    return f"{dirname}/{os.path.splitext(os.path.basename(path))[0]}"


def is_episode_log(lines: list[dict]) -> bool:
    return len(lines) > 0 and "success" in lines[0] and "episode" in lines[0]


def loss_curves(paths: list[str], filename: str):
    """
    Plot all ``loss*`` entries of training metrics against the step.

    :param paths: Metric files (JSONL, one line per epoch).
    :param filename: Output image.
    """
    fig, ax = plt.subplots()

    for path in paths:
        lines = read_jsonl(path)
        keys = sorted({key for line in lines for key in line if key.startswith("loss")})
        for key in keys:
            data = [(line["step"], line[key]) for line in lines if key in line]
            if len(data) == 0:
                continue
            step, value = np.array(data, dtype=float).T
            ax.plot(step, value, label=f"{_label(path)}: {key}")

    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(fontsize="small")
    fig.savefig(filename, dpi=150, bbox_inches="tight")
    plt.close(fig)


def success_rates(lines: list[dict]) -> dict[str, float]:
    """
    Whole-task and per-subtask success rates of an evaluation log.
    """
    n = max(len(lines), 1)
    ret = {"success": sum(bool(line["success"]) for line in lines) / n}
    for key in lines[0].get("subtasks", {}) if len(lines) > 0 else []:
        ret[key] = sum(bool(line["subtasks"][key]) for line in lines) / n
    return ret


def success_bars(paths: list[str], filename: str):
    """
    Grouped bars of the success rates of evaluation logs.

    :param paths: Per-episode evaluation logs (JSONL).
    :param filename: Output image.
    """
    rates = [success_rates(read_jsonl(path)) for path in paths]
    keys = list(dict.fromkeys(key for rate in rates for key in rate))
    width = 0.8 / max(len(keys), 1)
    x = np.arange(len(paths))

    fig, ax = plt.subplots()

    for i, key in enumerate(keys):
        ax.bar(x + i * width, [rate.get(key, 0) for rate in rates], width, label=key)

    ax.set_xticks(x + 0.5 * width * (len(keys) - 1))
    ax.set_xticklabels([_label(path) for path in paths], rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("success rate")
    ax.legend(fontsize="small")
    fig.savefig(filename, dpi=150, bbox_inches="tight")
    plt.close(fig)


def plot(paths: list[str], directory: str) -> list[str]:
    """
    Sort files into training metrics and evaluation logs and plot them.

    :param paths: JSONL files.
    :param directory: Output directory (``loss.png``, ``success.png``).
    :return: Written images.
    """
    metrics = []
    episodes = []

    for path in paths:
        if is_episode_log(read_jsonl(path)):
            episodes.append(path)
        else:
            metrics.append(path)

    os.makedirs(directory, exist_ok=True)
    ret = []

    if len(metrics) > 0:
        ret.append(os.path.join(directory, "loss.png"))
        loss_curves(metrics, ret[-1])

    if len(episodes) > 0:
        ret.append(os.path.join(directory, "success.png"))
        success_bars(episodes, ret[-1])

    return ret
