"""
Run configuration: one YAML file with a section per component.

.. code-block:: yaml

    seed: 0
    deterministic: false
    scenegen: {width: 96, height: 96, baseline: [0.003, 0.006], ...}
    geotrans: {patch_size: 8, enc_depth: 6, ...}
    geotrain: {epochs: 100, ...}
    connector: {variant: msfc}
    policy: {chunk: 20, m: 0.1, ...}
    policytrain: {epochs: 200, ...}
    simrobot: {horizon: 120, ...}

Omitted keys take their defaults, unknown keys are rejected.
The ``config.yaml`` stored next to every artifact can be read back as a configuration.
Precedence: command-line flag > file > default.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from dataclasses import field

import click
import git
import yaml

from . import version
from .connector import ConnectorConfig
from .geotrans import GeoConfig
from .geotrans import GeoTrainConfig
from .policy import PolicyConfig
from .policy import PolicyTrainConfig
from .scenegen import RandomizationConfig
from .simrobot import SimConfig

SECTIONS = {
    "scenegen": RandomizationConfig,
    "geotrans": GeoConfig,
    "geotrain": GeoTrainConfig,
    "connector": ConnectorConfig,
    "policy": PolicyConfig,
    "policytrain": PolicyTrainConfig,
    "simrobot": SimConfig,
}

SCALARS = {"seed": int, "deterministic": bool}


class ConfigError(ValueError):
    """
    Invalid run configuration (unknown keys or invalid values).
    """


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    scenegen: RandomizationConfig = field(default_factory=RandomizationConfig)
    geotrans: GeoConfig = field(default_factory=GeoConfig)
    geotrain: GeoTrainConfig = field(default_factory=GeoTrainConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    policytrain: PolicyTrainConfig = field(default_factory=PolicyTrainConfig)
    simrobot: SimConfig = field(default_factory=SimConfig)

    def to_dict(self) -> dict:
        """
        Plain (YAML-safe) representation.
        """
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        """
        Build from a (partial) nested dictionary.

        :param data: Nested dictionary, e.g. ``{"seed": 1, "policy": {"chunk": 10}}``.
        :return: The configuration.
        """
        if data is None:
            data = {}

        if not isinstance(data, dict):
            raise ConfigError("Configuration must be a mapping")

        unknown = [key for key in data if key not in SECTIONS and key not in SCALARS]
        if len(unknown) > 0:
            raise ConfigError(f"Unknown configuration keys: {', '.join(map(str, unknown))}")

        kwargs = {}

        for key, kind in SCALARS.items():
            if key in data:
                if not isinstance(data[key], (int, bool)):
                    raise ConfigError(f'"{key}" must be {kind.__name__}')
                kwargs[key] = kind(data[key])

        for key, section in SECTIONS.items():
            values = data.get(key, {}) or {}
            if not isinstance(values, dict):
                raise ConfigError(f'Section "{key}" must be a mapping')
            names = [f.name for f in dataclasses.fields(section)]
            unknown = [name for name in values if name not in names]
            if len(unknown) > 0:
                raise ConfigError(f'Unknown keys in "{key}": {", ".join(map(str, unknown))}')
            try:
                kwargs[key] = section(**values)
            except (TypeError, ValueError) as error:
                raise ConfigError(f'Invalid "{key}": {error}')

        return cls(**kwargs)


def _plain(data):
    if isinstance(data, dict):
        return {key: _plain(value) for key, value in data.items()}
    if isinstance(data, (list, tuple)):
        return [_plain(value) for value in data]
    if hasattr(data, "item"):
        return data.item()
    return data


def merge(base: dict, overrides: dict) -> dict:
    """
    Recursively update a nested dictionary. Values ``None`` in ``overrides`` are ignored
    (unset command-line flags).
    """
    ret = dict(base)

    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(ret.get(key), dict):
            ret[key] = merge(ret[key], value)
        elif isinstance(value, dict):
            ret[key] = merge({}, value)
        else:
            ret[key] = value

    return ret


def load(filename: str = None, overrides: dict = None) -> RunConfig:
    """
    Read a run configuration.

    :param filename: YAML file (optional, defaults are used for everything omitted).
    :param overrides: Nested dictionary of values taking precedence over the file.
    :return: The resolved configuration.
    """
    data = {}

    if filename is not None:
        if not os.path.isfile(filename):
            raise OSError(f'"{filename}" does not exist')
        with open(filename) as file:
            try:
                data = yaml.safe_load(file.read()) or {}
            except yaml.YAMLError as error:
                raise ConfigError(f'"{filename}" is not valid YAML: {error}')
        if not isinstance(data, dict):
            raise ConfigError(f'"{filename}" must contain a mapping')
        # re-use of a config.yaml written next to an artifact
        if isinstance(data.get("config"), dict) and "code_version" in data:
            data = data["config"]
        data = {key: value for key, value in data.items() if key != "code_version"}

    return RunConfig.from_dict(merge(data, overrides or {}))


def yaml_dump(filename: str, data, force: bool = False):
    r"""
    Dump data to YAML file.

    :type filename: str
    :param filename: The output filename.

    :type data: list, dict
    :param data: The data to dump.

    :type force: bool, optional
    :param force: Do not prompt to overwrite file.
    """

    dirname = os.path.dirname(filename)

    if not force:
        if os.path.isfile(filename):
            if not click.confirm(f'Overwrite "{filename:s}"?'):
                raise OSError("Cancelled")
        elif not os.path.isdir(dirname) and len(dirname) > 0:
            if not click.confirm(f'Create "{os.path.dirname(filename):s}"?'):
                raise OSError("Cancelled")

    if not os.path.isdir(dirname) and len(dirname) > 0:
        os.makedirs(os.path.dirname(filename))

    with open(filename, "w") as file:
        yaml.safe_dump(_plain(data), file, sort_keys=False)


def dump(filename: str, config: RunConfig, force: bool = False):
    """
    Write a run configuration (with the code version) to a YAML file.
    """
    yaml_dump(filename, dict(config.to_dict(), code_version=code_version()), force)


def code_version() -> dict:
    """
    Version of the package and, if installed from a git checkout, the commit.

    :return: ``{"version": ..., "commit": ..., "dirty": ...}`` (commit and dirty ``None``
        outside a repository).
    """
    ret = dict(version=version, commit=None, dirty=None)

    try:
        repo = git.Repo(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
        ret["commit"] = repo.head.commit.hexsha
        ret["dirty"] = repo.is_dirty()
    except (git.InvalidGitRepositoryError, git.NoSuchPathError, ValueError):
        pass

    return ret


def provenance(config: RunConfig, **kwargs) -> dict:
    """
    Record embedded in every artifact: resolved configuration, code version, and any
    additional (JSON-safe) fields.
    """
    return dict(config=config.to_dict(), code_version=code_version(), **_plain(kwargs))
