import copy
import logging
import os
from collections.abc import Iterable, Mapping, MutableMapping
from contextlib import contextmanager

import yaml
from jsonschema import validate as _validate
from jsonschema.exceptions import ValidationError
from ubiquerg import create_lock, expandpath, make_lock_path, mkabs, remove_lock

from .exceptions import ConfigError

_LOGGER = logging.getLogger(__name__)

DEFAULT_WAIT_TIME = 60
CONFIG_ENV_VARS = ["NFREG_CONFIG"]
JOBS_ENV_VAR = "NFREG_JOBS"
SCHEMA_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "schemas", "pipeline_config.yaml")

DEFAULT_CONFIG = {
    "seed": 0,
    "generator": {
        "m": 200,
        "template_seed": 0,
        "knn_k": 8,
        "shapes": 16,
        "n_points": 4096,
        "pose_fraction": 1.0,
        "scale_range": [0.8, 1.25],
        "random_yaw": True,
        "skeleton": None,
        "corruption": {
            "jitter_sigma": 0.0,
            "crop_fraction": 0.0,
            "clutter_points": 0,
            "clutter_radius": 0.1,
            "resample": 0,
        },
    },
    "encoder": {"base_resolution": 32, "levels": 4, "half_extent": 0.75},
    "heads": {"segments": 16, "hidden": [64, 128, 128], "offset_cap": 0.05},
    "training": {
        "epochs": 10,
        "lr": 1e-4,
        "batch_size": 1,
        "n_uniform": 400,
        "n_surface": 1800,
        "surface_sigma": 0.05,
        "resample_queries": False,
    },
    "nicp": {
        "enabled": True,
        "steps": 20,
        "lr": 1e-5,
        "max_samples": 2048,
        "reselect": True,
    },
    "refinement": {
        "mode": "lvd",
        "iters": 50,
        "fit": True,
        "chamfer": True,
        "displacements": False,
        "fit_steps": 2000,
        "fit_lr": 1e-1,
        "chamfer_steps": 500,
        "chamfer_lr": 2e-2,
        "chamfer_mode": "bidirectional",
        "pose_weight": 1e-8,
        "scale_weight": 1e-2,
        "displacement_steps": 500,
        "displacement_lr": 1e-3,
        "lambda_off": 1e-2,
        "lambda_lap": 1.0,
        "init": "centroid",
    },
    "evaluation": {
        "thresholds": 101,
        "max_threshold": 0.5,
        "methods": [
            {"name": "lvd", "mode": "lvd", "nicp": False, "stage": "convergence"},
            {"name": "lvd+nicp", "mode": "lvd", "nicp": True, "stage": "convergence"},
            {"name": "lvd+nicp+chamfer", "mode": "lvd", "nicp": True, "stage": "chamfer"},
        ],
    },
}

__all__ = [
    "PipelineConfig",
    "DEFAULT_CONFIG",
    "deep_update",
    "load_yaml",
    "select_config",
    "get_first_env_var",
    "locked_file",
    "resolve_jobs",
]


class PipelineConfig(MutableMapping):
    """
    Pipeline settings backed by an optional YAML file.

    User entries are deep-merged over ``DEFAULT_CONFIG`` and validated against
    the bundled JSON schema. Reading and writing the backing file happens
    under a lock file, taken by using the object as a context manager.
    """

    def __init__(
        self,
        entries=None,
        filepath=None,
        yamldata=None,
        wait_max=DEFAULT_WAIT_TIME,
        skip_read_lock=False,
        schema_source=SCHEMA_PATH,
    ):
        """
        Object constructor

        :param Mapping[str, object] entries: settings overriding the defaults
        :param str filepath: path to a YAML config file
        :param str yamldata: YAML-formatted string
        :param int wait_max: how long to wait for a lock held by another process
        :param bool skip_read_lock: read the file without taking a lock
        :param str schema_source: path to the jsonschema (YAML) to validate with
        """
        self.filepath = mkabs(filepath) if filepath else None
        self.wait_max = wait_max
        self.locked = False
        self.already_locked = False
        self.schema_source = schema_source

        if self.filepath and not skip_read_lock:
            with self as _:
                user = self.load(self.filepath, entries, yamldata)
        else:
            user = self.load(self.filepath, entries, yamldata)

        self.data = deep_update(copy.deepcopy(DEFAULT_CONFIG), user or {})
        self._schema = load_yaml(expandpath(schema_source)) if schema_source else None
        if self._schema is not None:
            self.validate()

    def load(self, filepath=None, entries=None, yamldata=None):
        if filepath:
            if not os.path.exists(filepath):
                raise FileNotFoundError(f"No such file: {filepath}")
            file_contents = load_yaml(filepath) or {}
            if not isinstance(file_contents, Mapping):
                raise ConfigError(f"Config file must hold a mapping: {filepath}")
            if entries:
                deep_update(file_contents, entries)
            return file_contents
        if yamldata:
            parsed = yaml.safe_load(yamldata) or {}
            if not isinstance(parsed, Mapping):
                raise ConfigError("Config text must hold a mapping")
            return parsed
        return copy.deepcopy(dict(entries or {}))

    def lock(self):
        if not self.filepath:
            _LOGGER.warning("No filepath, no need to lock.")
            return True
        lock_path = make_lock_path(self.filepath)
        if not os.access(os.path.dirname(lock_path), os.W_OK):
            _LOGGER.warning(f"No write access to '{lock_path}'; can't lock file.")
            self.locked = True
            return True
        create_lock(self.filepath, self.wait_max)
        self.locked = True
        return True

    def unlock(self):
        if not self.filepath:
            _LOGGER.warning("No filepath, no need to unlock.")
            return True
        lock_path = make_lock_path(self.filepath)
        if os.access(os.path.dirname(lock_path), os.W_OK):
            remove_lock(self.filepath)
        self.locked = False
        return True

    def __enter__(self):
        if self.locked:
            _LOGGER.debug("Already locked upon entering context manager")
            self.already_locked = True
        else:
            self.lock()
        return self

    def __exit__(self, exc_type, exc_value, exc_traceback):
        if self.already_locked:
            self.already_locked = False
            return False
        self.unlock()
        return False

    def validate(self, schema=None):
        """
        Validate the settings against a schema

        :param dict schema: overrides the schema given at construction
        :raise ConfigError: naming the dotted key that failed
        """
        try:
            _validate(self.to_dict(), schema or self._schema)
        except ValidationError as e:
            key = ".".join(str(p) for p in e.absolute_path) or "<root>"
            _LOGGER.error(f"{self.__class__.__name__} object did not pass schema validation")
            raise ConfigError(f"Invalid value for '{key}': {e.message}", key=key) from e
        _LOGGER.debug("Validated successfully")

    def write(self, filepath=None):
        """
        Write the settings to a YAML file.

        :param str filepath: destination, defaults to the backing file
        :raise OSError: when writing the backing file outside the context manager
        :return str: absolute path of the written file
        """
        fp = filepath or self.filepath
        if not fp:
            raise OSError("Must provide a filepath to write.")
        if fp == self.filepath and not self.locked:
            raise OSError("Please write using a context manager, which locks the file")
        _LOGGER.debug(f"Writing to file '{fp}'")
        with open(fp, "w") as f:
            f.write(self.to_yaml())
        return os.path.abspath(fp)

    def to_yaml(self):
        return yaml.safe_dump(self.data, default_flow_style=False, sort_keys=False)

    def to_dict(self):
        return self.data

    def section(self, name):
        """Copy of one top-level section."""
        return copy.deepcopy(self.data[name])

    def __setitem__(self, item, value):
        self.data[item] = value

    def __getitem__(self, item):
        return self.data[item]

    def __iter__(self):
        return iter(self.data)

    def __len__(self):
        return len(self.data)

    def __delitem__(self, key):
        del self.data[key]

    def __eq__(self, other):
        if isinstance(other, PipelineConfig):
            return self.data == other.data
        return NotImplemented

    def __repr__(self):
        return f"{type(self).__name__}({self.data})"


@contextmanager
def locked_file(filepath, wait_max=DEFAULT_WAIT_TIME):
    """
    Hold a ubiquerg lock file next to ``filepath`` for the duration of the block.

    :param str filepath: path of the file about to be written
    :param int wait_max: how long to wait for a lock held by another process
    """
    filepath = mkabs(filepath)
    lock_path = make_lock_path(filepath)
    if not os.access(os.path.dirname(lock_path), os.W_OK):
        raise OSError(f"No write access to '{os.path.dirname(lock_path)}'")
    create_lock(filepath, wait_max)
    try:
        yield filepath
    finally:
        remove_lock(filepath)


def load_yaml(filepath):
    """Load a yaml file into a python dict"""
    with open(filepath, "r") as f:
        return yaml.safe_load(f)


def get_first_env_var(ev):
    """
    Get the name and value of the first set environment variable

    :param str | Iterable[str] ev: a list of the environment variable names
    :return (str, str) | None: name and the value of the environment variable
    """
    if isinstance(ev, str):
        ev = [ev]
    elif not isinstance(ev, Iterable):
        raise TypeError(f"Env var must be single name or collection of names; got {type(ev)}")
    for v in ev:
        try:
            return v, os.environ[v]
        except KeyError:
            pass
    return None


def select_config(config_filepath=None, config_env_vars=CONFIG_ENV_VARS):
    """
    Path of the config file to load, or None for the built-in defaults.

    An explicit path wins and must exist. Otherwise the first set environment
    variable that points at a file is used.

    :param str | NoneType config_filepath: explicit path, env vars expanded
    :param Iterable[str] config_env_vars: environment variables to try
    :raise IOError: if the explicit path is not a file
    :return str | NoneType: absolute path of the selected file
    """
    if config_filepath:
        config_filepath = os.path.expandvars(config_filepath)
        if not os.path.isfile(config_filepath):
            raise IOError(f"Config file path isn't a file: {config_filepath}")
        return os.path.abspath(config_filepath)
    found = get_first_env_var(config_env_vars) if config_env_vars else None
    if found is not None:
        env_var, cfg_file = found
        if os.path.isfile(cfg_file):
            _LOGGER.debug(f"Config from {env_var}: {cfg_file}")
            return os.path.abspath(cfg_file)
        _LOGGER.warning(f"{env_var} does not point to a file: {cfg_file}")
    _LOGGER.info("No config file given; using built-in defaults")
    return None


def deep_update(old, new):
    """
    Recursively update nested dict, modifying source
    """
    for key, value in new.items():
        if isinstance(value, Mapping) and value and isinstance(old.get(key), Mapping):
            old[key] = deep_update(old[key], value)
        else:
            old[key] = copy.deepcopy(value)
    return old


def resolve_jobs(jobs=None):
    """
    Worker count: the explicit value, else ``NFREG_JOBS``, else 1.

    :raise ConfigError: if the environment value is not a positive integer
    """
    if jobs is not None:
        value, source = jobs, "--jobs"
    else:
        raw = os.environ.get(JOBS_ENV_VAR)
        if raw is None:
            return 1
        value, source = raw, JOBS_ENV_VAR
    try:
        value = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{source} must be a positive integer, got '{value}'", key=source)
    if value < 1:
        raise ConfigError(f"{source} must be a positive integer, got {value}", key=source)
    return value
