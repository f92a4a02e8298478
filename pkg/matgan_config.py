# matgan_config.py - Run configuration: defaults, then config file, then command-line flags

import configparser
import os

import matgan_logger as _mlog
from style_gan3d import ModelConfig
from wgan_trainer import TrainConfig

logger = _mlog.get("config")

SECTION = "matgan"


class ConfigError(ValueError):
    pass


# key -> (type, default). Order is the order of `effective_lines()`.
CANONICAL_KEYS = {
    "lr": (float, "0.0002"),
    "batch": (int, "8"),
    "n_critic": (int, "5"),
    "lambda_gp": (float, "10"),
    "beta1": (float, "0.5"),
    "beta2": (float, "0.9"),
    "adam_eps": (float, "1e-8"),
    "latent_dim": (int, "512"),
    "mapping_layers": (int, "8"),
    "z_variance": (float, "0.2"),
    "output_size": (int, "16"),
    "pack_size": (int, "2"),
    "channel_divisor": (int, "4"),
    "max_steps": (int, "300"),
    "checkpoint_every": (int, "100"),
    "seed": (int, "0"),
    "threshold": (float, "0.5"),
    "bins": (int, "100"),
    "dtype": (str, "float32"),
    "workers": (int, "1"),
    "log_level": (str, "INFO"),
}


class RunConfig:
    """Canonical run settings exposed as upper-case attributes (LR, BATCH, ...)."""

    def __init__(self, config_path=None, overrides=None):
        self.config = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                                inline_comment_prefixes=("#",))
        self.config.optionxform = str
        self.defaults = {SECTION: {k: default for k, (_, default) in CANONICAL_KEYS.items()}}
        self.config.read_dict(self.defaults)
        self.source = "defaults"

        if config_path:
            self._read_file(config_path)
            self.source = config_path

        for key, value in (overrides or {}).items():
            if value is None:
                continue
            self._check_key(key, "command line")
            self.config.set(SECTION, key, str(value))

        for key, (kind, _) in CANONICAL_KEYS.items():
            raw = self.config.get(SECTION, key)
            try:
                value = kind(raw)
            except ValueError as e:
                raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from e
            setattr(self, key.upper(), value)

    def _check_key(self, key, where):
        if key not in CANONICAL_KEYS:
            raise ConfigError(f"unknown config key {key!r} ({where})")

    def _read_file(self, path):
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as f:
            text = f.read()
        # a bare key=value file is read as the [matgan] section
        if not text.lstrip().startswith("["):
            text = f"[{SECTION}]\n{text}"
        parsed = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                           inline_comment_prefixes=("#",))
        parsed.optionxform = str
        try:
            parsed.read_string(text, source=path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
        for section in parsed.sections():
            if section != SECTION:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in parsed.items(section):
                self._check_key(key, path)
                self.config.set(SECTION, key, value)

    def get(self, key):
        self._check_key(key, "lookup")
        return getattr(self, key.upper())

    def effective_lines(self):
        return [f"{key} = {self.config.get(SECTION, key)}" for key in CANONICAL_KEYS]

    def log_effective(self):
        logger.info(f"Effective configuration (from {self.source}):")
        for line in self.effective_lines():
            logger.info(f"  {line}")

    def model_config(self):
        return ModelConfig(
            latent_dim=self.LATENT_DIM,
            mapping_layers=self.MAPPING_LAYERS,
            output_size=self.OUTPUT_SIZE,
            channel_divisor=self.CHANNEL_DIVISOR,
            pack_size=self.PACK_SIZE,
            dtype=self.DTYPE,
        )

    def train_config(self):
        return TrainConfig(
            lr=self.LR,
            batch=self.BATCH,
            n_critic=self.N_CRITIC,
            lambda_gp=self.LAMBDA_GP,
            beta1=self.BETA1,
            beta2=self.BETA2,
            adam_eps=self.ADAM_EPS,
            z_variance=self.Z_VARIANCE,
            max_steps=self.MAX_STEPS,
            checkpoint_every=self.CHECKPOINT_EVERY,
            seed=self.SEED,
        )
