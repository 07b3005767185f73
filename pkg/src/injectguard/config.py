"""Experiment configuration: line-oriented ``key = value`` text.

Blank lines and ``#`` comments are ignored.  Unknown keys, malformed
values, and out-of-range values are rejected with the offending line
number.  Absent keys take the documented defaults below, which
reproduce the reference desk-scale experiment: N=20 slots over the
8-level dictionary at 30 dB, a 32x32 raster, the small CNN preset,
lr 0.001 / batch 32 / 1 local epoch, and a 2-client federation.

Keys::

    n                   signalling slots per frame        (20)
    levels              energy dictionary, comma-separated ascending
                        positive floats                   (8-level default)
    snr_db              signal-to-noise ratio in dB       (30.0)
    seed                master seed: keys, noise, shuffles (1)
    height, width       raster grid size                  (32, 32)
    bound               raster half-extent A, bins span [-A, A] (3.0)
    preset              CNN size, "desk" or "literal"     (desk)
    lr                  Adam learning rate                (0.001)
    batch               minibatch size                    (32)
    epochs              local epochs per round            (1)
    clients             federation size                   (2)
    rounds              FL rounds; 0 = auto (10 if clients<=2 else 15)
    host, port          coordinator endpoint              (127.0.0.1, 47631)
    rate_bps            send throttle, 0 = unthrottled    (0; radio preset 250000)
    handshake_timeout   seconds to wait for all clients   (30)
    round_timeout       per-step socket timeout, seconds  (300)
    train_per_class     training images per class per client (2000)
    test_per_class      test images per class per client  (400)
    out_dir             artifact directory                (.)
"""

from __future__ import annotations

from dataclasses import dataclass

from .cnn.model import PRESETS, ModelSpec
from .cnn.train import TrainConfig
from .dataset import RasterConfig
from .errors import ConfigError, InjectGuardError
from .federation import FederationConfig, ThrottleConfig
from .signal_model import EnergyDictionary, SimulationConfig

_DEFAULTS = {
    "n": 20,
    "levels": None,  # EnergyDictionary default (the 8-level table)
    "snr_db": 30.0,
    "seed": 1,
    "height": 32,
    "width": 32,
    "bound": 3.0,
    "preset": "desk",
    "lr": 0.001,
    "batch": 32,
    "epochs": 1,
    "clients": 2,
    "rounds": 0,
    "host": "127.0.0.1",
    "port": 47631,
    "rate_bps": 0,
    "handshake_timeout": 30.0,
    "round_timeout": 300.0,
    "train_per_class": 2000,
    "test_per_class": 400,
    "out_dir": ".",
}


def _int_at_least(lo):
    def conv(raw: str) -> int:
        value = int(raw, 0)
        if value < lo:
            raise ValueError(f"must be >= {lo}")
        return value

    return conv


def _float_at_least(lo, *, strict=False):
    def conv(raw: str) -> float:
        value = float(raw)
        if value < lo or (strict and value == lo):
            raise ValueError(f"must be {'>' if strict else '>='} {lo}")
        return value

    return conv


def _levels(raw: str) -> tuple:
    values = tuple(float(part) for part in raw.split(","))
    EnergyDictionary(values)  # validates: nonempty, positive, ascending
    return values


def _preset(raw: str) -> str:
    if raw not in PRESETS:
        raise ValueError(f"must be one of {sorted(PRESETS)}")
    return raw


def _port(raw: str) -> int:
    value = int(raw, 0)
    if not 0 <= value <= 65535:
        raise ValueError("must be in 0..65535")
    return value


_CONVERTERS = {
    "n": _int_at_least(1),
    "levels": _levels,
    "snr_db": float,
    "seed": _int_at_least(0),
    "height": _int_at_least(4),
    "width": _int_at_least(4),
    "bound": _float_at_least(0.0, strict=True),
    "preset": _preset,
    "lr": _float_at_least(0.0),
    "batch": _int_at_least(1),
    "epochs": _int_at_least(0),
    "clients": _int_at_least(1),
    "rounds": _int_at_least(0),
    "host": str,
    "port": _port,
    "rate_bps": _int_at_least(0),
    "handshake_timeout": _float_at_least(0.0, strict=True),
    "round_timeout": _float_at_least(0.0, strict=True),
    "train_per_class": _int_at_least(1),
    "test_per_class": _int_at_least(1),
    "out_dir": str,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully-resolved experiment settings for every CLI verb."""

    sim: SimulationConfig
    raster: RasterConfig
    preset: str
    train: TrainConfig
    federation: FederationConfig
    train_per_class: int
    test_per_class: int
    out_dir: str

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            height=self.raster.height,
            width=self.raster.width,
            filters=PRESETS[self.preset].filters,
        )


def parse_config(text: str) -> ExperimentConfig:
    """Parse config text; raises ConfigError naming the offending line."""
    values = dict(_DEFAULTS)
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in _CONVERTERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if not raw_value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        try:
            values[key] = _CONVERTERS[key](raw_value)
        except (ValueError, InjectGuardError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return _assemble(values)


def _assemble(values: dict) -> ExperimentConfig:
    dictionary = (
        EnergyDictionary() if values["levels"] is None else EnergyDictionary(values["levels"])
    )
    sim = SimulationConfig(
        n=values["n"],
        dictionary=dictionary,
        snr_db=values["snr_db"],
        seed=values["seed"],
    )
    raster = RasterConfig(
        height=values["height"], width=values["width"], bound=values["bound"]
    )
    train = TrainConfig(
        learning_rate=values["lr"],
        batch_size=values["batch"],
        epochs=values["epochs"],
        shuffle_seed=values["seed"],
    )
    federation = FederationConfig(
        n_clients=values["clients"],
        rounds=values["rounds"] or None,
        train=train,
        host=values["host"],
        port=values["port"],
        handshake_timeout=values["handshake_timeout"],
        round_timeout=values["round_timeout"],
        throttle=ThrottleConfig(rate_bps=values["rate_bps"]),
    )
    cfg = ExperimentConfig(
        sim=sim,
        raster=raster,
        preset=values["preset"],
        train=train,
        federation=federation,
        train_per_class=values["train_per_class"],
        test_per_class=values["test_per_class"],
        out_dir=values["out_dir"],
    )
    cfg.model_spec  # fail now if the raster cannot feed the CNN's pooling chain
    return cfg


def load_config(path: str | None) -> ExperimentConfig:
    """Read and parse a config file; None means all defaults."""
    if path is None:
        return parse_config("")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
