"""Line-oriented `key = value` run configuration with sections.

Sections: [data], [cnn], [crf], [refiner], [synth]. Every hyperparameter of
the reference setups is a named key; profile defaults carry the reference
values (band group sizes 25/25/20, learning rates 0.003/0.01/0.005, epochs
700/600/600 classification and 500 segmentation, batch size 100, 32 kernels
of 5x5x5). Network layer keys hold the convolution/pooling body; the softmax
head is appended at build time with the label width the data dictates.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

_CONV32 = "conv:32:5x5x5:relu"

PROFILES: dict[str, dict] = {
    "indian-pines": {
        "band_group_size": 25,
        "cls_layers": f"{_CONV32}, pool, {_CONV32}, pool, {_CONV32}, {_CONV32}, "
                      f"{_CONV32}, pool, {_CONV32}, {_CONV32}, pool",
        "cls_lr": 0.003,
        "cls_epochs": 700,
        "seg_layers": f"{_CONV32}, {_CONV32}, {_CONV32}, {_CONV32}",
        "seg_layers_pooled": f"{_CONV32}, pool, {_CONV32}, {_CONV32}, {_CONV32}, pool",
        "seg_epochs": 500,
    },
    "pavia": {
        "band_group_size": 25,
        "cls_layers": f"{_CONV32}, pool, {_CONV32}, pool, {_CONV32}, {_CONV32}, "
                      f"{_CONV32}, pool, {_CONV32}",
        "cls_lr": 0.01,
        "cls_epochs": 600,
        "seg_layers": f"{_CONV32}, {_CONV32}, {_CONV32}",
        "seg_layers_pooled": f"{_CONV32}, pool, {_CONV32}, {_CONV32}, pool",
        "seg_epochs": 500,
    },
    "griffith": {
        "band_group_size": 20,
        "cls_layers": f"{_CONV32}, pool, {_CONV32}, pool, {_CONV32}, {_CONV32}, "
                      f"{_CONV32}, pool, {_CONV32}",
        "cls_lr": 0.005,
        "cls_epochs": 600,
        "seg_layers": f"{_CONV32}, {_CONV32}, {_CONV32}",
        "seg_layers_pooled": f"{_CONV32}, pool, {_CONV32}, {_CONV32}",
        "seg_epochs": 500,
    },
    # compact nets sized for the desk-scale synthetic scenes
    "synthetic": {
        "band_group_size": 20,
        "cls_layers": "conv:8:3x3x5:relu, pool, conv:12:3x3x5:relu, pool",
        "cls_lr": 0.005,
        "cls_epochs": 600,
        "seg_layers": "conv:12:3x3x1:relu, conv:12:3x3x1:relu",
        "seg_layers_pooled": "conv:12:3x3x1:relu, pool, conv:12:3x3x1:relu",
        "seg_epochs": 500,
    },
}


@dataclass
class RunConfig:
    # [data]
    profile: str = "synthetic"
    band_group_size: int | None = None
    patch_size: int = 11
    samples_per_class: int = 15
    virtual_per_class: int = 15
    alpha_low: float = 0.7
    alpha_high: float = 1.0
    beta_sigma: float = 0.01
    geometric: bool = True
    val_fraction: float = 0.9
    # [cnn]
    cnn_layers: str = ""
    cnn_padding: str = "valid"
    cnn_learning_rate: float | None = None
    cnn_epochs: int | None = None
    cnn_batch_size: int = 100
    # [crf]
    unary_layers: str = ""
    unary_layers_pooled: str = ""
    pairwise_layers: str = ""
    pairwise_layers_pooled: str = ""
    crf_learning_rate: float = 0.2
    crf_epochs: int | None = None
    crf_batch_graphs: int = 4
    tile_size: int = 12
    train_tiles: int = 24
    val_tiles: int = 6
    mf_iterations: int = 10
    w1: float = 1.0
    w2: float = 1.0
    theta_alpha: float = 3.0
    theta_gamma: str = "auto"  # "auto" = 0.1 * feature range, or a number
    grid_search: bool = True
    standardize_features: bool = True
    # [refiner]
    refiner_mode: str = "pairwise"  # none | unary | pairwise
    # [synth]
    synth_height: int = 64
    synth_width: int = 64
    synth_bands: int = 40
    synth_classes: int = 3
    synth_blobs: int = 12
    synth_noise: float = 0.02

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; known: {sorted(PROFILES)}")
        prof = PROFILES[self.profile]
        if self.band_group_size is None:
            self.band_group_size = prof["band_group_size"]
        if self.cnn_learning_rate is None:
            self.cnn_learning_rate = prof["cls_lr"]
        if self.cnn_epochs is None:
            self.cnn_epochs = prof["cls_epochs"]
        if self.crf_epochs is None:
            self.crf_epochs = prof["seg_epochs"]
        if not self.cnn_layers:
            self.cnn_layers = prof["cls_layers"]
        if not self.unary_layers:
            self.unary_layers = prof["seg_layers"]
        if not self.unary_layers_pooled:
            self.unary_layers_pooled = prof["seg_layers_pooled"]
        if not self.pairwise_layers:
            self.pairwise_layers = prof["seg_layers"]
        if not self.pairwise_layers_pooled:
            self.pairwise_layers_pooled = prof["seg_layers_pooled"]


_SCHEMA = {
    "data": [
        ("profile", str, "profile"),
        ("band_group_size", int, "band_group_size"),
        ("patch_size", int, "patch_size"),
        ("samples_per_class", int, "samples_per_class"),
        ("virtual_per_class", int, "virtual_per_class"),
        ("alpha_low", float, "alpha_low"),
        ("alpha_high", float, "alpha_high"),
        ("beta_sigma", float, "beta_sigma"),
        ("geometric", bool, "geometric"),
        ("val_fraction", float, "val_fraction"),
    ],
    "cnn": [
        ("layers", str, "cnn_layers"),
        ("padding", str, "cnn_padding"),
        ("learning_rate", float, "cnn_learning_rate"),
        ("epochs", int, "cnn_epochs"),
        ("batch_size", int, "cnn_batch_size"),
    ],
    "crf": [
        ("unary_layers", str, "unary_layers"),
        ("unary_layers_pooled", str, "unary_layers_pooled"),
        ("pairwise_layers", str, "pairwise_layers"),
        ("pairwise_layers_pooled", str, "pairwise_layers_pooled"),
        ("learning_rate", float, "crf_learning_rate"),
        ("epochs", int, "crf_epochs"),
        ("batch_graphs", int, "crf_batch_graphs"),
        ("tile_size", int, "tile_size"),
        ("train_tiles", int, "train_tiles"),
        ("val_tiles", int, "val_tiles"),
        ("iterations", int, "mf_iterations"),
        ("w1", float, "w1"),
        ("w2", float, "w2"),
        ("theta_alpha", float, "theta_alpha"),
        ("theta_gamma", str, "theta_gamma"),
        ("grid_search", bool, "grid_search"),
        ("standardize_features", bool, "standardize_features"),
    ],
    "refiner": [("mode", str, "refiner_mode")],
    "synth": [
        ("height", int, "synth_height"),
        ("width", int, "synth_width"),
        ("bands", int, "synth_bands"),
        ("num_classes", int, "synth_classes"),
        ("blob_count", int, "synth_blobs"),
        ("noise_sigma", float, "synth_noise"),
    ],
}


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    with open(Path(path)) as fh:
        parser.read_file(fh)
    kwargs = {}
    if parser.has_option("data", "profile"):
        kwargs["profile"] = parser.get("data", "profile")
    for section, entries in _SCHEMA.items():
        if not parser.has_section(section):
            continue
        for key, typ, attr in entries:
            if not parser.has_option(section, key):
                continue
            if typ is bool:
                kwargs[attr] = parser.getboolean(section, key)
            elif typ is int:
                kwargs[attr] = parser.getint(section, key)
            elif typ is float:
                kwargs[attr] = parser.getfloat(section, key)
            else:
                kwargs[attr] = parser.get(section, key)
    return RunConfig(**kwargs)


def save_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    for section, entries in _SCHEMA.items():
        parser.add_section(section)
        for key, typ, attr in entries:
            val = getattr(cfg, attr)
            parser.set(section, key, str(val).lower() if typ is bool else str(val))
    with open(Path(path), "w") as fh:
        parser.write(fh)
