"""Preset loading: hardware tables shipped as a text config, parsed into the
typed records the simulator consumes. Extra config files can add or replace
presets; slice hashes in the cache model are configuration, not code."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from importlib import resources

from .cache import CacheGeometry
from .dram import DramGeometry, make_bank_masks
from .errors import InvalidConfigError
from .mob import MicroArchParams


@dataclass
class Presets:
    microarch: dict[str, MicroArchParams] = field(default_factory=dict)
    dram: dict[str, DramGeometry] = field(default_factory=dict)
    cache: dict[str, CacheGeometry] = field(default_factory=dict)
    dimm_flippy: dict[str, bool] = field(default_factory=dict)
    dram_aliases: dict[str, str] = field(default_factory=dict)

    def get_microarch(self, name: str) -> MicroArchParams:
        try:
            return self.microarch[name]
        except KeyError:
            raise InvalidConfigError(
                f"unknown microarchitecture {name!r}; known: {sorted(self.microarch)}"
            ) from None

    def get_dram(self, name: str) -> DramGeometry:
        name = self.dram_aliases.get(name, name)
        try:
            return self.dram[name]
        except KeyError:
            raise InvalidConfigError(
                f"unknown DRAM config {name!r}; known: "
                f"{sorted(self.dram) + sorted(self.dram_aliases)}") from None

    def get_cache(self, name: str) -> CacheGeometry:
        try:
            return self.cache[name]
        except KeyError:
            raise InvalidConfigError(
                f"unknown cache geometry {name!r}; known: {sorted(self.cache)}"
            ) from None


def _bits_to_mask(text: str) -> int:
    mask = 0
    for part in text.split(","):
        mask |= 1 << int(part.strip())
    return mask


def _parse_microarch(name: str, section) -> MicroArchParams:
    kwargs = {}
    for key in ("base_load_cycles", "store_4k_class_cycles", "load_4k_class_cycles",
                "peak_cycles", "plateau_cycles"):
        if key in section:
            kwargs[key] = float(section[key])
    drain = {}
    for kind in ("nop", "add", "leal"):
        key = f"drain_{kind}"
        if key in section:
            drain[kind] = float(section[key])
    if drain:
        base = MicroArchParams(name, 1, 0).drain_per_instruction
        base.update(drain)
        kwargs["drain_per_instruction"] = base
    return MicroArchParams(
        name=name,
        store_buffer_size=int(section["store_buffer_size"]),
        steps=int(section["steps"]),
        **kwargs,
    )


def _parse_dram(name: str, section) -> DramGeometry:
    total = int(section["mapping_bits_total"])
    unknown = max(0, total - 20)
    masks = []
    i = 0
    while f"bank_mask_{i}" in section:
        masks.append(_bits_to_mask(section[f"bank_mask_{i}"]))
        i += 1
    if not masks:
        masks = list(make_bank_masks(unknown))
    return DramGeometry(
        name=name,
        mapping_masks=tuple(masks),
        mapping_bits_total=total,
        row_size_bytes=int(section.get("row_size_bytes", 8192)),
        row_offset_bytes=int(section.get("row_offset_bytes", 262144)),
    )


def _parse_cache(name: str, section) -> CacheGeometry:
    masks = []
    i = 0
    while f"slice_mask_{i}" in section:
        masks.append(_bits_to_mask(section[f"slice_mask_{i}"]))
        i += 1
    return CacheGeometry(
        name=name,
        sets_per_slice=int(section["sets_per_slice"]),
        ways=int(section["ways"]),
        slices=int(section["slices"]),
        slice_hash=tuple(masks),
    )


def load_presets(extra_path: str | None = None) -> Presets:
    parser = configparser.ConfigParser()
    with resources.files("storeleak.data").joinpath("presets.ini").open() as fh:
        parser.read_file(fh)
    if extra_path is not None:
        if not parser.read(extra_path):
            raise InvalidConfigError(f"cannot read config file {extra_path!r}")

    presets = Presets()
    for section_name in parser.sections():
        section = parser[section_name]
        kind, _, name = section_name.partition(":")
        if not name:
            raise InvalidConfigError(f"malformed preset section [{section_name}]")
        if kind == "microarch":
            presets.microarch[name] = _parse_microarch(name, section)
        elif kind == "dram":
            presets.dram[name] = _parse_dram(name, section)
            if "alias" in section:
                presets.dram_aliases[section["alias"].strip()] = name
        elif kind == "cache":
            presets.cache[name] = _parse_cache(name, section)
        elif kind == "dimm":
            presets.dimm_flippy[name] = section.getboolean("flippy")
        else:
            raise InvalidConfigError(f"unknown preset kind {kind!r}")
    return presets


_DEFAULT: Presets | None = None


def default_presets() -> Presets:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_presets()
    return _DEFAULT
