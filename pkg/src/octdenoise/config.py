"""INI run configuration with typed defaults and ``--section.key=value`` overrides."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


# section -> key -> (parser, default text)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "phantom": {
        "n_subjects": (int, "20"),
        "scans_per_eye": (int, "5"),
        "train_fraction": (float, "0.6"),
        "height": (int, "496"),
        "width": (int, "384"),
        "texture_sigma": (float, "0.03"),
        "curve_amplitude": (float, "0.02"),
        "cup_depth": (float, "0.06"),
        "lamina": (_bool, "true"),
        "vessel_shadows": (_bool, "true"),
    },
    "augment": {
        "factor": (int, "10"),
        "noise_mode": (str, "calibrated"),
        "target_snr_db": (float, "4.0"),
        "sigma": (float, "1.0"),
        "mu": (float, "0.0"),
        "clip": (_bool, "true"),
        "grid_spacing": (int, "32"),
        "displacement_sigma": (float, "4.0"),
        "rotation_degrees": (float, "10.0"),
        "occlusion_count": (int, "10"),
        "patch_height": (int, "60"),
        "patch_width": (int, "20"),
        "factor_min": (float, "0.2"),
        "factor_max": (float, "0.8"),
    },
    "network": {
        "base_filters": (int, "64"),
        "kernel": (int, "3"),
        "levels": (int, "3"),
        "down_dilations": (_ints, "1,2,4"),
        "up_dilations": (_ints, "4,4,1"),
        "width_scale": (float, "1.0"),
        "skip_mode": (str, "add"),
    },
    "train": {
        "learning_rate": (float, "1e-4"),
        "adam_beta1": (float, "0.9"),
        "adam_beta2": (float, "0.999"),
        "adam_epsilon": (float, "1e-8"),
        "batch_size": (int, "4"),
        "epochs": (int, "10"),
        "checkpoint_every": (int, "0"),
        "patch_height": (int, "0"),
        "patch_width": (int, "0"),
    },
    "metrics": {
        "roi_seed": (int, "0"),
        "rois_per_tissue": (int, "25"),
        "cnr_variant": (str, "standard"),
        "roi_file": (str, ""),
        "montages": (int, "4"),
    },
}


@dataclass
class RunConfig:
    values: Dict[str, Dict[str, str]] = field(default_factory=dict)
    seed: int = 0
    jobs: int = 1

    def get(self, section: str, key: str):
        parser, default = SCHEMA[section][key]
        text = self.values.get(section, {}).get(key, default)
        try:
            return parser(text)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}={text!r}: {exc}") from exc

    def section(self, name: str) -> dict:
        return {key: self.get(name, key) for key in SCHEMA[name]}

    def set(self, section: str, key: str, value: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        self.values.setdefault(section, {})[key] = value
        self.get(section, key)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser["run"] = {"seed": str(self.seed), "jobs": str(self.jobs)}
        for section, keys in SCHEMA.items():
            parser[section] = {key: self.values.get(section, {}).get(key, default)
                               for key, (_, default) in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                seed: Optional[int] = None, jobs: Optional[int] = None) -> RunConfig:
    """Merge a config file and ``section.key=value`` overrides; unknown keys are errors."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser[section].items():
                if section == "run" and key in ("seed", "jobs"):
                    setattr(cfg, key, int(value))
                else:
                    cfg.set(section, key, value)
    for item in overrides:
        dotted, sep, value = item.partition("=")
        section, dot, key = dotted.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        cfg.set(section, key, value)
    if seed is not None:
        cfg.seed = seed
    if jobs is not None:
        cfg.jobs = jobs
    return cfg


def split_overrides(argv: List[str]) -> tuple:
    """Separate ``--section.key=value`` (or ``--section.key value``) tokens."""
    rest, overrides = [], []
    i = 0
    while i < len(argv):
        tok = argv[i]
        name = tok[2:].split("=", 1)[0] if tok.startswith("--") else ""
        if "." in name:
            if "=" in tok:
                overrides.append(tok[2:])
            elif i + 1 < len(argv):
                overrides.append(f"{name}={argv[i + 1]}")
                i += 1
            else:
                raise ConfigError(f"missing value for {tok}")
        else:
            rest.append(tok)
        i += 1
    return rest, overrides
