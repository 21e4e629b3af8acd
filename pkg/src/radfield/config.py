"""Run configuration: a line-based "key = value" format with [section]
headers. Unknown sections or keys are rejected so typos cannot silently fall
back to defaults; command-line flags override file values. The effective
configuration is snapshotted next to every run's outputs for provenance.
"""

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .field import FieldConfig
from .geometry import CameraIntrinsics
from .losses import LossGains
from .optimizer import TrainConfig
from .scenes import SCENE_PRESETS, RingSpec

_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _parse_bool(raw):
    try:
        return _BOOL[raw.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {raw!r}") from None


# section -> key -> (converter, default)
SCHEMA = {
    "camera": {
        "width": (int, 32),
        "height": (int, 32),
        "focal": (float, 35.0),
        "principal_x": (float, None),
        "principal_y": (float, None),
        "near": (float, 1.0),
        "far": (float, 9.0),
    },
    "scene": {
        "preset": (str, "tri-sphere"),
        "n_views": (int, 3),
        "ring_radius": (float, 4.0),
        "ring_span_deg": (float, 45.0),
        "ring_elevation": (float, 0.4),
        "test_stride": (int, 8),
        "depth_sigma": (float, 0.05),
        "outlier_rate": (float, 0.0),
        "gt_samples": (int, 4096),
    },
    "field": {
        "l_pos": (int, 6),
        "l_dir": (int, 2),
        "hidden_width": (int, 64),
        "hidden_layers": (int, 3),
        "skip_layer": (int, 1),
        "color_hidden": (int, 32),
        "pos_scale": (float, None),  # default 2 / camera.far
    },
    "train": {
        "epochs": (int, 200),
        "max_iters": (int, -1),  # negative = epoch-driven, 0 = zero iterations
        "batch_rays": (int, 128),
        "n_coarse": (int, 16),
        "n_fine": (int, 24),
        "learning_rate": (float, 5e-4),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "seed": (int, 0),
        "deterministic": (_parse_bool, True),
        "eval_interval": (int, 10),
        "sigma_default": (float, 1.0),
        "use_confidence": (_parse_bool, True),
        "threads": (int, 1),
    },
    "loss": {
        "k_color": (float, 1.0),
        "k_density": (float, 1.0),
        "k_depth": (float, 1.0),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)  # (section, key) -> value

    def get(self, section, key):
        return self.values[(section, key)]

    def set(self, section, key, value):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown configuration key [{section}] {key}")
        self.values[(section, key)] = value

    def intrinsics(self):
        px = self.get("camera", "principal_x")
        py = self.get("camera", "principal_y")
        pp = None if px is None or py is None else (px, py)
        return CameraIntrinsics(
            width=self.get("camera", "width"), height=self.get("camera", "height"),
            focal=self.get("camera", "focal"), principal_point=pp,
        )

    def scene(self):
        preset = self.get("scene", "preset")
        if preset not in SCENE_PRESETS:
            raise ConfigError(
                f"unknown scene preset {preset!r}; known: {sorted(SCENE_PRESETS)}"
            )
        return SCENE_PRESETS[preset]()

    def ring(self):
        return RingSpec(
            radius=self.get("scene", "ring_radius"),
            span_deg=self.get("scene", "ring_span_deg"),
            elevation=self.get("scene", "ring_elevation"),
        )

    def field_config(self):
        pos_scale = self.get("field", "pos_scale")
        if pos_scale is None:
            pos_scale = 2.0 / self.get("camera", "far")
        return FieldConfig(
            l_pos=self.get("field", "l_pos"), l_dir=self.get("field", "l_dir"),
            hidden_width=self.get("field", "hidden_width"),
            hidden_layers=self.get("field", "hidden_layers"),
            skip_layer=self.get("field", "skip_layer"),
            color_hidden=self.get("field", "color_hidden"), pos_scale=pos_scale,
        )

    def gains(self):
        return LossGains(
            k_color=self.get("loss", "k_color"),
            k_density=self.get("loss", "k_density"),
            k_depth=self.get("loss", "k_depth"),
        )

    def train_config(self):
        t = {k: self.get("train", k) for k in SCHEMA["train"]}
        if t["max_iters"] < 0:
            t["max_iters"] = None
        return TrainConfig(gains=self.gains(), **t)

    def snapshot(self):
        """Canonical serialization: every effective value, sorted, diff-able."""
        lines = []
        for section in sorted(SCHEMA):
            lines.append(f"[{section}]")
            for key in sorted(SCHEMA[section]):
                value = self.values[(section, key)]
                if value is None:
                    continue
                if isinstance(value, bool):
                    value = "true" if value else "false"
                elif isinstance(value, float):
                    value = repr(value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def default_config():
    cfg = RunConfig()
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            cfg.values[(section, key)] = default
    return cfg


def parse_config_text(text, path="<config>"):
    cfg = default_config()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA[section]:
            raise ConfigError(f"{path}:{lineno}: unknown key [{section}] {key}")
        conv = SCHEMA[section][key][0]
        try:
            cfg.values[(section, key)] = conv(value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return cfg


def load_config(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"configuration file {path} does not exist")
    return parse_config_text(p.read_text(encoding="utf-8"), path=str(path))
