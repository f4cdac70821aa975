"""Flat key/value experiment configuration.

Format: one ``section.key = value`` per line, ``#`` comments, blank lines
ignored. Unknown keys are rejected to catch typos early. The full schema
is documented in docs/formats.md.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .backend import BackendConfig
from .corruption import KINDS, CorruptionSpec
from .errors import ConfigError
from .risk import RiskConfig
from .scene import TRAJECTORY_KINDS, ScenarioConfig

_SCENE_KEYS = {
    "seed": int, "trajectory": str, "frames": int, "rate_hz": float,
    "landmarks": int, "features_per_frame": int, "baseline_m": float,
    "focal_px": float, "image_width": int, "image_height": int,
    "noise_px": float, "scale_m": float, "min_depth": float,
    "max_depth": float,
}
_BACKEND_KEYS = {
    "window": int, "max_iterations": int, "lm_initial": float,
    "sigma_px": float,
}
_RISK_KEYS = {
    "lambda": float, "clamp": float, "norm_window": int, "warmup": int,
    "smooth_window": int, "trend_frames": int, "trend_threshold": float,
    "min_features": int, "outlier_gate_px": float,
}
_CORRUPT_KEYS = {
    "kind": str, "severity": int, "seed": int, "window_start": int,
    "window_end": int, "level": float,
}
_GRID_KEYS = {
    "kinds": str, "severities": str, "seeds": str, "window_start": int,
    "window_end": int,
}
_EVAL_KEYS = {
    "label_threshold_m": float, "label_horizon": int, "fail_error_m": float,
    "policy_ks": str,
}
_RUN_KEYS = {"tag": str, "log_hessian": str}

_SECTIONS = {
    "scene": _SCENE_KEYS, "backend": _BACKEND_KEYS, "risk": _RISK_KEYS,
    "corrupt": _CORRUPT_KEYS, "grid": _GRID_KEYS, "eval": _EVAL_KEYS,
    "run": _RUN_KEYS,
}


def parse_config_text(text: str) -> dict[str, object]:
    """Parse and type-check the flat key/value format."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if "." not in key:
            raise ConfigError(f"line {lineno}: key must be section.name")
        section, _, name = key.partition(".")
        schema = _SECTIONS.get(section)
        if schema is None:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        if name not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        caster = schema[name]
        try:
            out[key] = caster(value)
        except ValueError:
            raise ConfigError(
                f"line {lineno}: cannot parse {value!r} as "
                f"{caster.__name__}")
    return out


def load_config(path: str) -> dict[str, object]:
    try:
        with open(path, encoding="utf-8") as fp:
            return parse_config_text(fp.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).replace(",", " ").split()]


def _str_list(text: str) -> list[str]:
    return [x for x in str(text).replace(",", " ").split()]


@dataclass
class RunPlan:
    """Everything one run needs; built from a config mapping."""

    scenario: ScenarioConfig
    backend: BackendConfig
    risk: RiskConfig
    corruption: CorruptionSpec | None = None
    tag: str = "run"
    log_hessian: bool = False
    label_threshold_m: float = 1.0
    label_horizon: int = 50
    fail_error_m: float = 5.0
    policy_ks: list[int] = field(default_factory=lambda: [1, 3, 5, 10, 20])


def plan_from_config(cfg: dict[str, object],
                     seed_override: int | None = None) -> RunPlan:
    def get(key, default):
        return cfg.get(key, default)

    seed = int(get("scene.seed", 0))
    if seed_override is not None:
        seed = seed_override
    traj = str(get("scene.trajectory", "circle"))
    if traj not in TRAJECTORY_KINDS:
        raise ConfigError(f"scene.trajectory must be one of "
                          f"{TRAJECTORY_KINDS}, got {traj!r}")
    scenario = ScenarioConfig(
        seed=seed,
        trajectory_kind=traj,
        num_frames=int(get("scene.frames", 200)),
        frame_rate_hz=float(get("scene.rate_hz", 20.0)),
        num_landmarks=int(get("scene.landmarks", 500)),
        features_per_frame_target=int(get("scene.features_per_frame", 200)),
        stereo_baseline=float(get("scene.baseline_m", 0.11)),
        focal_length=float(get("scene.focal_px", 525.0)),
        image_width=int(get("scene.image_width", 640)),
        image_height=int(get("scene.image_height", 480)),
        measurement_noise_px=float(get("scene.noise_px", 0.5)),
        trajectory_scale=float(get("scene.scale_m", 5.0)),
        min_depth=float(get("scene.min_depth", 0.3)),
        max_depth=float(get("scene.max_depth", 60.0)),
    )
    try:
        scenario.validate()
    except Exception as exc:
        raise ConfigError(str(exc))
    backend = BackendConfig(
        window_size=int(get("backend.window", 8)),
        max_iterations=int(get("backend.max_iterations", 3)),
        lm_initial=float(get("backend.lm_initial", 1e-4)),
        sigma_px=float(get("backend.sigma_px",
                           max(scenario.measurement_noise_px, 1e-3))),
    )
    risk = RiskConfig(
        lambda_weight=float(get("risk.lambda", 1.0)),
        clamp=float(get("risk.clamp", 3.0)),
        norm_window=int(get("risk.norm_window", 75)),
        warmup_samples=int(get("risk.warmup", 10)),
        smooth_window=int(get("risk.smooth_window", 7)),
        trend_frames=int(get("risk.trend_frames", 4)),
        trend_threshold=float(get("risk.trend_threshold", 0.0)),
        min_features=int(get("risk.min_features", 20)),
        outlier_gate_px=float(get("risk.outlier_gate_px", 4.0)),
    )
    corruption = None
    if "corrupt.kind" in cfg:
        kind = str(cfg["corrupt.kind"])
        if kind != "none":
            if kind not in KINDS:
                raise ConfigError(f"corrupt.kind must be one of {KINDS} "
                                  f"or none, got {kind!r}")
            window = None
            if "corrupt.window_start" in cfg or "corrupt.window_end" in cfg:
                window = (int(get("corrupt.window_start", 0)),
                          int(get("corrupt.window_end",
                                  scenario.num_frames)))
            corruption = CorruptionSpec(
                kind=kind,
                severity=int(get("corrupt.severity", 0)),
                seed=int(get("corrupt.seed", seed)),
                window=window,
                level_override=(float(cfg["corrupt.level"])
                                if "corrupt.level" in cfg else None),
            )
            try:
                corruption.validate(scenario.num_frames)
            except Exception as exc:
                raise ConfigError(str(exc))
    tag = str(get("run.tag", "run"))
    if corruption is not None and tag == "run":
        tag = corruption.tag()
    return RunPlan(
        scenario=scenario,
        backend=backend,
        risk=risk,
        corruption=corruption,
        tag=tag,
        log_hessian=str(get("run.log_hessian", "false")).lower()
        in ("1", "true", "yes"),
        label_threshold_m=float(get("eval.label_threshold_m", 1.0)),
        label_horizon=int(get("eval.label_horizon", 50)),
        fail_error_m=float(get("eval.fail_error_m", 5.0)),
        policy_ks=_int_list(get("eval.policy_ks", "1 3 5 10 20")),
    )


def grid_from_config(cfg: dict[str, object]) -> list[CorruptionSpec]:
    """Expand grid.* keys into corruption specs (product order)."""
    from .corruption import corruption_grid
    kinds = _str_list(cfg.get("grid.kinds", " ".join(KINDS)))
    for k in kinds:
        if k not in KINDS:
            raise ConfigError(f"grid.kinds: unknown kind {k!r}")
    severities = _int_list(cfg.get("grid.severities", "0 1 2 3 4"))
    seeds = _int_list(cfg.get("grid.seeds", "1 2 3"))
    window = None
    if "grid.window_start" in cfg or "grid.window_end" in cfg:
        window = (int(cfg.get("grid.window_start", 0)),
                  int(cfg.get("grid.window_end", 10 ** 9)))
    return corruption_grid(kinds, severities, seeds, window)
