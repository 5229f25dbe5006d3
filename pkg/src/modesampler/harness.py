"""Experiment harness: config parsing and validation, benchmark presets,
and the end-to-end runner that writes diagnostics, regeneration-log,
registry, audit, and summary files.

Config files use bracketed section headers with key = value lines; the
canonical name of a key is section.key and fully-dotted keys are accepted
at top level.  Unknown keys, type mismatches, and range violations are
rejected with the offending key and line number.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .diagnostics import recov_with_fallback, rem_with_fallback
from .hmc import HmcParams, tune_step_size
from .modefinder import (ModeSearchConfig, fictitious_mode_audit,
                         save_registry)
from .numerics import bfgs_maximize
from .regeneration import Schedule, SamplerSettings, run_sampler
from .targets import (gmm_generate_benchmark, load_gmm, load_sensor,
                      sensor_generate_instance)


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class _Key:
    convert: type | object
    default: object
    check: Optional[object]
    describe: str


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _fraction(v):
    return 0.0 <= v <= 1.0


KEYS = {
    "target.preset": _Key(str, "", None, "benchmark preset id (see `presets`)"),
    "target.file": _Key(str, "", None, "path to a serialized target instance"),
    "target.seed": _Key(int, 1, None, "instance-generation seed"),
    "run.sampler": _Key(str, "whmc", lambda v: v in ("hmc", "whmc"),
                        "transition kernel: hmc | whmc"),
    "run.schedule": _Key(str, "all-modes-first",
                         lambda v: v in ("all-modes-first", "on-the-fly",
                                         "forced-update"),
                         "mode-search schedule"),
    "run.period": _Key(int, 0, _non_negative,
                       "forced-update: search every this many pooled samples"),
    "run.chains": _Key(int, 4, _positive, "number of chains (round-robin)"),
    "run.samples": _Key(int, 20000, _positive, "samples per chain"),
    "run.budget_seconds": _Key(float, 60.0, _positive,
                               "real-time cap; truncates overlong runs"),
    "run.seed": _Key(int, 1, None, "master RNG seed"),
    "run.out": _Key(str, "", None, "output directory (default derived)"),
    "run.search_budget": _Key(int, 10, _positive,
                              "attempts per full mode-search pass"),
    "run.regen_search_budget": _Key(int, 1, _positive,
                                    "attempts per regeneration trigger"),
    "run.regen_search_cooldown": _Key(int, 100, _positive,
                                      "min pooled samples between regen searches"),
    "hmc.step_size": _Key(float, 0.5, _positive, "leapfrog step size"),
    "hmc.leapfrog_steps": _Key(int, 10, _positive, "leapfrog steps per proposal"),
    "hmc.jitter": _Key(float, 0.1, lambda v: 0.0 <= v < 1.0,
                       "uniform step-size jitter fraction"),
    "hmc.tune": _Key(_bool, True, None, "tune step size before sampling"),
    "hmc.tune_goal": _Key(float, 0.65, lambda v: 0.0 < v < 1.0,
                          "target acceptance rate"),
    "hmc.tune_steps": _Key(int, 1500, _positive, "tuning step budget"),
    "wormhole.F": _Key(float, 0.1, _positive, "wormhole influence factor"),
    "wormhole.eps_w": _Key(float, 1e-4, lambda v: 0.0 < v <= 1.0,
                           "intermodal contraction (squared factor)"),
    "wormhole.jump_prob": _Key(float, 0.68, _fraction,
                               "per-step trajectory routing probability"),
    "wormhole.logdet_correction": _Key(_bool, True, None,
                                       "include metric volume term in energy"),
    "modefinder.alpha": _Key(float, 0.0, _non_negative,
                             "conformal factor scale (0 = 1/dim)"),
    "modefinder.geodesic_steps": _Key(int, 300, _positive,
                                      "integration steps per geodesic"),
    "modefinder.step_scale": _Key(float, 0.005, _positive,
                                  "geodesic step as fraction of box diameter"),
    "modefinder.restarts": _Key(int, 16, _positive,
                                "geodesic restart cap per attempt"),
    "modefinder.regen_restarts": _Key(int, 6, _positive,
                                      "restart cap for regeneration searches"),
    "modefinder.confidence": _Key(float, 0.4, lambda v: 0.0 < v <= 1.0,
                                  "confident-start threshold fraction"),
    "modefinder.floor_rel": _Key(float, 1e-12, _positive,
                                 "relative floor under the subtracted density"),
    "modefinder.mode_tol": _Key(float, 1e-6, _positive,
                                "gradient tolerance declaring a mode"),
    "modefinder.dedup_factor": _Key(float, 0.5, _positive,
                                    "dedup radius as fraction of local scale"),
    "modefinder.model": _Key(str, "gaussian",
                             lambda v: v in ("gaussian", "kde"),
                             "per-mode density model"),
    "modefinder.kde_samples": _Key(int, 500, _positive,
                                   "mode-local samples for the KDE model"),
    "regeneration.enabled": _Key(_bool, True, None,
                                 "check regeneration at each step"),
    "regeneration.c_window": _Key(int, 200, _positive,
                                  "recent-ratio window sizing the constant c"),
    "diagnostics.stride": _Key(int, 200, _positive,
                               "pooled samples between diagnostics records"),
    "diagnostics.cost_unit": _Key(float, 2e-6, _positive,
                                  "deterministic seconds per target evaluation"),
}

PRESETS = {
    "gmm-d2-k2-equal": {
        "target.preset": "gmm-d2-k2-equal", "hmc.step_size": 0.7,
        "run.chains": 4},
    "gmm-d10-k5-equal": {
        "target.preset": "gmm-d10-k5-equal", "hmc.step_size": 0.6,
        "run.chains": 4},
    "gmm-d10-k5-prop": {
        "target.preset": "gmm-d10-k5-prop", "hmc.step_size": 0.6,
        "run.chains": 4},
    "gmm-d10-k10-equal": {"target.preset": "gmm-d10-k10-equal",
                          "hmc.step_size": 0.6, "run.chains": 4},
    "gmm-d10-k10-prop": {"target.preset": "gmm-d10-k10-prop",
                         "hmc.step_size": 0.6, "run.chains": 4},
    "gmm-d20-k10-equal": {"target.preset": "gmm-d20-k10-equal",
                          "hmc.step_size": 0.5, "run.chains": 4},
    "gmm-d20-k10-prop": {"target.preset": "gmm-d20-k10-prop",
                         "hmc.step_size": 0.5, "run.chains": 4},
    "gmm-d20-k20-equal": {"target.preset": "gmm-d20-k20-equal",
                          "hmc.step_size": 0.5, "run.chains": 4},
    "gmm-d40-k10-equal": {"target.preset": "gmm-d40-k10-equal",
                          "hmc.step_size": 0.4, "run.chains": 4},
    "gmm-d40-k10-prop": {"target.preset": "gmm-d40-k10-prop",
                         "hmc.step_size": 0.4, "run.chains": 4},
    "gmm-d100-k10-equal": {"target.preset": "gmm-d100-k10-equal",
                           "hmc.step_size": 0.3, "run.chains": 4},
    "gmm-d100-k10-prop": {"target.preset": "gmm-d100-k10-prop",
                          "hmc.step_size": 0.3, "run.chains": 4},
    "sensor-ns3": {
        "target.preset": "sensor-ns3", "run.chains": 2,
        "hmc.step_size": 0.014, "hmc.leapfrog_steps": 10, "hmc.tune": False,
        "wormhole.F": 0.01, "wormhole.jump_prob": 0.68,
        "modefinder.model": "kde", "run.samples": 5000},
    "sensor-ns8": {
        "target.preset": "sensor-ns8", "run.chains": 2,
        "hmc.step_size": 0.014, "hmc.leapfrog_steps": 10, "hmc.tune": False,
        "wormhole.F": 0.01, "wormhole.jump_prob": 0.68,
        "modefinder.model": "kde", "run.samples": 5000},
}

PRESET_NOTES = {
    "gmm-d2-k2-equal": "Gaussian mixture, D=2, K=2, equal weights (desk scale)",
    "gmm-d10-k5-equal": "Gaussian mixture, D=10, K=5, equal weights (desk scale)",
    "gmm-d10-k5-prop": "Gaussian mixture, D=10, K=5, weights w_k ~ k/K (desk)",
    "gmm-d10-k10-equal": "Gaussian mixture, D=10, K=10, equal weights",
    "gmm-d10-k10-prop": "Gaussian mixture, D=10, K=10, weights w_k ~ k/K",
    "gmm-d20-k10-equal": "Gaussian mixture, D=20, K=10, equal weights",
    "gmm-d20-k10-prop": "Gaussian mixture, D=20, K=10, weights w_k ~ k/K",
    "gmm-d20-k20-equal": "Gaussian mixture, D=20, K=20, equal weights",
    "gmm-d40-k10-equal": "Gaussian mixture, D=40, K=10, equal weights",
    "gmm-d40-k10-prop": "Gaussian mixture, D=40, K=10, weights w_k ~ k/K",
    "gmm-d100-k10-equal": "Gaussian mixture, D=100, K=10, equal weights",
    "gmm-d100-k10-prop": "Gaussian mixture, D=100, K=10, weights w_k ~ k/K",
    "sensor-ns3": "sensor network, 3 sensors, R=0.3, noise=0.02 (desk scale)",
    "sensor-ns8": "sensor network, 8 sensors, R=0.3, noise=0.02",
}


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values


def _parse_lines(text: str):
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        dotted = key if "." in key else (f"{section}.{key}" if section else key)
        yield dotted, value.strip(), lineno


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully validate a config, applying preset and global defaults."""
    given = {}
    for dotted, value, lineno in _parse_lines(text):
        if dotted not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {dotted!r}")
        spec = KEYS[dotted]
        try:
            converted = spec.convert(value)
        except ValueError:
            raise ConfigError(
                f"line {lineno}: key {dotted!r} expects "
                f"{getattr(spec.convert, '__name__', 'value')}, got {value!r}") from None
        if spec.check is not None and not spec.check(converted):
            raise ConfigError(f"line {lineno}: key {dotted!r} value {value!r} "
                              "is out of range")
        given[dotted] = converted

    preset_name = given.get("target.preset", "")
    if preset_name:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}")
        for key, value in PRESETS[preset_name].items():
            given.setdefault(key, value)

    values = {key: spec.default for key, spec in KEYS.items()}
    values.update(given)
    if not values["target.preset"] and not values["target.file"]:
        raise ConfigError("config needs target.preset or target.file")
    if values["run.schedule"] == "forced-update" and values["run.period"] < 1:
        raise ConfigError("forced-update schedule needs run.period >= 1")
    return ExperimentConfig(values)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Full config text; parse(serialize(cfg)) == cfg."""
    sections: dict[str, list[str]] = {}
    for dotted in KEYS:
        section, _, key = dotted.partition(".")
        value = cfg.values[dotted]
        if isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        sections.setdefault(section, []).append(f"{key} = {text}")
    out = []
    for section, lines in sections.items():
        out.append(f"[{section}]")
        out.extend(lines)
        out.append("")
    return "\n".join(out)


def explain_defaults() -> str:
    lines = ["key                                 default        description",
             "-" * 78]
    for dotted, spec in KEYS.items():
        default = spec.default
        if isinstance(default, bool):
            default = "true" if default else "false"
        lines.append(f"{dotted:<35} {str(default):<14} {spec.describe}")
    return "\n".join(lines)


def list_presets() -> str:
    lines = ["preset               settings", "-" * 70]
    for name in PRESETS:
        lines.append(f"{name:<20} {PRESET_NOTES[name]}")
    return "\n".join(lines)


def _parse_preset_target(preset: str, seed: int):
    if preset.startswith("gmm-"):
        parts = preset.split("-")
        dim = int(parts[1][1:])
        k = int(parts[2][1:])
        scheme = "equal" if parts[3] == "equal" else "proportional"
        return gmm_generate_benchmark(dim, k, scheme, seed=seed)
    if preset.startswith("sensor-ns"):
        n = int(preset.removeprefix("sensor-ns"))
        # three pinned anchors break the global isometry of the bare
        # pairwise posterior so its modes are isolated points
        return sensor_generate_instance(n, detection_range=0.3, noise=0.02,
                                        seed=seed, n_anchors=3)
    raise ConfigError(f"unknown preset {preset!r}")


def build_target(cfg: ExperimentConfig):
    """Target instance plus the label recorded in output files."""
    if cfg["target.file"]:
        path = cfg["target.file"]
        with open(path) as fh:
            head = fh.read(512)
        target = load_gmm(path) if "[gmm]" in head else load_sensor(path)
        return target, f"file:{path}"
    preset = cfg["target.preset"]
    seed = cfg["target.seed"]
    return _parse_preset_target(preset, seed), f"preset:{preset}:{seed}"


def target_from_label(label: str):
    """Rebuild a target from a registry-file label."""
    if label.startswith("file:"):
        path = label.removeprefix("file:")
        with open(path) as fh:
            head = fh.read(512)
        return load_gmm(path) if "[gmm]" in head else load_sensor(path)
    if label.startswith("preset:"):
        _, preset, seed = label.split(":")
        return _parse_preset_target(preset, int(seed))
    raise ConfigError(f"unrecognized target label {label!r}")


def to_settings(cfg: ExperimentConfig) -> tuple[SamplerSettings, Schedule]:
    hmc = HmcParams(step_size=cfg["hmc.step_size"],
                    n_steps=cfg["hmc.leapfrog_steps"],
                    jitter=cfg["hmc.jitter"])
    search = ModeSearchConfig(
        alpha=cfg["modefinder.alpha"],
        geodesic_steps=cfg["modefinder.geodesic_steps"],
        step_scale=cfg["modefinder.step_scale"],
        restarts=cfg["modefinder.restarts"],
        regen_restarts=cfg["modefinder.regen_restarts"],
        confidence=cfg["modefinder.confidence"],
        floor_rel=cfg["modefinder.floor_rel"],
        mode_tol=cfg["modefinder.mode_tol"],
        model_kind=cfg["modefinder.model"],
        kde_samples=cfg["modefinder.kde_samples"])
    settings = SamplerSettings(
        hmc=hmc, sampler=cfg["run.sampler"],
        eps_w=cfg["wormhole.eps_w"], influence=cfg["wormhole.F"],
        jump_prob=cfg["wormhole.jump_prob"],
        logdet_correction=cfg["wormhole.logdet_correction"],
        search=search, regen_enabled=cfg["regeneration.enabled"],
        c_window=cfg["regeneration.c_window"],
        diag_stride=cfg["diagnostics.stride"],
        cost_unit=cfg["diagnostics.cost_unit"])
    schedule = Schedule(mode=cfg["run.schedule"], period=cfg["run.period"],
                        search_budget=cfg["run.search_budget"],
                        regen_search_budget=cfg["run.regen_search_budget"],
                        regen_search_cooldown=cfg["run.regen_search_cooldown"])
    return settings, schedule


def _tuned_params(cfg: ExperimentConfig, target, settings: SamplerSettings):
    if not cfg["hmc.tune"]:
        return settings.hmc
    if target.search_box is not None:
        lo, hi = target.search_box
        center = 0.5 * (np.asarray(lo, float) + np.asarray(hi, float))
    else:
        center = np.zeros(target.dim)
    try:
        start = bfgs_maximize(target.log_density, center,
                              gradient=target.gradient, tol=1e-4,
                              max_iter=200).maximizer
    except ValueError:
        start = center
    result = tune_step_size(target, settings.hmc, goal=cfg["hmc.tune_goal"],
                            trial_steps=cfg["hmc.tune_steps"],
                            seed=cfg["run.seed"] ^ 0x5EED, start=start)
    return result.params


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> dict:
    """Execute one experiment and write its artifact files.

    Returns a summary dict (also written to summary.txt).  Deterministic in
    the seed for single-worker runs; the budget cap is best-effort only.
    """
    start = time.perf_counter()
    target, label = build_target(cfg)
    settings, schedule = to_settings(cfg)
    settings = replace(settings, hmc=_tuned_params(cfg, target, settings))

    out = out_dir or cfg["run.out"]
    if not out:
        preset = cfg["target.preset"] or "custom"
        out = f"runs/{preset}-{cfg['run.schedule']}-seed{cfg['run.seed']}"
    os.makedirs(out, exist_ok=True)

    run = run_sampler(target, schedule, settings, chains=cfg["run.chains"],
                      n_samples=cfg["run.samples"], seed=cfg["run.seed"],
                      budget_seconds=cfg["run.budget_seconds"])

    run.series.to_csv(os.path.join(out, "diagnostics.csv"))
    with open(os.path.join(out, "regen_log.csv"), "w") as fh:
        fh.write("chain,step,r,triggered,modes_before,modes_after\n")
        for e in run.events:
            fh.write(f"{e.chain},{e.step},{e.r:.9g},{int(e.triggered)},"
                     f"{e.modes_before},{e.modes_after}\n")
    save_registry(os.path.join(out, "registry.txt"), run.registry, label)

    audit_rows = []
    if len(run.registry):
        audit_rows = fictitious_mode_audit(target, run.registry)
    write_audit_csv(os.path.join(out, "audit.csv"), audit_rows)

    pooled, tags = run.pooled()
    summary = {
        "target": label,
        "sampler": cfg["run.sampler"],
        "schedule": cfg["run.schedule"],
        "chains": cfg["run.chains"],
        "samples_per_chain": int(pooled.shape[0] / cfg["run.chains"]),
        "seed": cfg["run.seed"],
        "modes_found": len(run.registry),
        "n_bfgs": run.registry.n_bfgs,
        "n_bfgs_at_last_discovery": (
            run.registry.records[-1].n_bfgs_at_discovery
            if run.registry.records else 0),
        "regen_events": sum(1 for e in run.events if e.chain >= 0),
        "regen_mean_r": round(run.regen_mean_r, 6),
        "acceptance_mean": round(float(np.mean(run.acceptance_rates)), 4),
        "truncated": run.truncated,
        "wall_seconds": round(time.perf_counter() - start, 3),
        "clock_seconds": round(run.clock_seconds, 6),
    }
    if target.reference_moments is not None and pooled.shape[0] >= 2:
        mu_star, sig_star = target.reference_moments
        rem_v, f1 = rem_with_fallback(pooled.mean(axis=0), mu_star)
        recov_v, f2 = recov_with_fallback(np.cov(pooled, rowvar=False), sig_star)
        summary["final_rem"] = round(rem_v, 6)
        summary["final_recov"] = round(recov_v, 6)
        summary["error_fallback_flagged"] = f1 or f2
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        for key, value in summary.items():
            fh.write(f"{key} = {value}\n")
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(serialize_config(cfg))
    return summary


def write_audit_csv(path, entries) -> None:
    with open(path, "w") as fh:
        fh.write("k,delta_x,cumulative\n")
        for e in entries:
            delta = f"{e.displacement:.9g}" if e.converged else "nan"
            fh.write(f"{e.index},{delta},{e.cumulative:.9g}\n")
