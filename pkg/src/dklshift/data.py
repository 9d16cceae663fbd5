"""Synthetic shifted-cohort generator, preprocessing, and file formats.

A cohort is a set of 48-hour ICU-style episodes over 17 clinical variables
(12 continuous, 5 categorical). Episodes belong to era "A" or era "B"; the
era-B distribution can drift in channel means/scales, missingness, and
categorical coding variants while the outcome model stays fixed, emulating
a registry change between data-collection periods.

Preprocessing follows the benchmark recipe: hourly binning, previous-hour
forward fill, per-variable defaults before the first observation, one-hot
categorical encoding, per-variable measurement masks, and train-only
z-normalization of the continuous channels. The assembled matrix is
[48 x 76]: columns [0, 12) continuous, [12, 59) one-hot groups, [59, 76)
masks, all in the fixed variable order below.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.signal import lfilter

from .errors import ConfigError, ContractError, FormatError

N_HOURS = 48
N_FEATURES = 76
AR_COEF = 0.7

COHORT_DIR_SCHEMA = "dklshift-cohort-dir-v1"
PROCESSED_SCHEMA = "dklshift-processed-v1"
PROCESSED_MAGIC = b"DKLDATA1\n"


@dataclass(frozen=True)
class ContinuousSpec:
    """Population model and measurement defaults for one numeric channel."""

    name: str
    mean: float
    sd: float
    severity_loading: float
    trend: float
    noise_sd: float
    default: float
    lo: float
    hi: float
    static: bool = False


CONTINUOUS_SPECS = (
    ContinuousSpec("diastolic blood pressure", 60.0, 10.0, -0.35, -0.20, 5.0, 59.0, 20.0, 150.0),
    ContinuousSpec("fraction inspired oxygen", 0.32, 0.12, 0.50, 0.25, 0.03, 0.21, 0.21, 1.0),
    ContinuousSpec("glucose", 130.0, 35.0, 0.30, 0.15, 15.0, 128.0, 40.0, 500.0),
    ContinuousSpec("heart rate", 86.0, 13.0, 0.45, 0.40, 5.0, 86.0, 30.0, 200.0),
    ContinuousSpec("height", 170.0, 10.0, 0.0, 0.0, 0.0, 170.0, 120.0, 210.0, static=True),
    ContinuousSpec("mean blood pressure", 78.0, 11.0, -0.40, -0.25, 5.0, 77.0, 25.0, 160.0),
    ContinuousSpec("oxygen saturation", 97.0, 2.2, -0.50, -0.35, 1.0, 98.0, 60.0, 100.0),
    ContinuousSpec("respiratory rate", 19.0, 4.5, 0.45, 0.35, 2.0, 19.0, 5.0, 60.0),
    ContinuousSpec("systolic blood pressure", 120.0, 16.0, -0.40, -0.25, 7.0, 118.0, 40.0, 250.0),
    ContinuousSpec("temperature", 37.0, 0.6, 0.25, 0.20, 0.25, 37.0, 32.0, 42.0),
    ContinuousSpec("weight", 80.0, 16.0, 0.0, 0.0, 0.0, 81.0, 30.0, 250.0, static=True),
    ContinuousSpec("ph", 7.40, 0.055, -0.50, -0.30, 0.02, 7.40, 6.8, 7.8),
)

# Each Glasgow level appears under two coding variants (free text and a
# numeric-prefixed form); verbal level 1 additionally has intubated codings.
EYE_VARIANTS = {
    1: ("none", "1 no response"),
    2: ("to pain", "2 to pain"),
    3: ("to speech", "3 to speech"),
    4: ("spontaneously", "4 spontaneously"),
}
MOTOR_VARIANTS = {
    1: ("no response", "1 no response"),
    2: ("abnormal extension", "2 abnorm extensn"),
    3: ("abnormal flexion", "3 abnorm flexion"),
    4: ("flex-withdraws", "4 flex-withdraws"),
    5: ("localizes pain", "5 localizes pain"),
    6: ("obeys commands", "6 obeys commands"),
}
VERBAL_VARIANTS = {
    1: ("no response", "1 no response"),
    2: ("incomprehensible sounds", "2 incomp sounds"),
    3: ("inappropriate words", "3 inapprop words"),
    4: ("confused", "4 confused"),
    5: ("oriented", "5 oriented"),
}
VERBAL_ETT = ("no response-ett", "1.0 et/trach")

CATEGORICAL_SPECS = {
    "capillary refill rate": ("normal", "abnormal"),
    "glascow coma scale eye opening": tuple(v for pair in EYE_VARIANTS.values() for v in pair),
    "glascow coma scale motor response": tuple(v for pair in MOTOR_VARIANTS.values() for v in pair),
    "glascow coma scale total": tuple(str(k) for k in range(3, 16)),
    "glascow coma scale verbal response": (
        *VERBAL_VARIANTS[1],
        *VERBAL_ETT,
        *VERBAL_VARIANTS[2],
        *VERBAL_VARIANTS[3],
        *VERBAL_VARIANTS[4],
        *VERBAL_VARIANTS[5],
    ),
}

CATEGORICAL_DEFAULTS = {
    "capillary refill rate": "normal",
    "glascow coma scale eye opening": "4 spontaneously",
    "glascow coma scale motor response": "6 obeys commands",
    "glascow coma scale total": "15",
    "glascow coma scale verbal response": "5 oriented",
}

# full Table-style ordering: categorical and continuous interleaved
VARIABLE_NAMES = (
    "capillary refill rate",
    "diastolic blood pressure",
    "fraction inspired oxygen",
    "glascow coma scale eye opening",
    "glascow coma scale motor response",
    "glascow coma scale total",
    "glascow coma scale verbal response",
    "glucose",
    "heart rate",
    "height",
    "mean blood pressure",
    "oxygen saturation",
    "respiratory rate",
    "systolic blood pressure",
    "temperature",
    "weight",
    "ph",
)

CONTINUOUS_NAMES = tuple(s.name for s in CONTINUOUS_SPECS)
CATEGORICAL_NAMES = tuple(n for n in VARIABLE_NAMES if n in CATEGORICAL_SPECS)
_CONT_INDEX = {name: i for i, name in enumerate(CONTINUOUS_NAMES)}
_CAT_INDEX = {name: i for i, name in enumerate(CATEGORICAL_NAMES)}
_MASK_INDEX = {name: i for i, name in enumerate(VARIABLE_NAMES)}
_CONT_SPEC = {s.name: s for s in CONTINUOUS_SPECS}

N_ONE_HOT = sum(len(c) for c in CATEGORICAL_SPECS.values())
assert len(CONTINUOUS_NAMES) + N_ONE_HOT + len(VARIABLE_NAMES) == N_FEATURES


def feature_layout() -> dict:
    """Self-describing column map shipped alongside every processed file."""
    layout = {"schema": "dklshift-feature-layout-v1", "n_features": N_FEATURES, "n_steps": N_HOURS}
    layout["continuous"] = [{"name": n, "column": i} for i, n in enumerate(CONTINUOUS_NAMES)]
    col = len(CONTINUOUS_NAMES)
    groups = []
    for name in CATEGORICAL_NAMES:
        cats = CATEGORICAL_SPECS[name]
        groups.append({"name": name, "first_column": col, "categories": list(cats)})
        col += len(cats)
    layout["one_hot"] = groups
    layout["masks"] = [{"name": n, "column": col + i} for i, n in enumerate(VARIABLE_NAMES)]
    return layout


_DEFAULT_MISSINGNESS = {
    "capillary refill rate": (0.85, 0.85),
    "diastolic blood pressure": (0.08, 0.08),
    "fraction inspired oxygen": (0.75, 0.86),
    "glascow coma scale eye opening": (0.60, 0.72),
    "glascow coma scale motor response": (0.60, 0.72),
    "glascow coma scale total": (0.60, 0.75),
    "glascow coma scale verbal response": (0.60, 0.72),
    "glucose": (0.65, 0.76),
    "heart rate": (0.05, 0.05),
    "height": (0.80, 0.90),
    "mean blood pressure": (0.08, 0.08),
    "oxygen saturation": (0.05, 0.05),
    "respiratory rate": (0.05, 0.05),
    "systolic blood pressure": (0.08, 0.08),
    "temperature": (0.50, 0.62),
    "weight": (0.75, 0.85),
    "ph": (0.80, 0.88),
}

# era-B additive level drift in channel SD units, on 6 of the 12 channels.
# The direction is "healthier-looking vitals at unchanged true risk", which
# makes era-A-trained models underpredict on era B (positive Cox intercept).
_DEFAULT_DRIFT = {
    "heart rate": -0.55,
    "respiratory rate": -0.50,
    "systolic blood pressure": 0.50,
    "mean blood pressure": 0.45,
    "temperature": -0.35,
    "oxygen saturation": 0.45,
}

# wider within-patient noise in era B; a texture change more than a signal
# change, since hourly noise mostly averages out over a 48-hour stay
_DEFAULT_SCALE_DRIFT = {
    "heart rate": 1.4,
    "respiratory rate": 1.4,
    "systolic blood pressure": 1.3,
    "mean blood pressure": 1.3,
    "temperature": 1.3,
    "oxygen saturation": 1.3,
}


@dataclass(frozen=True)
class ShiftConfig:
    """Cohort sizes, outcome model, and the era-B shift knobs."""

    n_era_a: int = 2400
    n_era_b: int = 1600
    target_prevalence: float = 0.1323
    severity_coef: float = 1.25
    intensity_coef: float = 0.15
    confound_coef: float = 0.45
    signal_atten: float = 0.6
    drift: dict = field(default_factory=lambda: dict(_DEFAULT_DRIFT))
    scale_drift: dict = field(default_factory=lambda: dict(_DEFAULT_SCALE_DRIFT))
    missingness: dict = field(default_factory=lambda: dict(_DEFAULT_MISSINGNESS))
    variant_mix: tuple = (0.95, 0.10)

    def __post_init__(self):
        if self.n_era_a < 1 or self.n_era_b < 0:
            raise ConfigError("cohort sizes must be positive (era B may be empty)")
        if not 0.0 < self.target_prevalence < 1.0:
            raise ConfigError("target prevalence must lie in (0, 1)")
        if self.confound_coef < 0.0:
            raise ConfigError("confound coefficient must be non-negative")
        if not 0.0 <= self.signal_atten <= 1.0:
            raise ConfigError("signal attenuation must lie in [0, 1]")
        for name, pair in self.missingness.items():
            if name not in _MASK_INDEX:
                raise ConfigError(f"missingness entry for unknown variable {name!r}")
            if not all(0.0 <= r <= 1.0 for r in pair):
                raise ConfigError(f"missingness rates for {name!r} must lie in [0, 1]")
        for name in list(self.drift) + list(self.scale_drift):
            if name not in _CONT_INDEX:
                raise ConfigError(f"drift entry for unknown continuous variable {name!r}")
        if not all(0.0 <= v <= 1.0 for v in self.variant_mix):
            raise ConfigError("variant mix probabilities must lie in [0, 1]")

    @classmethod
    def no_shift(cls, **kwargs) -> "ShiftConfig":
        """Both eras drawn from the identical distribution."""
        miss = {k: (a, a) for k, (a, _) in _DEFAULT_MISSINGNESS.items()}
        return cls(
            drift={}, scale_drift={}, missingness=miss, variant_mix=(0.95, 0.95), signal_atten=1.0, **kwargs
        )

    def to_dict(self) -> dict:
        return {
            "n_era_a": self.n_era_a,
            "n_era_b": self.n_era_b,
            "target_prevalence": self.target_prevalence,
            "severity_coef": self.severity_coef,
            "intensity_coef": self.intensity_coef,
            "confound_coef": self.confound_coef,
            "signal_atten": self.signal_atten,
            "drift": dict(sorted(self.drift.items())),
            "scale_drift": dict(sorted(self.scale_drift.items())),
            "missingness": {k: list(v) for k, v in sorted(self.missingness.items())},
            "variant_mix": list(self.variant_mix),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftConfig":
        d = dict(d)
        d["missingness"] = {k: tuple(v) for k, v in d.get("missingness", {}).items()}
        d["variant_mix"] = tuple(d.get("variant_mix", (0.95, 0.10)))
        return cls(**d)


@dataclass
class RawEpisode:
    """One 48-hour stay: timestamped (hour, variable, value) measurements."""

    episode_id: str
    era: str
    label: int
    measurements: list

    def __post_init__(self):
        if self.era not in ("A", "B"):
            raise ContractError(f"era must be 'A' or 'B', got {self.era!r}")
        if self.label not in (0, 1):
            raise ContractError(f"label must be binary, got {self.label!r}")
        if not self.measurements:
            raise ContractError(f"episode {self.episode_id}: no observations in the first {N_HOURS} hours")
        for hour, name, _ in self.measurements:
            if not 0.0 <= hour < N_HOURS:
                raise ContractError(f"episode {self.episode_id}: hour offset {hour} outside [0, {N_HOURS})")
            if name not in _MASK_INDEX:
                raise FormatError(f"episode {self.episode_id}: unknown variable {name!r}")


@dataclass
class HourGrid:
    """Forward-filled hourly values plus the true-measurement masks."""

    continuous: np.ndarray  # [48, 12] float64
    categories: np.ndarray  # [48, 5] int category indices
    mask: np.ndarray  # [48, 17] 0/1


@dataclass
class ProcessedEpisode:
    """Assembled [48 x 76] feature matrix with its label and era tag."""

    episode_id: str
    era: str
    label: int
    x: np.ndarray

    def __post_init__(self):
        if self.x.shape != (N_HOURS, N_FEATURES):
            raise ContractError(f"processed episode must be [{N_HOURS}, {N_FEATURES}], got {self.x.shape}")


@dataclass
class NormStats:
    """Train-split mean/SD per continuous channel; SDs floored at 1e-6."""

    mean: np.ndarray
    std: np.ndarray
    source_era: str
    floored: tuple = ()

    def __post_init__(self):
        if self.mean.shape != (len(CONTINUOUS_NAMES),) or self.std.shape != self.mean.shape:
            raise ContractError("norm stats must cover the 12 continuous channels")
        if np.any(self.std <= 0):
            raise ContractError("norm stats std must be positive")

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "source_era": self.source_era,
            "floored": list(self.floored),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            source_era=d["source_era"],
            floored=tuple(d.get("floored", ())),
        )


@dataclass
class Dataset:
    """Stacked processed episodes ready for training."""

    episodes: np.ndarray  # [N, 48, 76]
    labels: np.ndarray  # [N] int
    ids: list
    eras: list

    def __post_init__(self):
        n = self.episodes.shape[0]
        if self.episodes.shape[1:] != (N_HOURS, N_FEATURES):
            raise ContractError(f"dataset episodes must be [N, {N_HOURS}, {N_FEATURES}]")
        if self.labels.shape != (n,) or len(self.ids) != n or len(self.eras) != n:
            raise ContractError("dataset fields disagree on N")

    @property
    def n(self) -> int:
        return self.episodes.shape[0]

    @property
    def prevalence(self) -> float:
        return float(self.labels.mean())

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            episodes=self.episodes[idx],
            labels=self.labels[idx],
            ids=[self.ids[i] for i in idx],
            eras=[self.eras[i] for i in idx],
        )


@lru_cache(maxsize=32)
def _calibrate_intercept(severity_coef: float, target: float) -> float:
    """Solve E[sigmoid(a0 + a1 s)] = target over s ~ N(0, 1)."""
    nodes, weights = np.polynomial.hermite.hermgauss(80)
    s = np.sqrt(2.0) * nodes
    w = weights / np.sqrt(np.pi)

    def excess(a0):
        return float(_np_sigmoid(a0 + severity_coef * s) @ w) - target

    lo, hi = -30.0, 30.0
    if excess(lo) > 0 or excess(hi) < 0:
        raise ConfigError("prevalence calibration failed to bracket the target")
    return float(brentq(excess, lo, hi, xtol=1e-12))


def _ordered_level(cutpoints: np.ndarray, coef: float, s: float, u: float) -> int:
    """Draw from an ordered-logistic distribution; levels start at 1."""
    cum = _np_sigmoid(cutpoints - coef * s)
    return int(np.searchsorted(cum, u) + 1)


def _era_missingness(config: ShiftConfig, name: str, era: str) -> float:
    pair = config.missingness.get(name, _DEFAULT_MISSINGNESS[name])
    return pair[1] if era == "B" else pair[0]


def _measured_hours(rng: np.random.Generator, miss: float, s: float, intensity_coef: float) -> np.ndarray:
    p = np.clip((1.0 - miss) * (1.0 + intensity_coef * s), 0.01, 1.0)
    return np.nonzero(rng.random(N_HOURS) < p)[0]


def _severity_levels(rng: np.random.Generator, s: float) -> tuple[int, int, int, bool, bool]:
    """(eye, motor, verbal) Glasgow levels plus intubation and refill flags."""
    eye = _ordered_level(np.array([-1.8, -0.6, 0.6]), 1.1, s, rng.random())
    motor = _ordered_level(np.array([-2.2, -1.4, -0.6, 0.2, 1.0]), 1.2, s, rng.random())
    verbal = _ordered_level(np.array([-2.0, -1.0, 0.0, 1.0]), 1.2, s, rng.random())
    intubated = bool(rng.random() < _np_sigmoid(-1.5 + 0.8 * s))
    abnormal_refill = bool(rng.random() < _np_sigmoid(-2.2 + 0.9 * s))
    return eye, motor, verbal, intubated, abnormal_refill


def _variant(pair: tuple, rng: np.random.Generator, text_prob: float) -> str:
    return pair[0] if rng.random() < text_prob else pair[1]


def _generate_episode(episode_id: str, era: str, config: ShiftConfig, rng: np.random.Generator) -> RawEpisode:
    # the label reflects the end-of-stay state s; early hours are confounded
    # by where the trajectory started (s - confound at admission, converging
    # to s by hour 48), so late hours carry the cleanest outcome signal
    s = float(rng.standard_normal())
    confound = float(rng.standard_normal())
    a0 = _calibrate_intercept(config.severity_coef, config.target_prevalence)
    label = int(rng.random() < _np_sigmoid(a0 + config.severity_coef * s))
    text_prob = config.variant_mix[1] if era == "B" else config.variant_mix[0]
    measurements = []

    # continuous channels: severity-tracking level + AR(1) noise + trend
    eps = rng.standard_normal((len(CONTINUOUS_SPECS), N_HOURS))
    ar = lfilter([1.0], [1.0, -AR_COEF], eps, axis=1)
    hours = np.arange(N_HOURS)
    s_path = s - config.confound_coef * confound * (1.0 - hours / (N_HOURS - 1.0))
    # era-B vitals couple more weakly to severity (signal_atten < 1): new
    # devices and charting practice degrade the signal an era-A model relies
    # on, so its era-B predictions stay spread out but rank outcomes worse
    atten = config.signal_atten if era == "B" else 1.0
    for row, spec in enumerate(CONTINUOUS_SPECS):
        drift = config.drift.get(spec.name, 0.0) if era == "B" else 0.0
        scale = config.scale_drift.get(spec.name, 1.0) if era == "B" else 1.0
        resid = np.sqrt(max(0.0, 1.0 - spec.severity_loading**2))
        offset = resid * rng.standard_normal() + drift
        miss = _era_missingness(config, spec.name, era)
        if spec.static:
            if rng.random() < (1.0 - miss):
                level = spec.mean + spec.sd * (atten * spec.severity_loading * s + offset)
                value = float(np.clip(level, spec.lo, spec.hi))
                measurements.append((float(rng.random() * 0.99), spec.name, value))
            continue
        values = (
            spec.mean
            + spec.sd * (atten * (spec.severity_loading * s_path + spec.trend * s * hours / N_HOURS) + offset)
            + spec.noise_sd * scale * ar[row]
        )
        values = np.clip(values, spec.lo, spec.hi)
        for t in _measured_hours(rng, miss, s, config.intensity_coef):
            measurements.append((float(t + rng.random() * 0.99), spec.name, float(values[t])))

    # categorical channels: per-patient Glasgow levels, era-tilted codings
    eye, motor, verbal, intubated, abnormal_refill = _severity_levels(rng, s)
    total = str(eye + motor + verbal)
    for name in CATEGORICAL_NAMES:
        miss = _era_missingness(config, name, era)
        for t in _measured_hours(rng, miss, s, config.intensity_coef):
            if name == "capillary refill rate":
                value = "abnormal" if abnormal_refill else "normal"
            elif name == "glascow coma scale eye opening":
                value = _variant(EYE_VARIANTS[eye], rng, text_prob)
            elif name == "glascow coma scale motor response":
                value = _variant(MOTOR_VARIANTS[motor], rng, text_prob)
            elif name == "glascow coma scale total":
                value = total
            else:
                pair = VERBAL_ETT if (verbal == 1 and intubated) else VERBAL_VARIANTS[verbal]
                value = _variant(pair, rng, text_prob)
            measurements.append((float(t + rng.random() * 0.99), name, value))

    if not measurements:
        # cohort rule: episodes without observations are excluded, so force one
        measurements.append((0.0, "heart rate", float(np.clip(86.0 + 13.0 * 0.45 * s, 30.0, 200.0))))
    measurements.sort(key=lambda m: (m[0], m[1]))
    return RawEpisode(episode_id=episode_id, era=era, label=label, measurements=measurements)


def generate_cohort(config: ShiftConfig, seed: int) -> list:
    """Era-A block then era-B block; bit-reproducible for a (config, seed)."""
    rng = np.random.default_rng(seed)
    episodes = []
    for i in range(config.n_era_a):
        episodes.append(_generate_episode(f"a{i:05d}", "A", config, rng))
    for i in range(config.n_era_b):
        episodes.append(_generate_episode(f"b{i:05d}", "B", config, rng))
    return episodes


def discretize_impute(raw: RawEpisode) -> HourGrid:
    """Hourly bins, last measurement wins, forward fill, default backfill."""
    cont = np.empty((N_HOURS, len(CONTINUOUS_NAMES)))
    cats = np.empty((N_HOURS, len(CATEGORICAL_NAMES)), dtype=np.int64)
    mask = np.zeros((N_HOURS, len(VARIABLE_NAMES)))
    cont_latest = np.full((N_HOURS, len(CONTINUOUS_NAMES)), np.nan)
    cat_latest = np.full((N_HOURS, len(CATEGORICAL_NAMES)), -1, dtype=np.int64)

    ordered = sorted(raw.measurements, key=lambda m: m[0])
    for hour, name, value in ordered:
        if name not in _MASK_INDEX:
            raise FormatError(f"unknown variable {name!r}")
        t = int(hour)
        mask[t, _MASK_INDEX[name]] = 1.0
        if name in _CONT_INDEX:
            cont_latest[t, _CONT_INDEX[name]] = float(value)
        else:
            cats_list = CATEGORICAL_SPECS[name]
            value = str(value)
            if value not in cats_list:
                raise FormatError(f"unknown category {value!r} for variable {name!r}")
            cat_latest[t, _CAT_INDEX[name]] = cats_list.index(value)

    for j, name in enumerate(CONTINUOUS_NAMES):
        current = _CONT_SPEC[name].default
        for t in range(N_HOURS):
            if not np.isnan(cont_latest[t, j]):
                current = cont_latest[t, j]
            cont[t, j] = current
    for j, name in enumerate(CATEGORICAL_NAMES):
        current = CATEGORICAL_SPECS[name].index(CATEGORICAL_DEFAULTS[name])
        for t in range(N_HOURS):
            if cat_latest[t, j] >= 0:
                current = cat_latest[t, j]
            cats[t, j] = current
    return HourGrid(continuous=cont, categories=cats, mask=mask)


def one_hot(variable: str, category: str) -> np.ndarray:
    """Indicator over the variable's declared category set."""
    if variable not in CATEGORICAL_SPECS:
        raise FormatError(f"variable {variable!r} is not categorical")
    cats = CATEGORICAL_SPECS[variable]
    if category not in cats:
        raise FormatError(f"unknown category {category!r} for variable {variable!r}")
    vec = np.zeros(len(cats))
    vec[cats.index(category)] = 1.0
    return vec


def _assemble(grid: HourGrid, cont_normalized: np.ndarray) -> np.ndarray:
    blocks = [cont_normalized]
    for j, name in enumerate(CATEGORICAL_NAMES):
        k = len(CATEGORICAL_SPECS[name])
        block = np.zeros((N_HOURS, k))
        block[np.arange(N_HOURS), grid.categories[:, j]] = 1.0
        blocks.append(block)
    blocks.append(grid.mask)
    return np.concatenate(blocks, axis=1)


def fit_norm_stats(train_episodes: list) -> NormStats:
    """Mean/SD of the forward-filled continuous grids, training split only."""
    if not train_episodes:
        raise ConfigError("fit_norm_stats needs a non-empty training split")
    grids = np.concatenate([discretize_impute(e).continuous for e in train_episodes], axis=0)
    mean = grids.mean(axis=0)
    std = grids.std(axis=0)
    floored = tuple(CONTINUOUS_NAMES[int(j)] for j in np.nonzero(std < 1e-6)[0])
    std = np.maximum(std, 1e-6)
    eras = {e.era for e in train_episodes}
    source = eras.pop() if len(eras) == 1 else "mixed"
    return NormStats(mean=mean, std=std, source_era=source, floored=floored)


def apply_norm(raw: RawEpisode, stats: NormStats) -> ProcessedEpisode:
    """Standardize the continuous block; masks and one-hots pass through."""
    if stats.source_era == "B" and raw.era == "A":
        raise ContractError("stats fitted on era B must not normalize era-A training data")
    grid = discretize_impute(raw)
    cont = (grid.continuous - stats.mean) / stats.std
    return ProcessedEpisode(episode_id=raw.episode_id, era=raw.era, label=raw.label, x=_assemble(grid, cont))


def to_dataset(processed: list) -> Dataset:
    if not processed:
        raise ConfigError("cannot build a dataset from zero episodes")
    return Dataset(
        episodes=np.stack([p.x for p in processed]),
        labels=np.array([p.label for p in processed], dtype=np.int64),
        ids=[p.episode_id for p in processed],
        eras=[p.era for p in processed],
    )


def preprocess(train_raw: list, val_raw: list, test_raw: list) -> tuple[Dataset, Dataset, Dataset, NormStats]:
    """Fit stats on the training split, normalize all three splits."""
    stats = fit_norm_stats(train_raw)
    out = tuple(to_dataset([apply_norm(e, stats) for e in split]) for split in (train_raw, val_raw, test_raw))
    return (*out, stats)


TEMPORAL_TRAIN_FRAC = 0.845
INTERNAL_FRACS = (0.694, 0.153)


def split_temporal(cohort: list, seed: int) -> tuple[list, list, list]:
    """Era A shuffled into train/val at the 84.5/15.5 ratio; era B is test."""
    era_a = [e for e in cohort if e.era == "A"]
    era_b = [e for e in cohort if e.era == "B"]
    if not era_a or not era_b:
        raise ConfigError("temporal split needs episodes in both eras")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(era_a))
    n_train = round(len(era_a) * TEMPORAL_TRAIN_FRAC)
    train = [era_a[i] for i in order[:n_train]]
    val = [era_a[i] for i in order[n_train:]]
    return train, val, era_b


def split_internal(cohort: list, seed: int) -> tuple[list, list, list]:
    """Pooled seeded split at the 69.4/15.3/15.3 ratios."""
    if not cohort:
        raise ConfigError("internal split needs a non-empty cohort")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cohort))
    n_train = round(len(cohort) * INTERNAL_FRACS[0])
    n_val = round(len(cohort) * INTERNAL_FRACS[1])
    train = [cohort[i] for i in order[:n_train]]
    val = [cohort[i] for i in order[n_train : n_train + n_val]]
    test = [cohort[i] for i in order[n_train + n_val :]]
    return train, val, test


def write_cohort(directory, episodes: list, config: ShiftConfig | None = None, seed: int | None = None) -> None:
    """Cohort directory: meta.json, index.csv, and one CSV per episode."""
    directory = Path(directory)
    (directory / "episodes").mkdir(parents=True, exist_ok=True)
    meta = {"schema": COHORT_DIR_SCHEMA, "n_episodes": len(episodes)}
    if config is not None:
        meta["config"] = config.to_dict()
    if seed is not None:
        meta["seed"] = seed
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(directory / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "era", "label", "file"])
        for ep in episodes:
            rel = f"episodes/{ep.episode_id}.csv"
            writer.writerow([ep.episode_id, ep.era, ep.label, rel])
            with open(directory / rel, "w", newline="") as efh:
                ew = csv.writer(efh)
                ew.writerow(["hour", "variable", "value"])
                for hour, name, value in ep.measurements:
                    ew.writerow([repr(float(hour)), name, value if isinstance(value, str) else repr(float(value))])


def read_cohort(directory) -> list:
    directory = Path(directory)
    index = directory / "index.csv"
    if not index.exists():
        raise FormatError(f"no index.csv under {directory}")
    episodes = []
    with open(index, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        path = directory / row["file"]
        if not path.exists():
            raise FormatError(f"episode file missing: {path}")
        measurements = []
        with open(path, newline="") as efh:
            for m in csv.DictReader(efh):
                name = m["variable"]
                if name not in _MASK_INDEX:
                    raise FormatError(f"unknown variable {name!r} in {path}")
                value = m["value"] if name in CATEGORICAL_SPECS else float(m["value"])
                measurements.append((float(m["hour"]), name, value))
        episodes.append(RawEpisode(row["id"], row["era"], int(row["label"]), measurements))
    return episodes


def write_processed(path, dataset: Dataset) -> None:
    """Flat binary: magic, JSON header with the layout, raw float64 block."""
    header = {
        "schema": PROCESSED_SCHEMA,
        "n": dataset.n,
        "layout": feature_layout(),
        "ids": dataset.ids,
        "eras": dataset.eras,
        "labels": dataset.labels.tolist(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    body = np.ascontiguousarray(dataset.episodes, dtype=np.float64).tobytes()
    with open(path, "wb") as fh:
        fh.write(PROCESSED_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(body)


def read_processed(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(len(PROCESSED_MAGIC))
        if magic != PROCESSED_MAGIC:
            raise FormatError(f"{path}: not a processed cohort file")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len))
        if header.get("schema") != PROCESSED_SCHEMA:
            raise FormatError(f"{path}: unsupported schema {header.get('schema')!r}")
        n = header["n"]
        body = fh.read(n * N_HOURS * N_FEATURES * 8)
    episodes = np.frombuffer(body, dtype=np.float64).reshape(n, N_HOURS, N_FEATURES).copy()
    return Dataset(
        episodes=episodes,
        labels=np.asarray(header["labels"], dtype=np.int64),
        ids=list(header["ids"]),
        eras=list(header["eras"]),
    )


def _np_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)
