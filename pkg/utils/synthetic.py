"""
Stackcast Synthetic Panels
Seeded generator of seasonal, trend, random-walk, autoregressive and noise series
"""

from typing import List, Mapping, Optional, Sequence, Union
import logging

import numpy as np
import pandas as pd

from stacking.core import TimeSeries, TimeSeriesPanel, validate_panel

logger = logging.getLogger(__name__)

REGIMES = ("seasonal", "trend", "random_walk", "ar", "noise")
DOMINANT_SHARE = 0.6
LEVEL = 50.0


def generate_values(rng: np.random.Generator, regime: str, length: int, seasonality: int) -> np.ndarray:
    """One series of the given regime around a positive level"""
    t = np.arange(length, dtype=np.float64)
    noise = rng.normal(0.0, 1.0, length)

    if regime == "seasonal":
        m = max(seasonality, 2)
        profile = rng.normal(0.0, 6.0, m)
        profile -= profile.mean()
        return LEVEL + profile[np.arange(length) % m] + 0.8 * noise
    if regime == "trend":
        slope = rng.uniform(0.3, 1.0) * rng.choice([-1.0, 1.0])
        return LEVEL + slope * t + 1.5 * noise
    if regime == "random_walk":
        return LEVEL + np.cumsum(1.5 * noise)
    if regime == "ar":
        phi = rng.uniform(0.5, 0.9)
        values = np.empty(length)
        prev = 0.0
        for k in range(length):
            prev = phi * prev + 2.0 * noise[k]
            values[k] = prev
        return LEVEL + values
    if regime == "noise":
        return LEVEL + 3.0 * noise
    raise ValueError(f"Unknown regime '{regime}' (expected one of {REGIMES})")


def regime_mix(dominant: str, share: float = DOMINANT_SHARE) -> dict:
    """Weights putting `share` on one regime and spreading the rest evenly"""
    others = [r for r in REGIMES if r != dominant]
    return {dominant: share, **{r: (1.0 - share) / len(others) for r in others}}


def generate_panel(n_items: int,
                   length: int,
                   seasonality: int = 1,
                   regimes: Union[str, Mapping[str, float], Sequence[str]] = "seasonal",
                   seed: int = 0,
                   name: str = "synthetic",
                   start: str = "2000-01-01",
                   step: pd.Timedelta = pd.Timedelta(days=1)) -> TimeSeriesPanel:
    """
    Panel of n_items series; regimes is one regime, a list sampled uniformly,
    or a {regime: weight} mixture
    """
    if isinstance(regimes, str):
        weights = {regimes: 1.0}
    elif isinstance(regimes, Mapping):
        weights = dict(regimes)
    else:
        weights = {r: 1.0 for r in regimes}
    names = list(weights)
    probs = np.array([weights[r] for r in names], dtype=np.float64)
    probs /= probs.sum()

    rng = np.random.default_rng(seed)
    series = []
    for n in range(n_items):
        regime = names[int(rng.choice(len(names), p=probs))]
        values = generate_values(rng, regime, length, seasonality)
        series.append(TimeSeries(f"{name}_{n:03d}", values, pd.Timestamp(start), step))

    return validate_panel(TimeSeriesPanel(tuple(series), seasonality, "D", name))


def generate_study(n_datasets: int = 10,
                   n_items: int = 20,
                   horizon: int = 4,
                   seasonality: int = 4,
                   seed: int = 0,
                   length: Optional[int] = None) -> List[TimeSeriesPanel]:
    """
    Datasets with rotating dominant regimes so different base learners win on
    different datasets; series length defaults to 12 * horizon
    """
    length = length or 12 * horizon
    seeds = np.random.SeedSequence(seed).spawn(n_datasets)
    panels = []
    for d in range(n_datasets):
        dominant = REGIMES[d % len(REGIMES)]
        dataset_seed = int(seeds[d].generate_state(1)[0])
        panels.append(generate_panel(n_items, length, seasonality, regime_mix(dominant),
                                     dataset_seed, name=f"synth_{d:02d}_{dominant}"))
    logger.info(f"Generated {n_datasets} synthetic datasets of {n_items} items x {length} points")
    return panels
