"""Synthetic hourly weather in the Kaggle column layout.

Daily temperature is a seasonal cycle plus an autoregressive anomaly driven
by a nonlinear interaction of the previous day's pressure and humidity. The
other variables are loosely coupled to temperature the way real observations
are (apparent temperature tracks temperature, humidity falls in summer, ...).
Hourly rows add a diurnal cycle that the daily means average out.
"""

from __future__ import annotations

import numpy as np

from .dataio import NUMERIC_COLUMNS, RawTable, SECONDS_PER_DAY, TimeSeriesTable, clean, write_table_csv
from .numcore import make_rng

START_EPOCH = 1136073600  # 2006-01-01 00:00 UTC


def daily_weather(n_days=3000, seed=0, noise=0.9):
    """Daily series as an ``[n_days, 8]`` array in ``NUMERIC_COLUMNS`` order."""
    rng = make_rng(seed, 100)
    d = np.arange(n_days)
    season = np.sin(2 * np.pi * (d - 100) / 365.25)
    pressure = np.empty(n_days)
    humidity = np.empty(n_days)
    wind = np.empty(n_days)
    anomaly = np.empty(n_days)
    p = h = w = 0.0
    for i in range(n_days):
        drive = 0.0
        if i >= 3:
            tendency = (pressure[i - 1] - pressure[i - 3]) / 5.0
            drive = 2.5 * np.tanh(tendency) * (1.2 - humidity[i - 1]) - 0.1 * (wind[i - 1] - 12.0) \
                + 0.2 * anomaly[i - 2]
        prev = anomaly[i - 1] if i else 0.0
        anomaly[i] = 0.6 * prev + drive + rng.normal(0.0, noise)
        p = 0.8 * p + rng.normal(0.0, 4.0)
        h = 0.6 * h + rng.normal(0.0, 0.07)
        w = 0.5 * w + rng.normal(0.0, 4.0)
        pressure[i] = 1013.0 + p
        humidity[i] = np.clip(0.72 - 0.14 * season[i] + h, 0.15, 1.0)
        wind[i] = 12.0 + abs(w) + 2.0 * (1.0 - season[i])
    temp = 11.0 + 10.0 * season + anomaly
    apparent = temp - 0.25 * np.maximum(wind - 10.0, 0.0) * (temp < 12) \
        + 1.5 * humidity * (temp > 20) + rng.normal(0.0, 0.6, n_days)
    bearing = rng.uniform(0.0, 359.0, n_days)
    visibility = np.clip(15.0 - 8.0 * humidity + rng.normal(0.0, 1.0, n_days), 0.0, 16.1)
    loud = np.zeros(n_days)
    return np.column_stack([temp, apparent, humidity, wind, bearing, visibility, loud, pressure])


def hourly_weather(n_days=3000, seed=0, missing_rate=0.0):
    """Hourly :class:`RawTable`; ``missing_rate`` blanks random Humidity cells."""
    daily = daily_weather(n_days, seed)
    rng = make_rng(seed, 101)
    hours = np.arange(24)
    diurnal = np.sin(2 * np.pi * (hours - 9) / 24.0)
    diurnal = diurnal - diurnal.mean()
    vals = np.repeat(daily, 24, axis=0)
    cycle = np.tile(diurnal, n_days)
    vals[:, 0] += 4.0 * cycle + rng.normal(0.0, 0.4, len(vals))
    vals[:, 1] += 4.5 * cycle + rng.normal(0.0, 0.5, len(vals))
    vals[:, 2] = np.clip(vals[:, 2] - 0.1 * cycle, 0.0, 1.0)
    vals[:, 3] = np.maximum(vals[:, 3] + rng.normal(0.0, 1.0, len(vals)), 0.0)
    vals[:, 4] = np.round(rng.uniform(0.0, 359.0, len(vals)))
    vals[:, 7] += rng.normal(0.0, 0.3, len(vals))
    if missing_rate > 0:
        blank = rng.random(len(vals)) < missing_rate
        vals[blank, 2] = np.nan
    stamps = START_EPOCH + np.arange(n_days * 24, dtype=np.int64) * 3600
    return RawTable(stamps.astype(np.float64), NUMERIC_COLUMNS, vals, int(np.isnan(vals).any(axis=1).sum()))


def hourly_table(n_days=3000, seed=0):
    return clean(hourly_weather(n_days, seed))


def write_synthetic_csv(path, n_days=3000, seed=0):
    """Write a cleaned synthetic hourly table as a Kaggle-layout CSV."""
    table = hourly_table(n_days, seed)
    write_table_csv(table, path)
    return table
