"""
Station clusters, periodograms and functional boxplots
=======================================================

Stations near offices fill up around midday while stations in residential
areas empty in the morning. k-means under correlation distance separates
the two shapes regardless of each station's size. The periodogram of a
station's record shows the daily cycle, and a functional boxplot picks
out unusual days.
"""

import numpy as np

from stfda.clustering import correlation_distance, kmeans_curves
from stfda.spectral import functional_boxplot, periodogram, relative_magnitude

rng = np.random.default_rng(0)
h = np.linspace(0, 24, 97)
mountain = np.exp(-((h - 11) / 2) ** 2) + 0.9 * np.exp(-((h - 15) / 2) ** 2)
valley = -np.exp(-((h - 9) / 2.5) ** 2)

curves = []
for base in (mountain, valley):
    for _ in range(10):
        curves.append(10 + rng.uniform(-3, 3) + rng.uniform(2, 12) * (base + 0.1 * rng.standard_normal(h.size)))
curves = np.array(curves)

res = kmeans_curves(curves, k=2, seed=1, midday_index=48)
print("labels:", res.labels)
print("centre values at noon:", np.round(res.centres[:, 48], 1))

# correlation ignores level and scale
print("d(x, 5x + 3) = %.2e" % correlation_distance(curves[0], 5 * curves[0] + 3))

# one station, four weeks at 15-minute resolution
t = np.arange(28 * 96) / 96.0
series = 10 + 4 * np.sin(2 * np.pi * t) + 1.5 * np.sin(2 * np.pi * t / 7) + rng.standard_normal(t.size)
series[500:560] = np.nan   # a reporting gap
pg = periodogram(series, spacing_days=1 / 96)
print("gap fraction %.3f, flagged: %s" % (pg.gap_fraction, pg.flagged))
f, pct = relative_magnitude([pg])
for target in (1 / 7, 1.0, 2.0):
    k = np.argmin(np.abs(f - target))
    print("%.3f cycles/day: %.2f%% of the total magnitude" % (f[k], pct[k]))

# daily curves with one disrupted day
days = 10 + 4 * np.sin(2 * np.pi * (h - 6) / 24) + rng.uniform(-0.5, 0.5, (20, 1))
days[7] = 2.0
stats = functional_boxplot(days)
print("deepest day:", stats.median_index, " outlying days:", stats.outliers)
