"""
Classifying years of climate sensitivity
========================================

Sensitive years (credible interval away from zero, annual r^2 >= 0.25) are
attributed to a nearby threshold exceedance, persistence after one, a
disturbance outbreak, or left unknown.  This demo builds a small trajectory
by hand so every rule is visible.
"""

import numpy as np
import pandas as pd

from ringclim.classifier import (FTC_CALENDAR, DisturbanceCalendar, ResponseLabel, ThresholdConfig,
                                 category_table, classify, curve_at, exceedance_report,
                                 initiation_curve, labels_frame)

years = np.arange(1930, 1976)
# annual mean summer deficit: dry spikes in 1936 and 1962
climate = pd.DataFrame({"year": years, "SUM-DEF": np.zeros(years.size)})
climate.loc[climate.year == 1936, "SUM-DEF"] = 3.0
climate.loc[climate.year == 1962, "SUM-DEF"] = 2.0

sensitive = set(range(1934, 1943)) | {1955, 1956} | {1947}
weak = {1950}
rows = []
for y in years:
    if y in sensitive:
        rows.append((y, "SUM-DEF", -0.3, -0.5, -0.1, 0.6))
    elif y in weak:
        rows.append((y, "SUM-DEF", -0.3, -0.5, -0.1, 0.1))   # interval clear of zero but low r^2
    else:
        rows.append((y, "SUM-DEF", 0.0, -0.2, 0.2, 0.6))
traj = pd.DataFrame(rows, columns=["year", "variable", "post_mean", "q2.5", "q97.5", "r2_annual"])

labels = classify(traj, climate, ThresholdConfig(), FTC_CALENDAR)
lf = labels_frame(labels)
print(lf[lf.category != "zero"][["year", "category"]].to_string(index=False))
print()
print(category_table(labels).to_string(index=False))

print("\nexceedances (95th percentile of the annual means):")
print(exceedance_report(climate, ThresholdConfig({"SUM-DEF": 0.95}), labels).to_string(index=False))

# the priority order is configurable: put disturbance ahead of thresholds
alt = classify(traj, climate, ThresholdConfig(), DisturbanceCalendar([(1935, 1937)]),
               priority=("disturbance", "threshold", "persistent"))
print("\nwith a 1935-1937 outbreak ranked first:",
      {lab.year: lab.category for lab in alt if 1934 <= lab.year <= 1938})

# response years against stand age; each response counts once per observed stand
init = {"A": 1900, "B": 1910, "C": 1925}
curve = initiation_curve(labels, init)
print("\nshare of all responses within 36 years of stand initiation: %.2f" % curve_at(curve, 36, "all"))
print(curve[curve.label_set == "all"].tail(4).to_string(index=False))
