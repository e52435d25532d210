"""
Monthly weather to seasonal water-balance covariates
====================================================

Thornthwaite PET, a snow + soil bucket, and the 28 seasonal growth-year
variables that feed the growth models.
"""

import numpy as np

from ringclim.synth import simulate_monthly_climate
from ringclim.water_balance import (aggregate_seasonal, run_water_balance, standardize,
                                    thornthwaite_pet)

# A constant 20 C at the equator: 12-hour days every month, so PET is
# the textbook 16 (10 T / I)^a in every month.
pet = thornthwaite_pet(np.full(12, 20.0), latitude=0.0)
print("PET at 20 C, latitude 0:", np.round(pet[:3], 2), "mm/month")

# Below freezing there is no evaporative demand at all
print("PET for a -5 C month:", thornthwaite_pet(np.r_[-5.0, np.full(11, 15.0)], 45.0)[0])

# Three stands of synthetic mid-latitude weather, 1950-1969
monthly = simulate_monthly_climate(["S01", "S02", "S03"], range(1950, 1970), seed=1)
series = run_water_balance(monthly)
frame = series["S01"].to_frame()
print("\nS01, 1955 monthly balance (mm):")
print(frame[frame.year == 1955][["month", "tmean_c", "precip_mm", "pet_mm", "aet_mm",
                                  "deficit_mm", "snowpack_mm", "soil_water_mm"]].round(1)
      .to_string(index=False))

# Seasonal aggregation.  Fall and the lagged summer belong to the previous
# calendar year, so the first growth year has NaNs and is dropped.
seasonal = aggregate_seasonal(series)
print("\nseasonal table:", seasonal.shape, "(first year incomplete:",
      int(seasonal[seasonal.year == 1950].isna().any(axis=1).sum()), "stands)")
z, scaler = standardize(seasonal.dropna())
print(z[["stand_id", "year", "SUM-DEF", "FAL-DEF", "SNOW"]].head().round(2).to_string(index=False))
print("\nraw-scale means used for the z-scores:")
print(scaler.to_frame().set_index("variable").loc[["SUM-DEF", "SUM-DEF-LAG", "SNOW"]].round(2))
