"""
Choosing which images to replay
===============================

After each phase the detector scores every training image of that phase by
its own loss ("risk"). The exemplar store keeps the images around the median
risk: the easiest images teach little and the hardest are often ambiguous.
"""

import numpy as np

from dyqdetr.replay import RiskRecord, middle_band, select_exemplars

# %%
# The middle band
# ---------------
# For ``n`` images and a budget fraction ``f`` the band is centred on the
# median and never holds more than ``floor(f * n)`` images.
for n, f in [(100, 0.1), (10, 0.2), (7, 0.5), (41, 0.1)]:
    print(n, f, middle_band(n, f))

# %%
# Selection only depends on the ranking
# -------------------------------------
# Any strictly increasing transform of the risks picks the same images.
rng = np.random.default_rng(0)
risk = rng.gamma(2.0, size=200)
records = [RiskRecord(i, 1, float(r)) for i, r in enumerate(risk)]
picked = {r.image_id for r in select_exemplars(records, 0.1)}
logged = {r.image_id for r in select_exemplars([RiskRecord(i, 1, float(np.log(r))) for i, r in enumerate(risk)],
                                                0.1)}
print(len(picked), "exemplars; same after log transform:", picked == logged)
print("selected risks span", np.round(sorted(risk[list(picked)])[0], 3), "to",
      np.round(sorted(risk[list(picked)])[-1], 3), "; median", np.round(np.median(risk), 3))
