"""A short walk through the Cholesky-space geometry.

Run with ``python3 demos/geometry_tour.py``. Prints the exp/log round trip,
the closed-form mean against Karcher flow, and the translation group laws on
a few random points.
"""
import time

import numpy as np

from odergru import geometry as geo
from odergru.spd_oracle import cholesky_compose, karcher_flow_mean, random_cholesky

rng = np.random.default_rng(7)
d = 3
print(f"d = {d}: a lower-triangular factor is stored in {geo.n_entries(d)} packed entries")

# round trip: log then exp returns the point
k, x = random_cholesky(rng, d, size=2)
v = geo.log_map(k, x)
print("round-trip error       ", np.abs(geo.exp_map(k, v) - x).max())
print("distance d(k, x)       ", float(geo.distance(k, x)))
print("tangent norm at k      ", float(np.sqrt(geo.metric(k, v, v))))

# means: the closed form needs one pass, Karcher flow iterates
pts = random_cholesky(rng, d, size=5)
t0 = time.perf_counter()
closed = geo.frechet_mean(pts)
t1 = time.perf_counter()
res = karcher_flow_mean(pts, "cholesky", tol=1e-12, full_output=True)
t2 = time.perf_counter()
print(f"closed-form mean        {1e6 * (t1 - t0):.0f} us")
print(f"Karcher flow            {1e6 * (t2 - t1):.0f} us, {res.n_iter} iterations")
print("difference             ", np.abs(closed - res.mean).max())
print("mean as SPD matrix:\n", np.round(cholesky_compose(closed), 4))

# translation is an abelian group with identity I
a, b, c = random_cholesky(rng, d, size=3)
e = geo.identity(d)
print("identity law           ", np.abs(geo.translate(a, e) - a).max())
print("inverse law            ", np.abs(geo.translate(a, geo.group_inverse(a)) - e).max())
print("commutativity          ", np.abs(geo.translate(a, b) - geo.translate(b, a)).max())
print("associativity          ", np.abs(geo.translate(geo.translate(a, b), c)
                                        - geo.translate(a, geo.translate(b, c))).max())
