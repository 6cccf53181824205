"""
Scenario tensors
================

A scenario is four occupancy grids, half a second apart, centred on the
ego vehicle at the last frame.  Cells are free (0), unknown (0.5) or
occupied (1).  Rows run across the road, columns along it.
"""
import numpy as np

from rfapclust.scenario import (CLASS_NAMES, DESK_GRID, GeneratorConfig, generate_synthetic,
                                permutation_index, shuffle_temporal)

###############################################################################
# Draw a handful of scenes per class.  Every class has its own seeded stream.
ds = generate_synthetic(GeneratorConfig(seed=0, n_per_class=5))
print(len(ds), "tensors of shape", ds.tensors.shape[1:], "on a", DESK_GRID.shape, "grid")

###############################################################################
# Render the frames of a cut-in as text: '#' occupied, '.' free, ' ' unknown.
glyph = {0.0: ".", 0.5: " ", 1.0: "#"}
cut_in = CLASS_NAMES.index("cut_in_from_left") * 5
for t, frame in zip(DESK_GRID.times(), ds.tensors[cut_in]):
    print(f"t = {t:+.1f} s")
    for row in frame:
        print("".join(glyph[float(v)] for v in row))

###############################################################################
# The self-supervised task shuffles the frames.  There are 24 orders,
# numbered lexicographically; (1, 2, 3, 4) is class 0.
order = (3, 1, 4, 2)
shuffled = shuffle_temporal(ds.tensors[cut_in], order)
print("order", order, "is class", permutation_index(order))
print("frame 0 of the shuffle is original frame", order[0],
      np.array_equal(shuffled[0], ds.tensors[cut_in][order[0] - 1]))
