"""Independent reference implementations used to cross-check the package."""
from __future__ import annotations

import cmath
import math
from fractions import Fraction

import numpy as np

SEG = 0.0775


def kinematics_complex(genes, damage=None):
    """Joint positions via complex multiplication; heading starts at -1j (straight down)."""
    angles = [math.pi * (g - 0.5) for g in genes]
    if damage is not None:
        j = damage.joint - 1
        if hasattr(damage, "angle"):
            angles[j] = damage.angle
        else:
            angles[j] = max(-math.pi / 2, min(math.pi / 2, angles[j] + damage.epsilon))
    z, heading = 0j, -1j
    points = [z]
    for a in angles:
        heading *= cmath.exp(1j * a)
        z += SEG * heading
        points.append(z)
    return [(p.real, p.imag) for p in points]


def _orient(p, q, r):
    v = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    if abs(v) < 1e-12:
        return 0
    return 1 if v > 0 else -1


def _between(p, q, r):
    return min(p[0], r[0]) - 1e-12 <= q[0] <= max(p[0], r[0]) + 1e-12 and min(p[1], r[1]) - 1e-12 <= q[1] <= max(
        p[1], r[1]
    ) + 1e-12


def segments_cross(a, b, c, d) -> bool:
    """Textbook orientation test for closed segments ab and cd."""
    o1, o2, o3, o4 = _orient(a, b, c), _orient(a, b, d), _orient(c, d, a), _orient(c, d, b)
    if o1 != o2 and o3 != o4:
        return True
    return (
        (o1 == 0 and _between(a, c, b))
        or (o2 == 0 and _between(a, d, b))
        or (o3 == 0 and _between(c, a, d))
        or (o4 == 0 and _between(c, b, d))
    )


def safe_bruteforce(points) -> bool:
    if any(y > 1e-9 for _, y in points):
        return False
    segs = list(zip(points[:-1], points[1:]))
    for i in range(len(segs)):
        for j in range(i + 2, len(segs)):
            if segments_cross(*segs[i], *segs[j]):
                return False
    return True


def fitness_exact(genes) -> Fraction:
    g = [Fraction(round(x * 40), 40) for x in genes]
    mean = sum(g) / len(g)
    return -sum((x - mean) ** 2 for x in g) / len(g)


def cliffs_delta_pairs(a, b) -> float:
    gt = sum(1 for x in a for y in b if x > y)
    lt = sum(1 for x in a for y in b if x < y)
    return (gt - lt) / (len(a) * len(b))


def build_map_reference(db, feature_map, bins):
    """Offer every record to a fresh dict-archive in database iteration order."""
    cells = {}
    order = []
    for rec in db.records():
        beta = np.clip(feature_map(np.asarray(rec.base_features)[None])[0], 0.0, 1.0)
        key = tuple(min(int(math.floor(x * bins)), bins - 1) for x in beta)
        if key not in cells:
            cells[key] = rec
            order.append(key)
        elif rec.fitness > cells[key].fitness:
            cells[key] = rec
    return cells, order
