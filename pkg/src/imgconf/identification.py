"""Exact checks of image-based adjustment on tiny discrete image spaces.

A :class:`DiscreteWorld` enumerates every binary image of a small size, maps each
image to a confounder value through a deterministic table ``f``, and specifies the
treatment law p(T=1 | U, X) and a finite-support outcome law p(Y | T, U, X). All
probabilities are :class:`fractions.Fraction`, so the adjustment formulas below are
evaluated exactly and can be compared with ``==``.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Hashable

import numpy as np

from .estimators import ipw_ht

Image = tuple[int, ...]
MAX_PIXELS = 6


def all_images(height: int, width: int) -> list[Image]:
    if height * width > MAX_PIXELS:
        raise ValueError(f"image space capped at {MAX_PIXELS} pixels for exact enumeration")
    return list(itertools.product((0, 1), repeat=height * width))


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


@dataclass
class DiscreteWorld:
    height: int
    width: int
    image_probs: dict[Image, Fraction]
    confounder: dict[Image, Hashable]
    treatment: dict[tuple, Fraction]  # (u, x) -> p(T=1)
    outcome: dict[tuple, dict[Fraction, Fraction]]  # (t, u, x) -> {y: p}
    covariate: dict[Image, dict[Hashable, Fraction]] | None = None  # image -> {x: p(x | image)}

    def __post_init__(self) -> None:
        images = all_images(self.height, self.width)
        self.image_probs = {i: _frac(self.image_probs.get(i, 0)) for i in images}
        if sum(self.image_probs.values()) != 1:
            raise ValueError("image probabilities must sum to 1")
        if any(p < 0 for p in self.image_probs.values()):
            raise ValueError("image probabilities must be nonnegative")
        missing = [i for i in images if i not in self.confounder]
        if missing:
            raise ValueError(f"confounder map misses {len(missing)} images")
        if self.covariate is None:
            self.covariate = {i: {None: Fraction(1)} for i in images}
        for i, law in self.covariate.items():
            if sum(_frac(p) for p in law.values()) != 1:
                raise ValueError(f"covariate law for image {i} does not sum to 1")
        self.treatment = {k: _frac(v) for k, v in self.treatment.items()}
        for (u, x) in self.strata():
            p = self.treatment.get((u, x))
            if p is None or not 0 < p < 1:
                raise ValueError(f"p(T=1 | U={u}, X={x}) must be given and lie in (0, 1)")
            for t in (0, 1):
                law = self.outcome.get((t, u, x))
                if law is None or sum(_frac(q) for q in law.values()) != 1:
                    raise ValueError(f"outcome law for T={t}, U={u}, X={x} missing or not normalized")
        self.covariate = {i: {x: _frac(p) for x, p in law.items()} for i, law in self.covariate.items()}
        self.outcome_means = {k: _mean_outcome(law) for k, law in self.outcome.items()}
        self._cells = None

    def strata(self) -> set[tuple]:
        return {(self.confounder[i], x) for i in self.image_probs for x in self.covariate[i]}

    def cells(self) -> list[tuple]:
        """(image, x, t, p(image, x, t), E[Y | image, x, t]) rows of the observational law."""
        if self._cells is None:
            self._cells = list(self._iter_cells())
        return self._cells

    def _iter_cells(self):
        for i, pi in self.image_probs.items():
            if pi == 0:
                continue
            u = self.confounder[i]
            for x, px in self.covariate[i].items():
                p1 = self.treatment[(u, x)]
                for t, pt in ((1, p1), (0, 1 - p1)):
                    yield i, x, t, pi * px * pt, self.outcome_means[(t, u, x)]

    def joint(self):
        """Yield (image, x, t, y, probability) over the full observational law."""
        for i, pi in self.image_probs.items():
            if pi == 0:
                continue
            u = self.confounder[i]
            for x, px in self.covariate[i].items():
                p1 = self.treatment[(u, x)]
                for t, pt in ((1, p1), (0, 1 - p1)):
                    for y, py in self.outcome[(t, u, x)].items():
                        yield i, x, t, _frac(y), pi * _frac(px) * pt * _frac(py)


def preimages(world: DiscreteWorld) -> dict[Hashable, list[Image]]:
    """f^{-1}: confounder value -> images mapping to it."""
    inv: dict[Hashable, list[Image]] = defaultdict(list)
    for i, u in world.confounder.items():
        inv[u].append(i)
    return dict(inv)


def marginal_u(world: DiscreteWorld) -> dict[Hashable, Fraction]:
    """p(U=u) as the total image probability of f^{-1}(u)."""
    return {u: sum((world.image_probs[i] for i in imgs), Fraction(0)) for u, imgs in preimages(world).items()}


def _mean_outcome(law) -> Fraction:
    return sum((_frac(y) * _frac(p) for y, p in law.items()), Fraction(0))


def true_ate(world: DiscreteWorld) -> Fraction:
    """E[Y(1) - Y(0)] straight from the structural outcome law."""
    total = Fraction(0)
    for i, pi in world.image_probs.items():
        u = world.confounder[i]
        for x, px in world.covariate[i].items():
            total += pi * px * (world.outcome_means[(1, u, x)] - world.outcome_means[(0, u, x)])
    return total


def _adjusted(world: DiscreteWorld, key) -> Fraction:
    """sum_s p(s) (E[Y | T=1, s] - E[Y | T=0, s]) with s = key(image, x), from the observational law."""
    p_s: dict = defaultdict(Fraction)
    p_st: dict = defaultdict(Fraction)
    y_st: dict = defaultdict(Fraction)
    for i, x, t, p, ey in world.cells():
        s = key(i, x)
        p_st[(s, t)] += p
        y_st[(s, t)] += p * ey
        p_s[s] += p
    total = Fraction(0)
    for s, ps in p_s.items():
        if ps == 0:
            continue
        total += ps * (y_st[(s, 1)] / p_st[(s, 1)] - y_st[(s, 0)] / p_st[(s, 0)])
    return total


def ate_by_u_adjustment(world: DiscreteWorld) -> Fraction:
    return _adjusted(world, lambda i, x: (world.confounder[i], x))


def ate_by_image_adjustment(world: DiscreteWorld) -> Fraction:
    return _adjusted(world, lambda i, x: (i, x))


def ate_by_ipw_identity(world: DiscreteWorld) -> Fraction:
    """E[Y(t)] = E[Y p(T=t) / p(T=t | I, X) | T=t], each term from the observational law."""
    p_t: dict = defaultdict(Fraction)
    p_i: dict = defaultdict(Fraction)
    rows = world.cells()
    for i, x, t, p, _ in rows:
        p_t[t] += p
        p_i[(i, x)] += p
    means = {0: Fraction(0), 1: Fraction(0)}
    for i, x, t, p, ey in rows:
        propensity = p / p_i[(i, x)]
        # p(i, x | T=t) * E[Y | i, x, t] * p(T=t) / p(T=t | i, x)
        means[t] += (p / p_t[t]) * ey * p_t[t] / propensity
    return means[1] - means[0]


def ate_report(world: DiscreteWorld) -> dict[str, Fraction]:
    return {
        "true": true_ate(world),
        "u_adjustment": ate_by_u_adjustment(world),
        "image_adjustment": ate_by_image_adjustment(world),
        "ipw_identity": ate_by_ipw_identity(world),
    }


# -- example and random worlds -------------------------------------------------------

def diagonal_world(tau: Fraction = Fraction(1)) -> DiscreteWorld:
    """2x2 world: U = 1 when either diagonal pair is lit, p(T=1|U) = 3/10 + 4/10 U,
    Y = U + tau T deterministically, uniform images."""
    images = all_images(2, 2)

    def f(img: Image) -> int:
        a, b, c, d = img  # row-major: (0,0) (0,1) (1,0) (1,1)
        return int((a and d) or (b and c))

    return DiscreteWorld(
        2, 2,
        {i: Fraction(1, 16) for i in images},
        {i: f(i) for i in images},
        {(u, None): Fraction(3, 10) + Fraction(4, 10) * u for u in (0, 1)},
        {(t, u, None): {Fraction(u) + tau * t: Fraction(1)} for t in (0, 1) for u in (0, 1)},
    )


def _rand_frac(rng: np.random.Generator, lo: int = 1, hi: int = 19, den: int = 20) -> Fraction:
    return Fraction(int(rng.integers(lo, hi + 1)), den)


def _rand_simplex(rng: np.random.Generator, k: int, allow_zero: bool = False) -> list[Fraction]:
    w = rng.integers(0 if allow_zero else 1, 10, size=k).astype(int)
    if w.sum() == 0:
        w[0] = 1
    return [Fraction(int(v), int(w.sum())) for v in w]


def random_world(rng: np.random.Generator, height: int = 2, width: int = 2, n_u: int = 3, with_covariate: bool = False) -> DiscreteWorld:
    """Random valid world; f is many-to-one whenever n_u < 2**(height*width)."""
    images = all_images(height, width)
    probs = _rand_simplex(rng, len(images), allow_zero=True)
    f = {i: int(rng.integers(0, n_u)) for i in images}
    xs = (0, 1) if with_covariate else (None,)
    covariate = None
    if with_covariate:
        covariate = {i: dict(zip(xs, _rand_simplex(rng, 2))) for i in images}
    treatment = {(u, x): _rand_frac(rng) for u in range(n_u) for x in xs}
    support = [Fraction(v) for v in (-1, 0, 1, 2, 3)]
    outcome = {}
    for t in (0, 1):
        for u in range(n_u):
            for x in xs:
                outcome[(t, u, x)] = dict(zip(support, _rand_simplex(rng, len(support), allow_zero=True)))
    return DiscreteWorld(height, width, dict(zip(images, probs)), f, treatment, outcome, covariate)


# -- residual confounding -----------------------------------------------------------------

def _odds_shift(p: Fraction, ratio: Fraction) -> Fraction:
    odds = p / (1 - p) * ratio
    return odds / (1 + odds)


def residual_confounding_demo(
    world: DiscreteWorld,
    hidden_prob: Fraction = Fraction(1, 2),
    treatment_odds_ratio: Fraction = Fraction(1),
    outcome_shift: Fraction = Fraction(0),
) -> tuple[Fraction, Fraction]:
    """Add a hidden binary driver R ~ Bernoulli(hidden_prob), independent of the image.

    The confounder becomes (f(I), R): R multiplies the treatment odds by
    ``treatment_odds_ratio`` and shifts every outcome by ``outcome_shift``. Returns
    (ATE from adjusting for the image alone, true ATE).
    """
    hidden_prob = _frac(hidden_prob)
    ratio, shift = _frac(treatment_odds_ratio), _frac(outcome_shift)
    p_i: dict = defaultdict(Fraction)
    p_it: dict = defaultdict(Fraction)
    y_it: dict = defaultdict(Fraction)
    truth = Fraction(0)
    for i, pi in world.image_probs.items():
        u = world.confounder[i]
        for x, px in world.covariate[i].items():
            for r, pr in ((1, hidden_prob), (0, 1 - hidden_prob)):
                base = pi * px * pr
                p1 = _odds_shift(world.treatment[(u, x)], ratio**r)
                means = {t: world.outcome_means[(t, u, x)] + shift * r for t in (0, 1)}
                truth += base * (means[1] - means[0])
                p_i[(i, x)] += base
                for t, pt in ((1, p1), (0, 1 - p1)):
                    p_it[(i, x, t)] += base * pt
                    y_it[(i, x, t)] += base * pt * means[t]
    by_image = Fraction(0)
    for s, ps in p_i.items():
        if ps == 0:
            continue
        by_image += ps * (y_it[(*s, 1)] / p_it[(*s, 1)] - y_it[(*s, 0)] / p_it[(*s, 0)])
    return by_image, truth


# -- finite-population enumeration ------------------------------------------------------------

def ht_expectation_by_enumeration(propensities, outcome_laws) -> tuple[Fraction, Fraction]:
    """Exact expectation of the HT estimator over every treatment and outcome realization.

    ``outcome_laws[k][t]`` is unit k's finite outcome law {y: p} under arm t.
    Returns (E[tau_hat_HT], finite-population ATE).
    """
    pis = [_frac(p) for p in propensities]
    n = len(pis)
    if n > 8:
        raise ValueError("enumeration limited to 8 units")
    laws = [{t: {_frac(y): _frac(p) for y, p in law[t].items()} for t in (0, 1)} for law in outcome_laws]
    truth = sum((_mean_outcome(l[1]) - _mean_outcome(l[0]) for l in laws), Fraction(0)) / n
    expectation = Fraction(0)
    pi_arr = np.array(pis, dtype=object)
    for assign in itertools.product((0, 1), repeat=n):
        p_assign = math.prod((p if a else 1 - p) for p, a in zip(pis, assign))
        if 0 < sum(assign) < n:
            pass
        supports = [list(laws[k][a].items()) for k, a in enumerate(assign)]
        for combo in itertools.product(*supports):
            ys = np.array([y for y, _ in combo], dtype=object)
            p_y = math.prod(p for _, p in combo)
            t = np.array(assign, dtype=object)
            terms = t * ys / pi_arr - (1 - t) * ys / (1 - pi_arr)
            expectation += p_assign * p_y * terms.sum() / n
    return expectation, truth


def proportional_sample(world: DiscreteWorld):
    """Finite sample whose unit counts match p(I) p(T | U) exactly.

    Returns (treatments, propensities, confounder values, images) as object arrays of
    Fractions. Weighting by the true propensity balances any image function exactly.
    """
    if any(list(law) != [None] for law in world.covariate.values()):
        raise ValueError("proportional samples are built for worlds without covariates")
    fracs = []
    for i, pi in world.image_probs.items():
        p1 = world.treatment[(world.confounder[i], None)]
        fracs += [pi * p1, pi * (1 - p1)]
    scale = math.lcm(*(f.denominator for f in fracs if f))
    t, p, u, imgs = [], [], [], []
    for i, pi in world.image_probs.items():
        p1 = world.treatment[(world.confounder[i], None)]
        for arm, share in ((1, pi * p1), (0, pi * (1 - p1))):
            count = int(share * scale)
            t += [arm] * count
            p += [p1] * count
            u += [_frac(world.confounder[i])] * count
            imgs += [i] * count
    return (np.array(t, dtype=object), np.array(p, dtype=object), np.array(u, dtype=object), imgs)


def check_identification(n_worlds: int = 100, seed: int = 0) -> tuple[bool, list[str]]:
    """Fixed diagonal world plus ``n_worlds`` random ones; returns (all passed, messages)."""
    rng = np.random.default_rng(seed)
    worlds = [("diagonal 2x2", diagonal_world())]
    for k in range(n_worlds):
        h, w = (2, 2) if k % 2 else (1, 3)
        worlds.append((f"random #{k}", random_world(rng, h, w, n_u=2 + k % 3, with_covariate=k % 4 == 3)))
    lines, ok = [], True
    for name, w in worlds:
        rep = ate_report(w)
        good = rep["u_adjustment"] == rep["image_adjustment"] == rep["ipw_identity"] == rep["true"]
        ok &= good
        if not good:
            lines.append(f"FAIL {name}: " + ", ".join(f"{k}={v}" for k, v in rep.items()))
    lines.append(f"{'PASS' if ok else 'FAIL'} identification: {len(worlds)} worlds, adjustment by U, by image and IPW agree exactly")
    return ok, lines


# -- text format ---------------------------------------------------------------------------

def _img_key(img: Image) -> str:
    return "".join(str(b) for b in img)


def _parse_img(s: str) -> Image:
    return tuple(int(c) for c in s)


def _parse_val(s):
    if s in ("", "null", None):
        return None
    try:
        return Fraction(s)
    except (ValueError, TypeError):
        return s


def world_to_json(world: DiscreteWorld) -> str:
    def key(*parts):
        return "|".join("" if p is None else str(p) for p in parts)

    doc = {
        "height": world.height,
        "width": world.width,
        "image_probs": {_img_key(i): str(p) for i, p in world.image_probs.items()},
        "confounder": {_img_key(i): str(u) for i, u in world.confounder.items()},
        "treatment": {key(u, x): str(p) for (u, x), p in world.treatment.items()},
        "outcome": {key(t, u, x): {str(y): str(p) for y, p in law.items()} for (t, u, x), law in world.outcome.items()},
    }
    if any(list(law) != [None] for law in world.covariate.values()):
        doc["covariate"] = {_img_key(i): {str(x): str(p) for x, p in law.items()} for i, law in world.covariate.items()}
    return json.dumps(doc, indent=2)


def world_from_json(text: str) -> DiscreteWorld:
    """Parse a world file; probabilities may be written as "a/b" strings."""
    doc = json.loads(text)
    known = {"height", "width", "image_probs", "confounder", "treatment", "outcome", "covariate"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown world keys: {sorted(unknown)}")
    h, w = int(doc["height"]), int(doc["width"])
    if doc["image_probs"] == "uniform":
        n = 2 ** (h * w)
        probs = {i: Fraction(1, n) for i in all_images(h, w)}
    else:
        probs = {_parse_img(k): Fraction(v) for k, v in doc["image_probs"].items()}
    conf = {_parse_img(k): _parse_val(v) for k, v in doc["confounder"].items()}

    def split(k: str, n: int):
        parts = k.split("|")
        parts += [""] * (n - len(parts))
        return tuple(_parse_val(p) for p in parts)

    treatment = {split(k, 2): Fraction(v) for k, v in doc["treatment"].items()}
    outcome = {}
    for k, law in doc["outcome"].items():
        t, u, x = split(k, 3)
        outcome[(int(t), u, x)] = {Fraction(y): Fraction(p) for y, p in law.items()}
    covariate = None
    if "covariate" in doc:
        covariate = {_parse_img(k): {_parse_val(x): Fraction(p) for x, p in law.items()} for k, law in doc["covariate"].items()}
    return DiscreteWorld(h, w, probs, conf, treatment, outcome, covariate)


def load_world(path: str | Path) -> DiscreteWorld:
    return world_from_json(Path(path).read_text(encoding="utf-8"))
