"""Synthetic data for the three experiments and ratings ingestion."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .lgm import Dataset
from .models.ar import NoisyArModel, pacf_to_ar
from .models.sbl import SblModel

__all__ = [
    "SyntheticSpec",
    "RatingsTable",
    "gen_noisy_ar",
    "gen_sparse_signals",
    "gen_low_rank_ratings",
    "load_ratings_csv",
    "split_assignments",
    "TRAIN",
    "VALIDATION",
    "TEST",
]

KINDS = ("noisy_ar", "sparse_signals", "low_rank_ratings")
TRAIN, VALIDATION, TEST = 0, 1, 2
_DEFAULT_MASK = {"noisy_ar": 0.9, "sparse_signals": 0.15, "low_rank_ratings": 0.1}
_DEFAULT_NOISE = {"noisy_ar": None, "sparse_signals": 0.01, "low_rank_ratings": 0.3}


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic dataset.

    ``dim`` is the series length (noisy AR), the signal length (sparse
    signals, a perfect square) or the number of items (ratings).
    ``mask_fraction`` is the fraction of entries each mask keeps; it defaults
    to 0.9 for AR series, 0.15 for transform measurements and 0.1 for ratings.
    ``noise`` is a standard deviation (ignored for AR, whose noise variance is
    a model parameter).
    """

    kind: str
    dim: int
    n_points: int
    order: int = 5
    rank: int = 5
    support_fraction: float = 0.1
    mask_fraction: float | None = None
    noise: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}; choose from {KINDS}")
        if self.mask_fraction is None:
            self.mask_fraction = _DEFAULT_MASK[self.kind]
        if self.noise is None:
            self.noise = _DEFAULT_NOISE[self.kind]
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ValueError("mask_fraction must lie in [0, 1]")
        if not 0.0 <= self.support_fraction <= 1.0:
            raise ValueError("support_fraction must lie in [0, 1]")
        if int(self.dim) < 1 or int(self.n_points) < 1:
            raise ValueError("dim and n_points must be positive")


def _row_masks(rng, dim, n, fraction):
    keep = int(round(fraction * dim))
    weights = np.zeros((dim, n))
    for j in range(n):
        weights[rng.choice(dim, keep, replace=False), j] = 1.0
    return weights


def gen_noisy_ar(spec: SyntheticSpec, theta=None):
    """Noisy AR series with random true parameters.

    Returns ``(dataset, theta_true, latent)`` where ``latent`` is
    ``(dim, n_points)``.  ``theta`` overrides the sampled truth.
    """
    if spec.kind != "noisy_ar":
        raise ValueError("spec is not a noisy AR recipe")
    if spec.order >= spec.dim:
        raise ValueError("AR order must be smaller than the series length")
    rng = np.random.default_rng(spec.seed)
    model = NoisyArModel(spec.order, spec.dim)
    if theta is None:
        pacf = rng.uniform(-1.0, 1.0, spec.order)
        kappa, lam = np.exp(rng.uniform(np.log(0.1), np.log(10.0), 2))
        theta = model.pack(pacf_to_ar(pacf), kappa, lam)
    theta = model.check_theta(theta)
    _, _, lam = model.split(theta)
    latent = model.sample_latent(theta, spec.n_points, rng)
    y = latent + np.sqrt(lam) * rng.standard_normal(latent.shape)
    weights = _row_masks(rng, spec.dim, spec.n_points, spec.mask_fraction)
    return Dataset(y, weights), theta, latent


def gen_sparse_signals(spec: SyntheticSpec):
    """Nonnegative signals sharing one support, observed through random
    subsets of their orthonormal cosine transform.

    Returns ``(dataset, signals)`` with ``signals`` of shape ``(dim, n_points)``.
    """
    if spec.kind != "sparse_signals":
        raise ValueError("spec is not a sparse-signal recipe")
    rng = np.random.default_rng(spec.seed)
    model = SblModel(spec.dim)
    D = model.dim
    k = int(round(spec.support_fraction * D))
    support = rng.choice(D, k, replace=False)
    signals = np.zeros((D, spec.n_points))
    signals[support] = rng.uniform(0.0, 1.0, (k, spec.n_points))
    full = model.transform.apply(signals)
    y = full + spec.noise * rng.standard_normal(full.shape)
    weights = _row_masks(rng, D, spec.n_points, spec.mask_fraction)
    return Dataset(y, weights), signals


@dataclass
class RatingsTable:
    """Ratings triples with dense user/item indices and a split assignment.

    ``user_ids[u]`` and ``item_ids[i]`` recover the original identifiers;
    ``split`` holds ``TRAIN``, ``VALIDATION`` or ``TEST`` per rating.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    split: np.ndarray = field(default=None)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=float)
        if self.split is None:
            self.split = np.full(self.ratings.size, TRAIN, dtype=np.int8)

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    def __len__(self):
        return self.ratings.size

    def select(self, which):
        code = {"train": TRAIN, "validation": VALIDATION, "test": TEST}[which]
        return self.split == code

    def matrix(self, which="train"):
        """``(n_users, n_items)`` array with ``NaN`` where no rating is in the split."""
        sel = self.select(which)
        out = np.full((self.n_users, self.n_items), np.nan)
        out[self.users[sel], self.items[sel]] = self.ratings[sel]
        return out

    def triples(self, which="test"):
        sel = self.select(which)
        return self.users[sel], self.items[sel], self.ratings[sel]

    @property
    def cold_users(self):
        """Users with no training rating (they receive the constant prediction)."""
        seen = np.zeros(self.n_users, dtype=bool)
        seen[self.users[self.select("train")]] = True
        return ~seen


def split_assignments(n, seed=0, test_fraction=0.1, validation_fraction=0.1):
    """Seeded split codes: ``test_fraction`` of all ratings to test, then
    ``validation_fraction`` of the remainder to validation."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    order = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    n_val = int(round(validation_fraction * (n - n_test)))
    split = np.full(n, TRAIN, dtype=np.int8)
    split[order[:n_test]] = TEST
    split[order[n_test : n_test + n_val]] = VALIDATION
    return split


def gen_low_rank_ratings(spec: SyntheticSpec):
    """Ratings from a rank-``rank`` factor model, rounded to half stars.

    Returns ``(table, truth)`` where ``truth`` holds the generating loadings,
    offsets and user factors.  Each user rates a ``mask_fraction`` share of the
    items.
    """
    if spec.kind != "low_rank_ratings":
        raise ValueError("spec is not a ratings recipe")
    rng = np.random.default_rng(spec.seed)
    M, N, r = int(spec.dim), int(spec.n_points), int(spec.rank)
    loadings = rng.normal(0.0, 1.0 / np.sqrt(r), (M, r))
    offsets = rng.normal(3.5, 0.4, M)
    factors = rng.standard_normal((r, N))
    clean = loadings @ factors + offsets[:, None]
    weights = _row_masks(rng, M, N, spec.mask_fraction)
    noisy = clean + spec.noise * rng.standard_normal(clean.shape)
    rated = np.clip(np.round(2.0 * noisy) / 2.0, 1.0, 5.0)
    items, users = np.nonzero(weights)
    order = np.lexsort((items, users))
    users, items = users[order], items[order]
    table = RatingsTable(users, items, rated[items, users], np.arange(N), np.arange(M))
    table.split = split_assignments(len(table), spec.seed)
    truth = {"loadings": loadings, "offsets": offsets, "factors": factors}
    return table, truth


_HEADER = ["userId", "movieId", "rating", "timestamp"]


def load_ratings_csv(path, seed=0, test_fraction=0.1, validation_fraction=0.1):
    """Read ``userId,movieId,rating,timestamp`` rows into a :class:`RatingsTable`.

    Identifiers are remapped to dense indices in order of first appearance.  A
    repeated (user, item) pair keeps the last rating and emits a warning.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: file is empty") from None
        if [h.strip() for h in header] != _HEADER:
            raise ValueError(f"{path}: line 1: expected header {','.join(_HEADER)}")
        latest = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValueError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            try:
                user, item = row[0].strip(), row[1].strip()
                rating = float(row[2])
                int(row[3])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: malformed row {row!r}") from None
            if not user or not item:
                raise ValueError(f"{path}: line {lineno}: empty identifier")
            if not 1.0 <= rating <= 5.0 or (2.0 * rating) != round(2.0 * rating):
                raise ValueError(f"{path}: line {lineno}: rating {rating} not a half step in [1, 5]")
            key = (user, item)
            if key in latest:
                warnings.warn(
                    f"{path}: line {lineno}: duplicate rating for user {user}, item {item}; "
                    "keeping the last one",
                    stacklevel=2,
                )
            latest[key] = rating
    if not latest:
        raise ValueError(f"{path}: no ratings found")
    user_index, item_index = {}, {}
    users, items, ratings = [], [], []
    for (user, item), rating in latest.items():
        users.append(user_index.setdefault(user, len(user_index)))
        items.append(item_index.setdefault(item, len(item_index)))
        ratings.append(rating)
    table = RatingsTable(
        np.array(users),
        np.array(items),
        np.array(ratings),
        np.array(list(user_index)),
        np.array(list(item_index)),
    )
    table.split = split_assignments(len(table), seed, test_fraction, validation_fraction)
    return table
