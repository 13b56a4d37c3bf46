"""Seen / not-seen category holdout experiment."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import HEMISPHERES, CategoryLabel, StimulusDataset
from .encoder import FeatureBankConfig, dataset_features, mean_absolute_error, pearson_per_vertex, train_encoder
from .ensemble import partition_folds, predict_ensemble, train_ensemble, uncertainty_decomposition
from .errors import ConfigInvalid, TooFewCategoryImages

CONFIGURATIONS = ("not_seen", "seen")


@dataclass(frozen=True)
class HoldoutSplit:
    category: CategoryLabel
    not_seen_train: tuple
    seen_train: tuple
    test_ids: tuple
    general_val_ids: tuple
    seed: int
    total_category_images: int

    def train_ids(self, configuration: str) -> tuple:
        if configuration == "not_seen":
            return self.not_seen_train
        if configuration == "seen":
            return self.seen_train
        raise ValueError(f"unknown configuration {configuration!r}")

    def check(self, dataset: StimulusDataset) -> None:
        """Raise AssertionError unless every split invariant holds exactly."""
        name = self.category.name
        seen, unseen = set(self.seen_train), set(self.not_seen_train)
        test, val = set(self.test_ids), set(self.general_val_ids)
        assert len(seen) == len(self.seen_train) and len(unseen) == len(self.not_seen_train)
        assert len(seen) == len(unseen), "training sets differ in size"
        assert not test & seen and not test & unseen, "test ids leak into training"
        assert not val & seen and not val & unseen and not val & test, "validation ids leak"
        assert not any(dataset.stimulus(i).depicts(name) for i in unseen), "category in not_seen"
        assert not any(dataset.stimulus(i).depicts(name) for i in val), "category in validation"
        assert all(dataset.stimulus(i).depicts(name) for i in test)


def build_holdout_splits(dataset: StimulusDataset, category: str, n_test: int = 100, seed: int = 0,
                         n_val: int = 100) -> HoldoutSplit:
    """Equal-size training sets with and without (most of) one category.

    ``not_seen`` drops every image of the category. ``seen`` drops only the
    ``n_test`` test images plus as many random category-free images as
    needed to match sizes. A category-free validation set is held out of
    both.
    """
    label = dataset.category(category)
    if n_test < 2 or n_val < 2:
        raise ConfigInvalid("n_test and n_val must be >= 2")
    cat_ids = dataset.ids_depicting(category)
    cat_set = set(cat_ids)
    free_ids = [i for i in dataset.image_ids if i not in cat_set]
    if not cat_ids or len(cat_ids) < n_test:
        raise TooFewCategoryImages(f"{category!r} appears in {len(cat_ids)} images; need {max(n_test, 1)}")
    n_extra = len(cat_ids) - n_test
    if len(free_ids) < n_val + n_extra:
        raise TooFewCategoryImages(
            f"{len(free_ids)} category-free images cannot cover {n_val} validation and {n_extra} removals")
    rng = np.random.default_rng((seed, 3))
    test = sorted(int(cat_ids[k]) for k in rng.choice(len(cat_ids), n_test, replace=False))
    free_perm = [int(free_ids[k]) for k in rng.permutation(len(free_ids))]
    val = sorted(free_perm[:n_val])
    extra = set(free_perm[n_val:n_val + n_extra])
    drop_seen = set(test) | set(val) | extra
    drop_unseen = set(cat_ids) | set(val)
    split = HoldoutSplit(
        category=label,
        not_seen_train=tuple(i for i in dataset.image_ids if i not in drop_unseen),
        seen_train=tuple(i for i in dataset.image_ids if i not in drop_seen),
        test_ids=tuple(test),
        general_val_ids=tuple(val),
        seed=int(seed),
        total_category_images=len(cat_ids),
    )
    split.check(dataset)
    return split


@dataclass(frozen=True)
class HoldoutRow:
    configuration: str
    mae: dict
    sd_total: dict
    sd_across_images: dict
    sd_across_folds: dict
    corr: float
    corr_per_hemisphere: dict
    total_images: int


@dataclass(frozen=True)
class HoldoutReport:
    category: str
    rows: dict
    split: HoldoutSplit
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, configuration: str) -> HoldoutRow:
        return self.rows[configuration]

    @property
    def corr_gap(self) -> float:
        return abs(self.rows["seen"].corr - self.rows["not_seen"].corr)


def _run_configuration(dataset, split, configuration, config, seed, n_folds, threads, train_kwargs):
    # seeds depend only on the configuration name, so run order cannot matter
    offset = CONFIGURATIONS.index(configuration) * 1000
    train_ids = split.train_ids(configuration)
    folds = partition_folds(train_ids, n_folds, seed + offset)
    fold_encoders = train_ensemble(dataset, folds, config, base_seed=seed + offset, threads=1, **train_kwargs)
    full = train_encoder(dataset, train_ids, config, seed=seed + offset + n_folds, **train_kwargs)

    test = list(split.test_ids)
    unc = uncertainty_decomposition(predict_ensemble(fold_encoders, dataset, test))
    full_test = predict_ensemble([full], dataset, test)
    full_val = predict_ensemble([full], dataset, list(split.general_val_ids))
    mae, corr = {}, {}
    for hemi in HEMISPHERES:
        mae[hemi] = mean_absolute_error(full_test.hemisphere(hemi)[0], dataset.responses(hemi, test))
        corr[hemi] = pearson_per_vertex(full_val.hemisphere(hemi)[0],
                                        dataset.responses(hemi, split.general_val_ids))[1]
    return HoldoutRow(
        configuration=configuration,
        mae=mae,
        sd_total={h: unc.whole[h].sd_total for h in HEMISPHERES},
        sd_across_images={h: unc.whole[h].sd_across_images for h in HEMISPHERES},
        sd_across_folds={h: unc.whole[h].sd_across_folds for h in HEMISPHERES},
        corr=float(np.mean([corr[h] for h in HEMISPHERES])),
        corr_per_hemisphere=corr,
        total_images=split.total_category_images,
    )


def run_holdout_experiment(dataset: StimulusDataset, category: str, config: FeatureBankConfig | None = None,
                           seed: int = 0, n_test: int = 100, n_val: int = 100, n_folds: int = 5,
                           threads: int = 1, configurations: Sequence[str] = CONFIGURATIONS,
                           **train_kwargs) -> HoldoutReport:
    """Train fold and full-train encoders for both configurations and summarise them on the test ids."""
    config = config or FeatureBankConfig()
    split = build_holdout_splits(dataset, category, n_test, seed, n_val)
    dataset_features(dataset, config, threads=threads)

    def run(name):
        return _run_configuration(dataset, split, name, config, seed, n_folds, threads, train_kwargs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, configurations))
    else:
        results = [run(c) for c in configurations]
    rows = {r.configuration: r for r in results}
    meta = {"seed": seed, "n_test": n_test, "n_val": n_val, "n_folds": n_folds,
            "mae_instance": "full-train", "corr_split": "category-free validation"}
    return HoldoutReport(category, {c: rows[c] for c in CONFIGURATIONS if c in rows}, split, meta)
