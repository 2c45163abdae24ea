"""Site ranking by exhaustive multi-objective Pareto-front accumulation.

The pipeline ingests per-site objective tables, sweeps every subset of
objectives, accumulates normalized Pareto-front membership into a siting
metric plus per-objective importance attribution, and fits location-based
predictors (lookup table + interpolation, or a two-stage feedforward
network) over the results.
"""

from siterank.combinatorics import CombinationSet, binomial, enumerate_combinations, rank, unrank
from siterank.dataset import (
    AliasMap,
    ObjectiveSpec,
    ScaledMatrix,
    SiteRecord,
    SiteTable,
    default_spec,
    orient_and_scale,
    parse_sites,
    truncate_dedup,
)
from siterank.pareto import dominates, non_dominated_mask, non_dominated_mask_naive
from siterank.ranking import (
    ContributionResult,
    LengthAccumulator,
    RankResult,
    SitingScores,
    accumulate_length,
    contributions,
    run_sweep,
    siting_metric,
    variance_by_length,
)

__version__ = "0.1.0"
