import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lcron.losses import joint_survival, stage_denominators, topk_select_prob
from lcron.diffsort import sort_operator

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# Finite differences are only meaningful where the loss is smooth. The clamp
# inside the cross-entropy has kinks at eps and 1 - eps, and the curvature of
# ln(p) blows up near 0, so instances with any survival probability within
# CLAMP_MARGIN of either end are redrawn. |s_j - s_k| and the sort order
# also kink where two scores meet, so scores closer than MIN_GAP (ten
# finite-difference steps) are redrawn too. The autodiff oracle covers the rest.
CLAMP_MARGIN = 1e-4
MIN_GAP = 1e-5


def survival_at(stage_scores, quotas, temperature, operator):
    probs = [topk_select_prob(sort_operator(operator, np.atleast_2d(s), temperature), q)
             for s, q in zip(stage_scores, quotas)]
    return joint_survival(probs)


def smooth_enough(p, margin=CLAMP_MARGIN) -> bool:
    return bool(np.all((p > margin) & (p < 1.0 - margin)))


def draw_smooth_instance(rng, n, n_stages, quotas, temperature, operator, max_tries=200_000, scale=1.0):
    """Random scores and ground truth whose survival probabilities avoid the clamp region.

    Every stage quota is checked on its own (the single-stage losses) and
    jointly (the end-to-end loss). Scores are standard normal times
    ``scale``. Returns the instance and the number of rejected draws.
    """
    for tries in range(max_tries):
        scores = [rng.normal(size=n) * scale for _ in range(n_stages)]
        k = int(rng.integers(1, n))
        gt = np.zeros(n)
        gt[rng.choice(n, size=k, replace=False)] = 1.0
        ok = n < 2 or min(np.diff(np.sort(x)).min() for x in scores) >= MIN_GAP
        ok = ok and smooth_enough(survival_at(scores, quotas, temperature, operator))
        ok = ok and all(smooth_enough(survival_at([s], [k], temperature, operator)) for s in scores)
        if ok:
            return scores, gt, k, tries
    raise RuntimeError("no smooth instance found")


def frozen(stage_scores, temperature, operator):
    return stage_denominators([np.asarray(s) for s in stage_scores], temperature, operator)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
