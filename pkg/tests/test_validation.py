import numpy as np

from brsdr import geweke, validation


def test_quick_suite_passes():
    checks = validation.run_validation(quick=True)
    assert [c.name for c in checks] == ["nngp_dense_agreement", "conditional_term_closed_forms",
                                        "polya_gamma_moments", "bootstrap_mean_identity",
                                        "latent_factor_conditional", "ensemble_weight_example"]
    failed = [f"{c.name}: {c.detail}" for c in checks if not c.passed]
    assert not failed


def test_batch_means_on_independent_draws(rng):
    x = rng.normal(size=10_000)
    se = geweke.batch_means_se(x)
    assert 0.7 < se / (1 / np.sqrt(10_000)) < 1.3


def test_prior_draws_have_prior_moments():
    # IG(6, 6) in the (shape/2, scale/2) form has mean 6 / 5
    fwd = geweke.marginal_conditional(geweke.default_problem(False), 4000)
    assert abs(fwd["sigma2"].mean() - 1.2) < 4 * fwd["sigma2"].std() / np.sqrt(4000)


def test_short_geweke_run_is_sane():
    scores = geweke.geweke_scores(geweke.default_problem(False, seed=3), sweeps=1000,
                                  forward_draws=1000)
    assert len(scores) == 2 * (1 + 3 + 3 + 1)
    assert all(np.isfinite(v) for v in scores.values())
