import pytest

from gru4rec import _faults
from gru4rec import validation as v


@pytest.mark.parametrize(
    "loss, mode, layers",
    [("cross-entropy", "separate", [4]), ("bpr-max", "shared", [4, 3]), ("cross-entropy", "none", [4, 3])],
)
def test_gradcheck_examples(loss, mode, layers):
    report = v.gradcheck(loss, mode, layers, seed=7)
    assert report.passed and report.value < 1e-4


def test_gradcheck_suite_covers_grid():
    reports = v.run_gradcheck_suite(7)
    assert len(reports) == 12
    assert all(r.passed for r in reports)


def test_reset_check_passes():
    r = v.run_reset_check()
    assert r.passed and r.detail == "50 steps"


def test_sampler_check_passes():
    reports = v.run_sampler_check(draws=200_000)
    assert [r.name for r in reports] == ["sampler[alpha=0]", "sampler[alpha=0.5]", "sampler[alpha=0.75]", "sampler[alpha=1]"]
    assert all(r.passed for r in reports)


def test_sampler_check_detects_wrong_distribution(monkeypatch):
    # a sampler that ignores alpha and always draws proportionally to support
    orig = v.NegativeSampler.__init__

    def wrong_alpha(self, supports, alpha, rng, cache_size=10):
        orig(self, supports, 1.0, rng, cache_size)

    monkeypatch.setattr(v.NegativeSampler, "__init__", wrong_alpha)
    assert not v.run_sampler_check(alphas=(0.5,), draws=200_000)[0].passed


def test_oracle_equivalences_pass():
    reports = v.run_oracle_equivalences()
    assert all(r.passed for r in reports), [r for r in reports if not r.passed]


def test_checks_are_seed_reproducible():
    a = v.gradcheck("bpr-max", "none", [4], seed=3)
    b = v.gradcheck("bpr-max", "none", [4], seed=3)
    assert a == b
    assert v.run_reset_check(seed=5) == v.run_reset_check(seed=5)


# each known reimplementation bug must make at least one check fail
FAULT_WITNESSES = {
    "backward_sign_flip": lambda: v.gradcheck("cross-entropy", "separate", [4]),
    "reset_on_session_end_only": v.run_reset_check,
    "sample_after_scoring": v.check_sampled_scoring,
    "dropout_keep_probability": v.check_dropout_rate,
    "double_softmax": v.check_sampled_vs_full_ce,
    "bpr_max_wrong_equation": v.check_bpr_max_reference,
    "large_initial_accumulator": v.check_first_update,
    "hard_coded_batch_size": v.check_batch_size_honored,
}


def test_every_fault_has_a_witness():
    assert set(FAULT_WITNESSES) == _faults.KNOWN


@pytest.mark.parametrize("fault", sorted(FAULT_WITNESSES))
def test_negative_control(fault):
    check = FAULT_WITNESSES[fault]
    assert check().passed
    with _faults.inject(fault):
        assert not check().passed


def test_unknown_fault_rejected():
    with pytest.raises(KeyError):
        with _faults.inject("no_such_bug"):
            pass


@pytest.fixture(scope="module")
def all_reports():
    return v.run_all()


def test_feature_matrix_all_supported(all_reports):
    rows = v.emit_feature_matrix(all_reports)
    assert len(rows) == 8
    assert all(r.supported for r in rows)
    assert all(r.witnesses for r in rows)
    text = v.feature_matrix_text(rows)
    assert text.count("✓") == 8 and "✗" not in text


def test_feature_matrix_disabled_witness(all_reports):
    rows = v.emit_feature_matrix(all_reports, disabled=("shared_embedding_aliasing",))
    marks = {(r.group, r.feature): r.mark for r in rows}
    assert marks[("Embedding", "Shared")] == "✗"
    assert sum(m == "✓" for m in marks.values()) == 7


def test_feature_matrix_failed_check(all_reports):
    broken = [v.CheckReport(r.name, False, r.value, r.threshold, r.seed) if r.name.startswith("gradcheck[bpr-max") else r for r in all_reports]
    rows = {r.feature: r.supported for r in v.emit_feature_matrix(broken)}
    assert not rows["BPR-max"] and rows["Cross-entropy"]


def test_reports_tsv(all_reports):
    lines = v.reports_tsv(all_reports).splitlines()
    assert lines[0].startswith("check\tstatus")
    assert len(lines) == len(all_reports) + 1


def test_step_cost_is_independent_of_catalog_size():
    small = v.step_cost_profile(2_000, batch_size=16, n_sample=32, hidden=16, steps=20)
    large = v.step_cost_profile(20_000, batch_size=16, n_sample=32, hidden=16, steps=20)
    assert small["scores_per_example"] == large["scores_per_example"] == [48]
    assert small["score_evaluations"] == large["score_evaluations"] == [16 * 48]
