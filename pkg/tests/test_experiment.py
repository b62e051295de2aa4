"""Behaviour of the full pipeline on the bundled reference configuration."""

from __future__ import annotations

import numpy as np
import pytest

from decaf import experiment as ex
from decaf.config import reference_spec


@pytest.fixture(scope="module")
def ref():
    return reference_spec()


def test_global_accuracy_after_twenty_rounds(ref):
    outcome = ex.execute(ref.replace(fl={"rounds": 20}, attack={"rounds": [20]}))
    print(f"\nglobal test accuracy after 20 rounds: {outcome.accuracy[-1]:.3f}")
    assert len(outcome.accuracy) == 20
    # measured 0.98 on seed 0; 5% slack
    assert outcome.accuracy[-1] >= 0.93


def test_evenly_distributed_victim_round_three(ref):
    outcome = ex.execute(ref.replace(fl={"rounds": 3}, attack={"rounds": [3]}))
    (report,) = [r for r in outcome.reports if r.user == 0]
    assert report.distances.linf <= 0.05


def test_single_class_victim_is_exact(ref):
    outcome = ex.execute(ref)
    for r in (r for r in outcome.reports if r.user == 9):
        expect = np.zeros(10)
        expect[7] = 1.0
        np.testing.assert_array_equal(r.composition, expect)


def test_multi_round_fusion_not_worse(ref):
    spec = ref.replace(attack={"rounds": [1, 2, 3, 4, 5], "multi_round_k": 5})
    outcome = ex.execute(spec)
    fused = ex.multi_round(outcome.reports, outcome.truths, 5)
    fused_l1 = float(np.mean([row["L1"] for row in fused]))
    single_l1 = outcome.mean_distances().l1
    print(f"\nk=5 fused mean L1 {fused_l1:.4f} vs single-round mean L1 {single_l1:.4f}")
    assert fused_l1 <= single_l1
    doc = ex.results_document(outcome)
    assert doc["multi_round"]["k"] == 5 and len(doc["multi_round"]["users"]) == 10


def test_dp_sixteen_breaks_null_detection(ref):
    flagged_nonnull = missed_null = decisions = 0
    for seed in (0, 1):
        spec = ref.replace(seed=seed, defense={"kind": "dp", "noise_multiplier": 16.0}, attack={"rounds": [3]})
        outcome = ex.execute(spec)
        for r in outcome.reports:
            truth = outcome.truths[r.user]
            for c in range(10):
                decisions += 1
                flagged_nonnull += truth[c] > 0 and c in r.c_miss
                missed_null += truth[c] == 0 and c not in r.c_miss
    print(f"\nDP sigma=16 over 20 victims: non-null flagged null {flagged_nonnull}, null missed {missed_null}, "
          f"of {decisions} per-class decisions")
    assert (flagged_nonnull + missed_null) / decisions > 0


def test_dropout_close_to_baseline(ref):
    rows, outcomes = ex.defense_sweep(ref, dropout_rates=[0.2])
    base = outcomes["none"].mean_distances().l1
    drop = outcomes["dropout(0.2)"].mean_distances().l1
    assert drop <= 2 * base


def test_aux_count_changes_only_the_auxiliary_set(ref):
    small = ex.build_world(ref.replace(attack={"aux_per_class": 2}))
    large = ex.build_world(ref.replace(attack={"aux_per_class": 30}))
    for a, b in zip(small.users, large.users):
        np.testing.assert_array_equal(a.ids, b.ids)
    for c in range(10):
        np.testing.assert_array_equal(small.aux.ids[c], large.aux.ids[c][:2])
    user_ids = np.concatenate([u.ids for u in large.users])
    assert not set(user_ids.tolist()) & {int(i) for ids in large.aux.ids for i in ids}


def test_users_match_requested_compositions(ref):
    world = ex.build_world(ref)
    for user, truth in zip(world.users, world.truths):
        assert len(user) == 1200
        np.testing.assert_allclose(user.composition(), truth)
    assert world.truths[3][7] == pytest.approx(20 / 1200)


def test_summary_layout(ref):
    outcome = ex.execute(ref.replace(fl={"rounds": 2}, attack={"rounds": [2]}))
    text = ex.summary_text(ex.results_document(outcome))
    lines = text.splitlines()
    truth_rows = [i for i, l in enumerate(lines) if " truth " in l]
    assert len(truth_rows) == 10
    for i in truth_rows:
        assert "inferred" in lines[i + 1]
    assert "100.00" in lines[truth_rows[-1]]
