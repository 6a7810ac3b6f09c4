from fractions import Fraction

import pytest

from ashatune.bracket import ResultRejectedError
from ashatune.experiment import (
    ASHA,
    ASYNC_HYPERBAND,
    BLOCKED,
    FINISHED,
    SYNC_SHA,
    Experiment,
    ExperimentSpec,
    allocate_configs,
    average_resource,
    default_settings,
)


class TestDefaults:
    def test_r256(self):
        assert default_settings(256) == (4, 1, [0, 1, 2])

    def test_r100_rounds_r_up_to_one(self):
        eta, r, _ = default_settings(100)
        assert (eta, r) == (4, 1)

    def test_r1_collapses_brackets(self):
        eta, r, brackets = default_settings(1)
        assert r == 1 and brackets == [0]

    def test_large_R_derives_fractional_r(self):
        _, r, _ = default_settings(1000)
        assert r == 4  # ceil(1000/256)

    def test_invalid_R(self):
        with pytest.raises(ValueError):
            default_settings(0)


class TestAverageResource:
    def test_default_setting_values(self):
        assert average_resource(0, 1, 256, 4) == Fraction(5, 256)
        assert average_resource(1, 1, 256, 4) == Fraction(4, 64)
        assert average_resource(2, 1, 256, 4) == Fraction(3, 16)

    def test_deepest_bracket_is_one(self):
        assert average_resource(4, 1, 256, 4) == 1

    def test_s_beyond_depth_rejected(self):
        with pytest.raises(ValueError):
            average_resource(5, 1, 256, 4)


class TestAllocateConfigs:
    def test_thousand_config_split(self):
        assert allocate_configs(1000, [0, 1, 2], 1, 256, 4) == {0: 706, 1: 221, 2: 73}

    def test_split_sums_to_n(self):
        for n in (3, 10, 101, 999):
            alloc = allocate_configs(n, [0, 1, 2], 1, 256, 4)
            assert sum(alloc.values()) == n

    def test_single_bracket_takes_everything(self):
        assert allocate_configs(50, [0], 1, 256, 4) == {0: 50}

    def test_floor_of_one_per_bracket(self):
        alloc = allocate_configs(3, [0, 1, 2], 1, 256, 4)
        assert all(v >= 1 for v in alloc.values()) and sum(alloc.values()) == 3

    def test_too_few_configs_rejected(self):
        with pytest.raises(ValueError):
            allocate_configs(2, [0, 1, 2], 1, 256, 4)

    def test_budget_neutrality(self):
        """Each bracket's total expected training budget n_s * avg_resource
        matches the others to within one configuration's worth."""
        alloc = allocate_configs(1000, [0, 1, 2], 1, 256, 4)
        budgets = {s: alloc[s] * average_resource(s, 1, 256, 4) for s in alloc}
        spread = max(budgets.values()) - min(budgets.values())
        assert spread <= max(average_resource(s, 1, 256, 4) for s in alloc)


class TestSpec:
    def test_defaults_applied(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=100, R=256)
        assert spec.resolved() == (4, 1, [0, 1, 2])

    def test_asha_mode_uses_single_most_aggressive_bracket(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=100, R=256, mode=ASHA)
        assert spec.resolved()[2] == [0]

    def test_named_bracket_sets(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=100, R=256, bracket_set="conservative")
        assert spec.resolved()[2] == [0, 1, 2, 3, 4]

    def test_bad_mode_rejected(self, unit_space):
        with pytest.raises(ValueError):
            ExperimentSpec(space=unit_space, n=10, R=16, mode="bogus")

    def test_zero_n_rejected(self, unit_space):
        with pytest.raises(ValueError):
            ExperimentSpec(space=unit_space, n=0, R=16)

    def test_doc_round_trip(self, mixed_space):
        spec = ExperimentSpec(space=mixed_space, n=10, R=64, mode=ASHA, eta=2, r=1)
        assert ExperimentSpec.from_doc(spec.to_doc()) == spec


def run_to_completion(exp: Experiment, objective, max_steps=100_000):
    """Single-worker driver: dispatch one job, complete it immediately."""
    for _ in range(max_steps):
        ticket = exp.next_job()
        if ticket is FINISHED:
            return
        assert ticket is not BLOCKED, "single-worker run should never block"
        exp.record_result(
            ticket.config_id,
            ticket.rung,
            ticket.bracket_s,
            objective(ticket.config_id, ticket.resource),
        )
    raise AssertionError("did not finish")


def latent_objective(config_id, resource):
    # fixed ranking: lower id is better; resource refines nothing
    return config_id / 1000.0 + 1.0 / resource


class TestExperimentFlow:
    def test_async_hyperband_round_robin_starts_at_most_aggressive(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=30, R=256, mode=ASYNC_HYPERBAND)
        exp = Experiment(spec)
        first = exp.next_job()
        assert first.bracket_s == 0 and first.rung == 0
        second = exp.next_job()
        third = exp.next_job()
        assert (second.bracket_s, third.bracket_s) == (1, 2)

    def test_asha_single_worker_full_run(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=16, R=16, mode=ASHA, eta=4, r=1)
        exp = Experiment(spec)
        run_to_completion(exp, latent_objective)
        widths = [len(r.completed) for r in exp.brackets[0].rungs]
        assert widths == [16, 4, 1]
        assert exp.finished()

    def test_sync_hyperband_full_run(self, unit_space):
        spec = ExperimentSpec(
            space=unit_space, n=33, R=16, mode="sync-hyperband", eta=4, r=1,
            bracket_set=[0, 1],
        )
        exp = Experiment(spec)
        run_to_completion(exp, latent_objective)
        assert exp.finished()
        for s, bracket in exp.brackets.items():
            schedule = bracket.sync_schedule()
            assert [len(r.completed) for r in bracket.rungs] == [n for n, _ in schedule]

    def test_sync_barrier_blocks_while_rung_outstanding(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=4, R=4, mode=SYNC_SHA, eta=2, r=1)
        exp = Experiment(spec)
        tickets = [exp.next_job() for _ in range(4)]
        assert all(t.rung == 0 for t in tickets)
        assert exp.next_job() is BLOCKED
        for t in tickets[:-1]:
            exp.record_result(t.config_id, 0, 0, latent_objective(t.config_id, 1))
        assert exp.next_job() is BLOCKED  # one result still missing
        exp.record_result(tickets[-1].config_id, 0, 0, 0.9)
        assert exp.next_job().rung == 1

    def test_asha_blocks_when_width_limited(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=4, R=4, mode=ASHA, eta=2, r=1)
        exp = Experiment(spec)
        tickets = [exp.next_job() for _ in range(4)]
        assert exp.next_job() is BLOCKED
        exp.record_result(tickets[0].config_id, 0, 0, 0.1)
        exp.record_result(tickets[1].config_id, 0, 0, 0.2)
        assert exp.next_job().kind == "promotion"

    def test_sampled_configs_never_exceed_allocation(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=40, R=64, mode=ASYNC_HYPERBAND, eta=4, r=1)
        exp = Experiment(spec)
        run_to_completion(exp, latent_objective)
        per_bracket = {s: 0 for s in exp.bracket_order}
        for cid, s in exp.config_bracket.items():
            per_bracket[s] += 1
        assert per_bracket == exp.allocation

    def test_result_for_undispatched_job_rejected(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=4, R=4, mode=ASHA, eta=2, r=1)
        exp = Experiment(spec)
        exp.next_job()
        with pytest.raises(ResultRejectedError):
            exp.record_result(99, 0, 0, 0.5)
        with pytest.raises(ResultRejectedError):
            exp.record_result(1, 0, 0, 0.5)  # sampled id 0 only


class TestIncumbent:
    def _experiment(self, space, **kw):
        spec = ExperimentSpec(space=space, n=kw.pop("n", 16), R=kw.pop("R", 16),
                              mode=kw.pop("mode", ASHA), eta=kw.pop("eta", 4), r=1)
        return Experiment(spec)

    def test_single_result_is_incumbent(self, unit_space):
        exp = self._experiment(unit_space)
        t = exp.next_job()
        exp.record_result(t.config_id, 0, 0, 0.4)
        inc = exp.incumbent()
        assert inc.config_id == t.config_id and inc.loss == 0.4

    def test_deeper_rung_wins_even_at_slightly_worse_loss(self, unit_space):
        exp = self._experiment(unit_space)
        tickets = [exp.next_job() for _ in range(4)]
        exp.record_result(tickets[0].config_id, 0, 0, 0.30)
        for t in tickets[1:]:
            exp.record_result(t.config_id, 0, 0, 0.5 + t.config_id / 100)
        promo = exp.next_job()
        assert promo.rung == 1
        exp.record_result(promo.config_id, 1, 0, 0.32)
        inc = exp.incumbent()
        assert inc.rung == 1 and inc.loss == 0.32

    def test_by_bracket_empty_until_bracket_completes(self, unit_space):
        exp = self._experiment(unit_space, n=4, R=4, eta=2)
        assert exp.incumbent("by-bracket") is None
        run_to_completion(exp, latent_objective)
        by_bracket = exp.incumbent("by-bracket")
        assert by_bracket is not None and by_bracket.resource == 4

    def test_unknown_accounting_rejected(self, unit_space):
        exp = self._experiment(unit_space)
        with pytest.raises(ValueError):
            exp.incumbent("by-magic")


class TestExtendWidth:
    def test_finished_experiment_unblocks(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=4, R=4, mode=ASHA, eta=2, r=1)
        exp = Experiment(spec)
        run_to_completion(exp, latent_objective)
        assert exp.finished()
        exp.extend_width(4)
        assert not exp.finished()
        ticket = exp.next_job()
        assert ticket.rung == 0 and ticket.config_id == 4  # seed sequence continues
        exp.record_result(ticket.config_id, 0, 0, latent_objective(ticket.config_id, 1))
        run_to_completion(exp, latent_objective)
        assert exp.brackets[0].sampled_count == 8

    def test_extension_smaller_than_bracket_count(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=30, R=256, mode=ASYNC_HYPERBAND)
        exp = Experiment(spec)
        before = dict(exp.allocation)
        exp.extend_width(1)
        after = exp.allocation
        assert after[0] == before[0] + 1 and after[1] == before[1] and after[2] == before[2]

    def test_zero_extension_is_a_no_op(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=4, R=4, mode=ASHA, eta=2, r=1)
        exp = Experiment(spec)
        snap = exp.snapshot()
        exp.extend_width(0)
        assert exp.snapshot() == snap

    def test_incumbent_loss_monotone_over_run(self, unit_space):
        spec = ExperimentSpec(space=unit_space, n=20, R=64, mode=ASYNC_HYPERBAND, eta=4, r=1)
        exp = Experiment(spec)
        run_to_completion(exp, latent_objective)
        losses = [rec.loss for rec in exp.incumbent_records]
        assert losses == sorted(losses, reverse=True)
