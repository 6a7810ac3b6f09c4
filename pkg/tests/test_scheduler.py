import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ashatune.scheduler import (
    AnalyticScalingModel,
    Cluster,
    ClusterDemand,
    TaskStack,
    demand,
    max_gpus_for_efficiency,
    water_fill,
)


class TestScalingModel:
    def test_single_accelerator_speedup_is_one(self):
        assert AnalyticScalingModel().speedup(1) == 1.0

    def test_overhead_reduces_speedup(self):
        model = AnalyticScalingModel(alpha=0.5)
        assert model.speedup(4) == pytest.approx(4 / 2.5)

    def test_invalid_g(self):
        with pytest.raises(ValueError):
            AnalyticScalingModel().speedup(0)


class TestMaxGpus:
    def test_tau_one_forces_single_accelerator(self):
        assert max_gpus_for_efficiency(AnalyticScalingModel(), tau=1.0, cluster_size=64) == 1

    def test_default_overhead_at_three_quarters_efficiency(self):
        # efficiency(g) = 1 / (1 + alpha (g - 1)) >= 3/4 up to g = 16 at alpha = 1/45
        model = AnalyticScalingModel(alpha=1 / 45)
        assert max_gpus_for_efficiency(model, tau=0.75, cluster_size=500) == 16

    def test_closed_form_agreement(self):
        # threshold g* = floor(1 + (1/tau - 1) / alpha) for the analytic model
        for alpha, tau in [(0.1, 0.5), (0.02, 0.9), (1 / 45, 0.75), (0.3, 0.6)]:
            model = AnalyticScalingModel(alpha=alpha)
            expected = int(1 + (1 / tau - 1) / alpha + 1e-9)
            assert max_gpus_for_efficiency(model, tau, cluster_size=10_000) == expected

    def test_perfect_scaling_clamped_to_cluster(self):
        model = AnalyticScalingModel(alpha=0.0)
        assert max_gpus_for_efficiency(model, tau=0.9, cluster_size=128) == 128

    def test_invalid_tau(self):
        with pytest.raises(ValueError):
            max_gpus_for_efficiency(AnalyticScalingModel(), tau=0.0)


class TestDemand:
    def _stack(self, size):
        stack = TaskStack()
        for i in range(size):
            stack.push(("task", i))
        return stack

    def test_cap_is_kappa_times_stack(self):
        d = demand("e", kappa=8, stack=self._stack(4))
        assert d.cap == 32

    def test_empty_stack_demands_nothing(self):
        assert demand("e", kappa=8, stack=self._stack(0)).cap == 0

    def test_cap_tracks_stack_changes(self):
        stack = self._stack(3)
        assert demand("e", 2, stack).cap == 6
        stack.pop()
        assert demand("e", 2, stack).cap == 4

    def test_invalid_weight(self):
        with pytest.raises(ValueError):
            ClusterDemand("e", kappa=1, stack_size=1, weight=0.0)


class TestTaskStack:
    def test_lifo_order(self):
        stack = TaskStack()
        for t in ("a", "b", "c"):
            stack.push(t)
        assert [stack.pop() for _ in range(3)] == ["c", "b", "a"]


class TestWaterFill:
    def test_single_experiment_capped_at_demand(self):
        alloc = water_fill([ClusterDemand("a", 8, 4)], capacity=100)
        assert alloc == {"a": 32}

    def test_equal_split_when_uncapped(self):
        demands = [ClusterDemand("a", 8, 8), ClusterDemand("b", 8, 8)]
        assert water_fill(demands, capacity=32) == {"a": 16, "b": 16}

    def test_surplus_flows_to_the_hungry(self):
        demands = [ClusterDemand("a", 8, 1), ClusterDemand("b", 8, 8)]
        assert water_fill(demands, capacity=32) == {"a": 8, "b": 24}

    def test_zero_capacity(self):
        demands = [ClusterDemand("a", 8, 8)]
        assert water_fill(demands, capacity=0) == {"a": 0}

    def test_weighted_split(self):
        demands = [
            ClusterDemand("a", 100, 1, weight=2.0),
            ClusterDemand("b", 100, 1, weight=1.0),
        ]
        assert water_fill(demands, capacity=30) == {"a": 20, "b": 10}

    def test_duplicate_ids_rejected(self):
        demands = [ClusterDemand("a", 1, 1), ClusterDemand("a", 2, 2)]
        with pytest.raises(ValueError):
            water_fill(demands, capacity=4)

    demand_lists = st.lists(
        st.builds(
            ClusterDemand,
            experiment_id=st.uuids().map(str),
            kappa=st.integers(0, 8),
            stack_size=st.integers(0, 8),
            weight=st.sampled_from([0.5, 1.0, 2.0, 3.0]),
        ),
        min_size=1,
        max_size=6,
    )

    @given(demands=demand_lists, capacity=st.integers(0, 80))
    @settings(max_examples=300, deadline=None)
    def test_feasible_and_work_conserving(self, demands, capacity):
        alloc = water_fill(demands, capacity)
        assert set(alloc) == {d.experiment_id for d in demands}
        for d in demands:
            assert 0 <= alloc[d.experiment_id] <= d.cap
        total = sum(alloc.values())
        assert total == min(capacity, sum(d.cap for d in demands))

    def test_max_min_optimal_on_small_instances(self):
        """Exhaustive oracle: over every feasible work-conserving integral
        allocation, the water-filled one has the lexicographically greatest
        sorted allocation vector (unweighted max-min fairness)."""
        cases = [
            ([("a", 3), ("b", 5), ("c", 2)], 7),
            ([("a", 1), ("b", 6)], 5),
            ([("a", 4), ("b", 4), ("c", 4)], 10),
            ([("a", 2), ("b", 2), ("c", 9)], 9),
        ]
        for caps, capacity in cases:
            demands = [ClusterDemand(eid, 1, cap) for eid, cap in caps]
            alloc = water_fill(demands, capacity)
            used = min(capacity, sum(c for _, c in caps))
            best = None
            for combo in itertools.product(*(range(c + 1) for _, c in caps)):
                if sum(combo) != used:
                    continue
                key = sorted(combo)
                if best is None or key > best:
                    best = key
            assert sorted(alloc.values()) == best, (caps, capacity, alloc)


class TestClusterRebalance:
    def test_single_experiment_gets_everything_it_wants(self):
        cluster = Cluster(capacity=64)
        stack = cluster.add_experiment("a", kappa=8)
        for i in range(4):
            stack.push(i)
        directives = cluster.rebalance()
        assert [(d.kind, d.experiment_id, d.count) for d in directives] == [
            ("dispatch", "a", 32)
        ]

    def test_second_arrival_triggers_shrink(self):
        cluster = Cluster(capacity=32)
        a = cluster.add_experiment("a", kappa=8)
        for i in range(8):
            a.push(i)
        cluster.apply(cluster.rebalance())
        assert cluster.experiments["a"].running == 32
        b = cluster.add_experiment("b", kappa=8)
        for i in range(8):
            b.push(i)
        directives = cluster.rebalance()
        kinds = {(d.kind, d.experiment_id): d.count for d in directives}
        assert kinds[("preempt", "a")] == 16
        assert kinds[("dispatch", "b")] == 16

    def test_steady_state_emits_nothing(self):
        cluster = Cluster(capacity=16)
        a = cluster.add_experiment("a", kappa=4)
        for i in range(10):
            a.push(i)
        cluster.apply(cluster.rebalance())
        cluster.apply(cluster.rebalance())
        assert cluster.rebalance() == []

    def test_zero_capacity_preempts_everything(self):
        cluster = Cluster(capacity=8)
        a = cluster.add_experiment("a", kappa=4)
        for i in range(4):
            a.push(i)
        cluster.apply(cluster.rebalance())
        cluster.capacity = 0
        directives = cluster.rebalance()
        assert directives == [type(directives[0])("preempt", "a", 8)]

    def test_allocations_csv_shape(self):
        cluster = Cluster(capacity=8)
        csv = cluster.allocations_csv(3, {"b": 2, "a": 6})
        assert csv == "3,a,6\n3,b,2"
