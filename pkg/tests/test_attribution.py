import itertools
import math

import numpy as np
import pytest

from attribution import (
    Sampling,
    context_saliency,
    interaction,
    interaction_recursive,
    interaction_table,
    marginal_benefit,
    mobius_transform,
    multi_order_shapley,
    order_spectrum,
    order_strength_profile,
    shapley_exact,
    shapley_interaction_index,
    shapley_order,
    shapley_sampled,
)
from conftest import expr_game, random_table_game
from exceptions import ArgumentError, CapacityError
from game_core import Coalition, TableGame
from settings import Settings


def coalitions(n, min_size=0):
    for bits in range(1 << n):
        if bin(bits).count("1") >= min_size:
            yield Coalition(bits, n)


def close(a, b, rel=1e-9):
    return abs(a - b) <= rel * max(1.0, abs(a), abs(b))


# ============================================================================
# SHAPLEY VALUES
# ============================================================================

class TestShapleyExact:
    def test_and2(self, and2):
        report = shapley_exact(and2)
        assert report.phi.tolist() == pytest.approx([0.5, 0.5], abs=1e-15)
        assert report.method == {"kind": "exact"}
        assert report.stderr is None

    def test_additive(self, additive):
        assert shapley_exact(additive).phi.tolist() == pytest.approx([2.0, 3.0], abs=1e-15)

    def test_and3(self, and3):
        assert shapley_exact(and3).phi.tolist() == pytest.approx([1 / 3] * 3, abs=1e-15)

    def test_capacity(self, rng):
        game = random_table_game(rng, 5, Settings(max_exact_players=4))
        with pytest.raises(CapacityError):
            shapley_exact(game)

    def test_matches_weighted_definition(self, rng):
        game = random_table_game(rng, 5)
        n, v = game.n, game.values
        phi = shapley_exact(game).phi
        for i in range(n):
            total = 0.0
            for s in coalitions(n):
                if i in s:
                    continue
                weight = math.factorial(s.cardinality) * math.factorial(n - s.cardinality - 1) / math.factorial(n)
                total += weight * (v[s.bits | 1 << i] - v[s.bits])
            assert close(phi[i], total, 1e-12)


class TestShapleySampled:
    def test_and2_converges(self, and2):
        report = shapley_sampled(and2, 10000, 42)
        assert np.all(np.abs(report.phi - 0.5) < 0.02)
        assert report.method == {"kind": "sampled", "permutations": 10000, "seed": 42}

    def test_single_player(self):
        game = expr_game("3*x1+1", [0.7], [0.2])
        report = shapley_sampled(game, 1, 0)
        assert report.phi[0] == game.evaluate(Coalition.full(1)) - game.evaluate(Coalition.empty(1))
        assert report.stderr.tolist() == [0.0]

    def test_deterministic(self, rng):
        game = random_table_game(rng, 6)
        first = shapley_sampled(game, 50, 7)
        second = shapley_sampled(game, 50, 7)
        assert np.array_equal(first.phi, second.phi)
        assert np.array_equal(first.stderr, second.stderr)

    def test_rejects_zero_permutations(self, and2):
        with pytest.raises(ArgumentError):
            shapley_sampled(and2, 0, 0)

    def test_within_three_stderr(self):
        game = random_table_game(np.random.default_rng(99), 10)
        exact = shapley_exact(game).phi
        hits = 0
        for seed in range(50):
            report = shapley_sampled(game, 2000, seed)
            hits += int(np.sum(np.abs(report.phi - exact) <= 3 * report.stderr))
        assert hits / (50 * game.n) >= 0.95


# ============================================================================
# INTERACTIONS
# ============================================================================

class TestInteraction:
    def test_and2(self, and2):
        assert interaction(and2, Coalition.full(2)) == 1.0
        assert interaction_recursive(and2, Coalition.full(2)) == 1.0

    def test_additive(self, additive):
        assert interaction(additive, Coalition.full(2)) == 0.0
        assert interaction_recursive(additive, Coalition.full(2)) == 0.0

    def test_and3(self, and3):
        assert interaction(and3, Coalition.from_members(3, [0, 1])) == 0.0
        assert interaction(and3, Coalition.full(3)) == 1.0

    def test_needs_two_members(self, and3):
        with pytest.raises(ArgumentError):
            interaction(and3, Coalition.from_members(3, [1]))
        with pytest.raises(ArgumentError):
            interaction_recursive(and3, Coalition.empty(3))

    def test_closed_form_matches_recursion(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            game = random_table_game(rng, int(rng.integers(2, 7)))
            for s in coalitions(game.n, 2):
                assert abs(interaction(game, s) - interaction_recursive(game, s)) <= 1e-10

    def test_table_matches_closed_form(self, rng):
        game = random_table_game(rng, 6)
        table = interaction_table(game)
        assert all(bin(bits).count("1") >= 2 for bits in table.entries)
        assert len(table.entries) == 2 ** 6 - 6 - 1
        for s in coalitions(6, 2):
            assert abs(table[s] - interaction(game, s)) <= 1e-12

    def test_table_max_order(self, rng):
        table = interaction_table(random_table_game(rng, 5), 3)
        assert {order for _, order, _ in table.rows()} == {2, 3}

    def test_mobius_of_and(self):
        table = np.zeros(8)
        table[7] = 1.0
        assert mobius_transform(table, 3).tolist() == [0, 0, 0, 0, 0, 0, 0, 1.0]


class TestShapleyInteractionIndex:
    def test_and2(self, and2):
        assert shapley_interaction_index(and2, Coalition.full(2)) == 1.0

    def test_and3_pair(self, and3):
        assert shapley_interaction_index(and3, Coalition.from_members(3, [0, 1])) == pytest.approx(0.5, abs=1e-15)

    def test_additive(self, additive):
        assert shapley_interaction_index(additive, Coalition.full(2)) == 0.0

    def test_singleton_is_shapley_value(self, rng):
        game = random_table_game(rng, 5)
        phi = shapley_exact(game).phi
        for i in range(5):
            assert close(shapley_interaction_index(game, Coalition.from_members(5, [i])), phi[i])

    def test_capacity(self, rng):
        game = random_table_game(rng, 4, Settings(max_index_players=3))
        with pytest.raises(CapacityError):
            shapley_interaction_index(game, Coalition.full(4))


# ============================================================================
# AXIOMS AND IDENTITIES
# ============================================================================

def dummy_extension(game: TableGame, dummy_value: float) -> TableGame:
    """v'(S + d) = v(S) + dummy_value, v'(S) = v(S) with d as the new top bit."""
    return TableGame(np.concatenate([game.values, game.values + dummy_value]))


class TestAxioms:
    @pytest.fixture
    def games(self):
        rng = np.random.default_rng(7)
        return [random_table_game(rng, int(rng.integers(3, 9))) for _ in range(200)]

    def test_efficiency(self, games):
        for game in games:
            report = shapley_exact(game)
            gap = report.v_full - report.v_empty
            assert abs(report.efficiency_gap) <= 1e-9 * max(1.0, abs(gap))
            table = interaction_table(game)
            total = math.fsum(list(table.entries.values()) + report.u.tolist())
            assert close(total, gap)

    def test_linearity(self, games):
        rng = np.random.default_rng(8)
        for game in games:
            other = random_table_game(rng, game.n)
            summed = TableGame(game.values + other.values)
            scaled = TableGame(2.5 * game.values)
            phi, phi_other = shapley_exact(game).phi, shapley_exact(other).phi
            assert np.allclose(shapley_exact(summed).phi, phi + phi_other, rtol=1e-9, atol=1e-12)
            assert np.allclose(shapley_exact(scaled).phi, 2.5 * phi, rtol=1e-9, atol=1e-12)
            table, table_other = interaction_table(game).entries, interaction_table(other).entries
            table_summed, table_scaled = interaction_table(summed).entries, interaction_table(scaled).entries
            for bits, value in table.items():
                assert close(table_summed[bits], value + table_other[bits])
                assert close(table_scaled[bits], 2.5 * value)

    def test_nullity(self, games):
        for game in games[:40]:
            extended = dummy_extension(game, 0.3)
            d = extended.n - 1
            report = shapley_exact(extended)
            assert abs(report.phi[d] - 0.3) <= 1e-9
            for s in coalitions(game.n, 1):
                with_d = Coalition(s.bits | 1 << d, extended.n)
                assert abs(interaction(extended, with_d)) <= 1e-9

    @staticmethod
    def symmetrized(game):
        """Average of the game and its copy with players 0 and 1 swapped."""
        swapped_bits = [(b & ~3) | ((b & 1) << 1) | ((b >> 1) & 1) for b in range(1 << game.n)]
        return TableGame(0.5 * (game.values + game.values[swapped_bits]))

    def test_symmetry(self, games):
        for game in games[:60]:
            phi = shapley_exact(self.symmetrized(game)).phi
            assert close(phi[0], phi[1])

    def test_interaction_symmetry(self, games):
        for game in games[:60]:
            symmetric = self.symmetrized(game)
            # contexts drawn from players 2..n-1
            for rest in range(1, 1 << (game.n - 2)):
                bits = rest << 2
                first = interaction(symmetric, Coalition(bits | 1, game.n))
                second = interaction(symmetric, Coalition(bits | 2, game.n))
                assert close(first, second)

    def test_order_symmetry(self, games):
        for game in games[:60]:
            symmetric = self.symmetrized(game)
            for m in range(game.n):
                assert close(shapley_order(symmetric, 0, m), shapley_order(symmetric, 1, m))


class TestIdentities:
    @pytest.fixture
    def games(self):
        rng = np.random.default_rng(11)
        return [random_table_game(rng, int(rng.integers(2, 9))) for _ in range(40)]

    def test_shapley_from_interactions(self, games):
        for game in games:
            n = game.n
            report = shapley_exact(game)
            table = interaction_table(game)
            for i in range(n):
                terms = [report.u[i]]
                for s in coalitions(n, 1):
                    if i not in s:
                        terms.append(table.entries[s.bits | 1 << i] / (s.cardinality + 1))
                assert close(math.fsum(terms), report.phi[i])

    def test_shapley_from_orders(self, games):
        for game in games:
            report = shapley_exact(game)
            for i in range(game.n):
                components = multi_order_shapley(game, i)
                assert all(components.exact)
                assert close(math.fsum(components.values.tolist()) / game.n, report.phi[i])

    def test_marginal_from_interactions(self, games):
        for game in games:
            if game.n > 6:
                continue
            n = game.n
            table = interaction_table(game)
            u = shapley_exact(game).u
            for i in range(n):
                for s in coalitions(n):
                    if i in s:
                        continue
                    terms = [u[i]] + [table.entries[sub.bits | 1 << i] for sub in s.subsets() if sub.bits]
                    assert abs(math.fsum(terms) - marginal_benefit(game, i, s)) <= 1e-10

    def test_order_from_interactions(self, games):
        for game in games[:10]:
            n = game.n
            table = interaction_table(game)
            u = shapley_exact(game).u
            for i in range(n):
                for m in range(n):
                    expected = []
                    for members in itertools.combinations([j for j in range(n) if j != i], m):
                        s = Coalition.from_members(n, members)
                        expected.append(math.fsum([u[i]] + [table.entries[sub.bits | 1 << i]
                                                            for sub in s.subsets() if sub.bits]))
                    assert close(shapley_order(game, i, m), math.fsum(expected) / len(expected))


# ============================================================================
# MULTI-ORDER COMPONENTS
# ============================================================================

class TestOrders:
    def test_and3(self, and3):
        assert [shapley_order(and3, 0, m) for m in range(3)] == [0.0, 0.0, 1.0]

    def test_additive_constant(self, additive):
        assert [shapley_order(additive, 0, m) for m in range(2)] == [2.0, 2.0]

    def test_order_range(self, and3):
        with pytest.raises(ArgumentError):
            shapley_order(and3, 0, 3)

    def test_sampled_path_recorded(self, rng):
        game = random_table_game(rng, 8)
        components = multi_order_shapley(game, 0, Sampling(5, seed=3), cap=10)
        assert components.exact == [len(list(itertools.combinations(range(7), m))) <= 10 for m in range(8)]
        again = multi_order_shapley(game, 0, Sampling(5, seed=3), cap=10)
        assert np.array_equal(components.values, again.values)

    def test_marginal_benefit(self, and3):
        assert marginal_benefit(and3, 0, Coalition.from_members(3, [1, 2])) == 1.0
        assert marginal_benefit(and3, 0, Coalition.from_members(3, [1])) == 0.0
        with pytest.raises(ArgumentError):
            marginal_benefit(and3, 0, Coalition.from_members(3, [0]))


# ============================================================================
# SPECTRUM, SALIENCY, PROFILE
# ============================================================================

class TestSpectrum:
    def test_and5_at_truth(self):
        game = expr_game("x1*x2*x3*x4*x5", np.ones(5), np.zeros(5))
        spectrum = order_spectrum(game)
        assert spectrum.ratio(5) == pytest.approx(1.0, abs=1e-9)
        assert all(spectrum.ratio(m) == 0.0 for m in range(1, 5))
        assert not spectrum.degenerate

    def test_and5_at_half(self):
        game = expr_game("x1*x2*x3*x4*x5", np.ones(5), np.full(5, 0.5))
        spectrum = order_spectrum(game)
        assert all(spectrum.ratio(m) > 0 for m in range(1, 6))
        assert sum(spectrum.ratio(m) for m in range(1, 5)) >= 0.3
        assert spectrum.ratio(5) < 1.0
        # every |I(S)| and |u_i| equals 1/32 here
        assert spectrum.ratio(2) == pytest.approx(math.comb(5, 2) / 31, rel=1e-12)

    def test_additive(self, additive):
        assert order_spectrum(additive).rows() == [(1, 1.0), (2, 0.0)]

    def test_sums_to_one(self, rng):
        spectrum = order_spectrum(random_table_game(rng, 7))
        assert abs(spectrum.ratios.sum() - 1.0) <= 1e-9
        assert np.all(spectrum.ratios >= 0)

    def test_degenerate(self):
        spectrum = order_spectrum(TableGame(np.full(8, 3.0)))
        assert spectrum.degenerate
        assert spectrum.ratios.tolist() == [0.0, 0.0, 0.0]

    def test_tau_census(self):
        game = expr_game("x1*x2*x3*x4*x5", np.ones(5), np.full(5, 0.5))
        spectrum = order_spectrum(game, tau=0.01)
        assert spectrum.salient_counts.tolist() == [math.comb(5, m) for m in range(1, 6)]


class TestSaliency:
    def test_pair_partner(self):
        game = expr_game("x1*x2+x3*x4", np.ones(4), np.zeros(4))
        # four of the eight contexts of x1 contain x2 and give dv = 1
        result = context_saliency(game, 0, top_fraction=0.5)
        assert result.p[1] == 1.0
        assert result.selected == 4 and result.considered == 8 and result.exact
        assert result.p[2] == 0.5 and result.p[3] == 0.5

    def test_tie_break_is_deterministic(self, additive):
        result = context_saliency(additive, 0, top_fraction=0.5)
        # both contexts tie; the smaller bit pattern (the empty set) wins
        assert result.p == {1: 0.0}

    def test_two_players(self, and2):
        assert context_saliency(and2, 0, top_fraction=0.5).p[1] in (0.0, 1.0)

    def test_fraction_range(self, and2):
        with pytest.raises(ArgumentError):
            context_saliency(and2, 0, top_fraction=0.0)

    def test_sampled(self, rng):
        game = random_table_game(rng, 10)
        result = context_saliency(game, 3, 0.1, Sampling(100, seed=5), cap=50)
        assert not result.exact and result.considered == 100 and result.selected == 10
        assert result == context_saliency(game, 3, 0.1, Sampling(100, seed=5), cap=50)


class TestProfile:
    def test_and3(self, and3):
        profile = order_strength_profile(and3)
        assert profile.shapley.tolist() == [0.0, 0.0, 1.0]
        assert profile.marginal.tolist() == [0.0, 0.0, 1.0]

    def test_normalized(self, rng):
        profile = order_strength_profile(random_table_game(rng, 6))
        assert profile.shapley.sum() == pytest.approx(1.0)
        assert profile.marginal.sum() == pytest.approx(1.0)
