#include <numbers>

#include <gtest/gtest.h>

#include "mzsim/entangle.hpp"
#include "oracle.hpp"

using namespace mzsim;

namespace {
SpaceSpec qubits() { return build_space({SubsystemSpec::two_level("q0"), SubsystemSpec::two_level("q1")}); }
StateVector bell() {
    Vector v = Vector::Zero(4);
    v[0] = v[3] = 1 / std::sqrt(2.0);
    return {qubits().fingerprint(), v};
}
ReducedDensity diag_rho(std::vector<double> d) {
    ReducedDensity r;
    r.labels = {"x"};
    r.dims = {d.size()};
    r.rho = DenseMatrix::Zero(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) r.rho(i, i) = d[i];
    return r;
}
} // namespace

TEST(PartialTrace, ProductStateGivesProjector) {
    const SpaceSpec s = build_space({SubsystemSpec::boson("a", 2), SubsystemSpec::two_level("e")});
    Vector a(3), e(2);
    a << 0.6, cplx(0, 0.8), 0;
    e << std::sqrt(0.5), -std::sqrt(0.5);
    const StateVector psi(s.fingerprint(), oracle::kron(oracle::Vec(a), oracle::Vec(e)));
    const auto r = partial_trace(s, psi, {"a"});
    EXPECT_LT((r.rho - a * a.adjoint()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(PartialTrace, BellMarginalIsMaximallyMixed) {
    const auto r = partial_trace(qubits(), bell(), {"q0"});
    EXPECT_LT((r.rho - 0.5 * DenseMatrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(PartialTrace, MatchesNaiveOracle) {
    const SpaceSpec s = build_space({SubsystemSpec::boson("a", 2), SubsystemSpec::two_level("b"), SubsystemSpec::boson("c", 3),
                                     SubsystemSpec::boson("d", 1)});
    const std::vector<int> dims{3, 2, 4, 2};
    const StateVector psi(s.fingerprint(), oracle::random_state(s.total_dim(), 21));
    const std::vector<std::vector<std::string>> groups{{"a"}, {"c"}, {"a", "c"}, {"d", "b"}, {"a", "b", "d"}, {"a", "b", "c", "d"}};
    for (const auto &g : groups) {
        std::vector<bool> keep(4, false);
        for (const auto &l : g) keep[s.index_of(l)] = true;
        const auto r = partial_trace(s, psi, g);
        const oracle::Mat ref = oracle::naive_partial_trace(psi.amplitudes(), dims, keep);
        EXPECT_LE((r.rho - ref).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_NEAR(r.trace(), 1.0, 1e-10);
        EXPECT_LE((r.rho - r.rho.adjoint()).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(PartialTrace, ReduceMatchesDirectTrace) {
    const SpaceSpec s = build_space({SubsystemSpec::boson("a", 2), SubsystemSpec::two_level("b"), SubsystemSpec::boson("c", 2)});
    const StateVector psi(s.fingerprint(), oracle::random_state(s.total_dim(), 5));
    const auto ab = partial_trace(s, psi, {"a", "b", "c"});
    EXPECT_LE((reduce(ab, {"c", "a"}).rho - partial_trace(s, psi, {"a", "c"}).rho).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(PartialTrace, GuardAndMismatch) {
    const SpaceSpec s = build_space({SubsystemSpec::boson("a", 99), SubsystemSpec::boson("b", 99)});
    const StateVector psi = StateVector::basis(s, 0);
    EXPECT_THROW(partial_trace(s, psi, {"a", "b"}), Error);
    EXPECT_NO_THROW(partial_trace(s, psi, {"a"}));
    EXPECT_THROW(partial_trace(qubits(), psi, {"q0"}), Error);
}

TEST(Entropy, KnownValues) {
    EXPECT_NEAR(von_neumann_entropy(diag_rho({1, 0})), 0.0, 1e-10);
    EXPECT_NEAR(von_neumann_entropy(diag_rho({0.5, 0.5})), std::log(2.0), 1e-14);
    EXPECT_NEAR(von_neumann_entropy(diag_rho({0.7, 0.2, 0.1})), -(0.7 * std::log(0.7) + 0.2 * std::log(0.2) + 0.1 * std::log(0.1)), 1e-14);
    EXPECT_NEAR(von_neumann_entropy(diag_rho({0.5, 0.5}), EntropyUnit::Bits), 1.0, 1e-14);
    EXPECT_NEAR(von_neumann_entropy(diag_rho({1.0 + 5e-13, -5e-13})), 0.0, 1e-10);
    EXPECT_THROW(von_neumann_entropy(diag_rho({1.1, -0.1})), Error);
}

TEST(MutualInformation, BellPair) {
    EXPECT_NEAR(mutual_information(qubits(), bell(), {"q0"}, {"q1"}), 2 * std::log(2.0), 1e-10);
    EXPECT_NEAR(mutual_information(qubits(), bell(), {"q0"}, {"q1"}, EntropyUnit::Bits), 2.0, 1e-10);
}

TEST(MutualInformation, ProductIsZeroAndSymmetric) {
    const SpaceSpec s = build_space({SubsystemSpec::boson("a", 2), SubsystemSpec::two_level("b"), SubsystemSpec::boson("c", 2)});
    const oracle::Vec p = oracle::kron(oracle::kron(oracle::random_state(3, 1), oracle::random_state(2, 2)), oracle::random_state(3, 3));
    const StateVector psi(s.fingerprint(), p);
    EXPECT_LE(std::abs(mutual_information(s, psi, {"a"}, {"c"})), 1e-9);
    const StateVector r(s.fingerprint(), oracle::random_state(s.total_dim(), 8));
    EXPECT_EQ(mutual_information(s, r, {"a"}, {"b", "c"}), mutual_information(s, r, {"b", "c"}, {"a"}));
    EXPECT_GE(mutual_information(s, r, {"a"}, {"c"}), -1e-9);
    EXPECT_THROW(mutual_information(s, r, {"a"}, {"a", "b"}), Error);
    EXPECT_THROW(mutual_information(s, r, {}, {"a"}), Error);
}

TEST(MutualInformation, PureStateComplementarity) {
    const SpaceSpec s = build_space({SubsystemSpec::boson("a", 3), SubsystemSpec::two_level("b"), SubsystemSpec::boson("c", 2),
                                     SubsystemSpec::two_level("d")});
    const StateVector psi(s.fingerprint(), oracle::random_state(s.total_dim(), 12));
    const std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>> cuts{
        {{"a"}, {"b", "c", "d"}}, {{"a", "b"}, {"c", "d"}}, {{"b", "d"}, {"a", "c"}}};
    for (const auto &[k, t] : cuts) {
        const double sk = von_neumann_entropy(partial_trace(s, psi, k));
        const double st = von_neumann_entropy(partial_trace(s, psi, t));
        EXPECT_NEAR(sk, st, 1e-9);
        // pure bipartite: I = 2 S
        EXPECT_NEAR(mutual_information(s, psi, k, t), 2 * sk, 1e-9);
    }
}

TEST(MutualInformation, KronOfIndependentParts) {
    const auto r = kron(diag_rho({0.5, 0.5}), diag_rho({0.7, 0.3}));
    ReducedDensity named = r;
    named.labels = {"x", "y"};
    EXPECT_NEAR(mutual_information(named, {"x"}, {"y"}), 0.0, 1e-12);
    EXPECT_NEAR(r.trace(), 1.0, 1e-15);
}
