#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mzsim/hspace.hpp"
#include "mzsim/opalg.hpp"

namespace mzsim {

enum class EntropyUnit { Nats, Bits };

inline constexpr std::size_t kDefaultDensityGuard = 4096;

/// Reduced density matrix of a group of subsystems, basis ordered as the
/// kept subsystems appear in the parent space (last fastest).
struct ReducedDensity {
    std::vector<std::string> labels;
    std::vector<std::size_t> dims;
    DenseMatrix rho;

    double trace() const { return rho.trace().real(); }
    std::size_t dim() const { return static_cast<std::size_t>(rho.rows()); }
};

namespace detail {

inline std::size_t product(const std::vector<std::size_t> &d) {
    std::size_t p = 1;
    for (auto x : d) p *= x;
    return p;
}

/// Gathers psi into a (kept x traced) matrix so rho = M M^dagger.
inline DenseMatrix kept_major(const SpaceSpec &space, const Partition &part, const Vector &psi) {
    std::vector<std::size_t> kdims, tdims;
    for (auto k : part.kept) kdims.push_back(space.local_dim(k));
    for (auto k : part.traced) tdims.push_back(space.local_dim(k));
    const std::size_t K = product(kdims), R = product(tdims);
    // Strides of each subsystem inside the kept / traced multi-indices.
    std::vector<std::size_t> kstride(space.size(), 0), tstride(space.size(), 0);
    {
        std::size_t s = 1;
        for (std::size_t i = part.kept.size(); i-- > 0;) {
            kstride[part.kept[i]] = s;
            s *= kdims[i];
        }
        s = 1;
        for (std::size_t i = part.traced.size(); i-- > 0;) {
            tstride[part.traced[i]] = s;
            s *= tdims[i];
        }
    }
    DenseMatrix M(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(R));
    const std::size_t nsub = space.size();
    std::vector<int> occ(nsub, 0);
    std::size_t krow = 0, tcol = 0;
    const std::size_t dim = space.total_dim();
    for (std::size_t i = 0; i < dim; ++i) {
        M(static_cast<Eigen::Index>(krow), static_cast<Eigen::Index>(tcol)) = psi[static_cast<Eigen::Index>(i)];
        // Odometer increment, last subsystem fastest.
        for (std::size_t k = nsub; k-- > 0;) {
            krow += kstride[k];
            tcol += tstride[k];
            if (++occ[k] < static_cast<int>(space.local_dim(k))) break;
            krow -= kstride[k] * space.local_dim(k);
            tcol -= tstride[k] * space.local_dim(k);
            occ[k] = 0;
        }
    }
    return M;
}

} // namespace detail

/// rho_kept = Tr_traced |psi><psi| / <psi|psi>.
inline ReducedDensity partial_trace(const SpaceSpec &space, const StateVector &psi, const Partition &part,
                                    std::size_t guard = kDefaultDensityGuard) {
    if (psi.fingerprint() != space.fingerprint()) throw Error("state does not live on this space");
    ReducedDensity out;
    for (auto k : part.kept) {
        out.labels.push_back(space[k].label);
        out.dims.push_back(space.local_dim(k));
    }
    const std::size_t K = detail::product(out.dims);
    if (K > guard) throw Error("kept dimension " + std::to_string(K) + " exceeds density guard " + std::to_string(guard));
    const double n2 = psi.amplitudes().squaredNorm();
    if (!(n2 > 0)) throw Error("partial trace of a zero state");
    if (part.traced.empty()) {
        out.rho = psi.amplitudes() * psi.amplitudes().adjoint() / n2;
        return out;
    }
    const DenseMatrix M = detail::kept_major(space, part, psi.amplitudes());
    out.rho = M * M.adjoint() / n2;
    // Enforce exact Hermiticity against rounding in the product.
    out.rho = 0.5 * (out.rho + out.rho.adjoint()).eval();
    return out;
}

inline ReducedDensity partial_trace(const SpaceSpec &space, const StateVector &psi, const std::vector<std::string> &kept,
                                    std::size_t guard = kDefaultDensityGuard) {
    return partial_trace(space, psi, partition(space, std::span<const std::string>(kept)), guard);
}

/// Further trace of a reduced density matrix down to a subset of its labels.
inline ReducedDensity reduce(const ReducedDensity &in, const std::vector<std::string> &keep) {
    std::vector<bool> kept(in.labels.size(), false);
    for (const auto &l : keep) {
        auto it = std::find(in.labels.begin(), in.labels.end(), l);
        if (it == in.labels.end()) throw Error("label '" + l + "' not in reduced density");
        kept[static_cast<std::size_t>(it - in.labels.begin())] = true;
    }
    ReducedDensity out;
    std::vector<std::size_t> stride(in.dims.size());
    std::size_t s = 1;
    for (std::size_t i = in.dims.size(); i-- > 0;) {
        stride[i] = s;
        s *= in.dims[i];
    }
    for (std::size_t i = 0; i < in.dims.size(); ++i)
        if (kept[i]) {
            out.labels.push_back(in.labels[i]);
            out.dims.push_back(in.dims[i]);
        }
    const std::size_t D = in.dim(), K = detail::product(out.dims);
    // Map each parent index to (kept index, traced index).
    std::vector<std::size_t> kidx(D), tidx(D);
    for (std::size_t i = 0; i < D; ++i) {
        std::size_t k = 0, t = 0;
        for (std::size_t j = 0; j < in.dims.size(); ++j) {
            const std::size_t o = (i / stride[j]) % in.dims[j];
            if (kept[j])
                k = k * in.dims[j] + o;
            else
                t = t * in.dims[j] + o;
        }
        kidx[i] = k;
        tidx[i] = t;
    }
    out.rho = DenseMatrix::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(K));
    for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j)
            if (tidx[i] == tidx[j])
                out.rho(static_cast<Eigen::Index>(kidx[i]), static_cast<Eigen::Index>(kidx[j])) +=
                    in.rho(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    return out;
}

inline constexpr double kEigenClip = 1e-12;
inline constexpr double kEntropyCutoff = 1e-14;

/// S = -sum lambda ln lambda over eigenvalues above 1e-14; eigenvalues in
/// [-1e-12, 0) are clipped, anything more negative is an error.
inline double von_neumann_entropy(const ReducedDensity &r, EntropyUnit unit = EntropyUnit::Nats) {
    Eigen::SelfAdjointEigenSolver<DenseMatrix> es(r.rho, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw Error("eigendecomposition of reduced density failed");
    const auto &lam = es.eigenvalues();
    if (lam.size() > 0 && lam.minCoeff() < -kEigenClip)
        throw Error("reduced density has eigenvalue " + std::to_string(lam.minCoeff()) + " (numerical corruption)");
    double S = 0;
    for (Eigen::Index i = 0; i < lam.size(); ++i)
        if (lam[i] > kEntropyCutoff) S -= lam[i] * std::log(lam[i]);
    S = std::max(S, 0.0);
    return unit == EntropyUnit::Bits ? S / std::log(2.0) : S;
}

namespace detail {
inline void check_groups(const std::vector<std::string> &groupA, const std::vector<std::string> &groupB) {
    if (groupA.empty() || groupB.empty()) throw Error("mutual information groups must be nonempty");
    for (const auto &a : groupA)
        for (const auto &b : groupB)
            if (a == b) throw Error("mutual information groups overlap on '" + a + "'");
}
} // namespace detail

/// I_M = S_A + S_B - S_AB from a reduced density covering both groups.
inline double mutual_information(const ReducedDensity &joint, const std::vector<std::string> &groupA,
                                 const std::vector<std::string> &groupB, EntropyUnit unit = EntropyUnit::Nats) {
    detail::check_groups(groupA, groupB);
    std::vector<std::string> both = groupA;
    both.insert(both.end(), groupB.begin(), groupB.end());
    const ReducedDensity rAB = both.size() == joint.labels.size() ? joint : reduce(joint, both);
    const double sAB = von_neumann_entropy(rAB, unit);
    const double sA = von_neumann_entropy(reduce(rAB, groupA), unit);
    const double sB = von_neumann_entropy(reduce(rAB, groupB), unit);
    // Sum the single-group entropies in label order so I(A,B) == I(B,A) bitwise.
    const bool a_first = groupA.front() < groupB.front();
    return (a_first ? sA + sB : sB + sA) - sAB;
}

/// I_M between disjoint subsystem groups of a pure state.
inline double mutual_information(const SpaceSpec &space, const StateVector &psi, const std::vector<std::string> &groupA,
                                 const std::vector<std::string> &groupB, EntropyUnit unit = EntropyUnit::Nats,
                                 std::size_t guard = kDefaultDensityGuard) {
    detail::check_groups(groupA, groupB);
    std::vector<std::string> joint = groupA;
    joint.insert(joint.end(), groupB.begin(), groupB.end());
    return mutual_information(partial_trace(space, psi, joint, guard), groupA, groupB, unit);
}

/// rho_1 (x) rho_2 for reduced densities of independent parts.
inline ReducedDensity kron(const ReducedDensity &a, const ReducedDensity &b) {
    ReducedDensity out;
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.dims = a.dims;
    out.dims.insert(out.dims.end(), b.dims.begin(), b.dims.end());
    const Eigen::Index n = b.rho.rows();
    out.rho.resize(a.rho.rows() * n, a.rho.cols() * n);
    for (Eigen::Index i = 0; i < a.rho.rows(); ++i)
        for (Eigen::Index j = 0; j < a.rho.cols(); ++j) out.rho.block(i * n, j * n, n, n) = a.rho(i, j) * b.rho;
    return out;
}

} // namespace mzsim
