#pragma once

#include <cmath>
#include <map>
#include <string>

#include <Eigen/Eigenvalues>

#include "mzsim/model.hpp"

namespace mzsim {

inline constexpr double kDefaultTailBound = 1e-8;

/// Truncated coherent-state amplitudes on |0>..|cutoff>, renormalized.
struct CoherentAmplitudes {
    Vector amplitudes;
    double tail = 0;          // discarded probability 1 - sum_{n<=N} P(n)
    double renormalization = 1; // factor applied after truncation
};

inline double poisson_tail(double mean, int cutoff) {
    if (mean == 0.0) return 0.0;
    // Sum P(n) for n > cutoff directly to avoid cancellation in 1 - head.
    double log_p = -mean + (cutoff + 1) * std::log(mean) - std::lgamma(cutoff + 2.0);
    double term = std::exp(log_p), sum = 0;
    for (int n = cutoff + 1; n < cutoff + 10000; ++n) {
        sum += term;
        const double next = term * mean / (n + 1);
        if (n > mean && next < 1e-20 * sum) break;
        term = next;
    }
    return sum;
}

inline CoherentAmplitudes coherent_amplitudes(int cutoff, cplx alpha, double tail_bound = kDefaultTailBound) {
    const double mean = std::norm(alpha);
    CoherentAmplitudes c;
    c.tail = poisson_tail(mean, cutoff);
    if (c.tail > tail_bound) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "coherent state |alpha|^2=%.6g loses %.3e probability above cutoff %d (bound %.1e)",
                      mean, c.tail, cutoff, tail_bound);
        throw Error(buf);
    }
    c.amplitudes = Vector::Zero(cutoff + 1);
    cplx a = std::exp(-mean / 2);
    for (int n = 0; n <= cutoff; ++n) {
        c.amplitudes[n] = a;
        a *= alpha / std::sqrt(static_cast<double>(n + 1));
    }
    const double norm = c.amplitudes.norm();
    c.renormalization = 1.0 / norm;
    c.amplitudes /= norm;
    return c;
}

/// Product state from per-subsystem local vectors; unspecified subsystems
/// are put in |0> (vacuum or |g>).
inline StateVector product_state(const SpaceSpec &space, const std::map<std::string, Vector> &locals) {
    std::vector<Vector> factors(space.size());
    for (std::size_t k = 0; k < space.size(); ++k) {
        factors[k] = Vector::Zero(static_cast<Eigen::Index>(space.local_dim(k)));
        factors[k][0] = 1.0;
    }
    for (const auto &[label, v] : locals) {
        const std::size_t k = space.index_of(label);
        if (static_cast<std::size_t>(v.size()) != space.local_dim(k))
            throw Error("local state for '" + label + "' has wrong dimension");
        factors[k] = v;
    }
    // Build by successive Kronecker products, last subsystem fastest.
    Vector psi = factors[0];
    for (std::size_t k = 1; k < space.size(); ++k) {
        const Vector &f = factors[k];
        Vector next(psi.size() * f.size());
        for (Eigen::Index i = 0; i < psi.size(); ++i) next.segment(i * f.size(), f.size()) = psi[i] * f;
        psi = std::move(next);
    }
    return {space.fingerprint(), std::move(psi)};
}

inline StateVector vacuum(const SpaceSpec &space) { return StateVector::basis(space, 0); }

/// Coherent state on one mode, every other subsystem in |0>.
inline StateVector coherent(const SpaceSpec &space, const std::string &label, cplx alpha,
                            double tail_bound = kDefaultTailBound) {
    const std::size_t k = space.index_of(label);
    if (!space[k].is_boson()) throw Error("'" + label + "' is not a boson mode");
    return product_state(space, {{label, coherent_amplitudes(space[k].cutoff, alpha, tail_bound).amplitudes}});
}

/// Dense matter Hamiltonian omega a^dag a + n_e (nu X + eps) on phonon (x) electron.
inline DenseMatrix matter_hamiltonian(int phonon_cutoff, const MatterParams &m) {
    const int d = phonon_cutoff + 1;
    const DenseMatrix a = local::annihilation(phonon_cutoff);
    const DenseMatrix X = a + a.adjoint();
    const DenseMatrix n = local::number(phonon_cutoff);
    const DenseMatrix I2 = DenseMatrix::Identity(2, 2);
    const DenseMatrix ne = local::excited_projector();
    auto kron = [](const DenseMatrix &A, const DenseMatrix &B) {
        DenseMatrix K(A.rows() * B.rows(), A.cols() * B.cols());
        for (Eigen::Index i = 0; i < A.rows(); ++i)
            for (Eigen::Index j = 0; j < A.cols(); ++j) K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
        return K;
    };
    return m.omega * kron(n, I2) + m.nu * kron(X, ne) + m.epsilon * kron(DenseMatrix::Identity(d, d), ne);
}

/// Lowest eigenvector of the matter Hamiltonian (phonon-major, electron-minor).
inline Vector matter_ground_numeric(int phonon_cutoff, const MatterParams &m) {
    Eigen::SelfAdjointEigenSolver<DenseMatrix> es(matter_hamiltonian(phonon_cutoff, m));
    if (es.info() != Eigen::Success) throw Error("matter eigensolver failed");
    Vector v = es.eigenvectors().col(0);
    // Fix the global phase so the largest component is real positive.
    Eigen::Index imax;
    v.cwiseAbs().maxCoeff(&imax);
    v *= std::conj(v[imax]) / std::abs(v[imax]);
    return v;
}

/// Local phonon and electron vectors of the matter ground state |G>. In the
/// |g> sector the matter Hamiltonian is a bare oscillator, so |G> = |g,0>
/// whenever the displaced |e> sector lies higher (eps > nu^2/omega).
struct MatterGround {
    Vector phonon;
    Vector electron;
};

inline MatterGround matter_ground_locals(int phonon_cutoff, const MatterParams &m) {
    if (!(m.epsilon > m.nu * m.nu / m.omega))
        throw Error("matter ground state is not |g,0> (epsilon <= nu^2/omega); entangled grounds are unsupported");
    MatterGround g{Vector::Zero(phonon_cutoff + 1), Vector::Zero(2)};
    g.phonon[0] = 1.0;
    g.electron[0] = 1.0;
    return g;
}

inline StateVector matter_ground(const SpaceSpec &space, const SiteLabels &site, const MatterParams &m) {
    const std::size_t k = space.index_of(site.phonon);
    detail::require_two_level(space, site.electron);
    const auto g = matter_ground_locals(space[k].cutoff, m);
    return product_state(space, {{site.phonon, g.phonon}, {site.electron, g.electron}});
}

/// Pump amplitude reaching a medium after BS1: arm A gets alpha/sqrt2, arm B
/// i alpha/sqrt2; an unnamed single site gets alpha itself.
inline cplx site_pump_amplitude(const std::string &site, cplx alpha) {
    if (site.empty()) return alpha;
    return (site == "B" ? cplx(0, 1) : cplx(1)) * alpha / std::sqrt(2.0);
}

/// Interferometer input: BS1 applied analytically to |alpha>|0>, giving
/// |alpha/sqrt2>_pumpA |i alpha/sqrt2>_pumpB, vacuum idlers and signal, and |G>
/// on each medium. A single site receives the undivided |alpha>.
inline StateVector initial_state(const SiteLayout &layout, const ModelParams &p, cplx alpha,
                                 double tail_bound = kDefaultTailBound) {
    const SpaceSpec &space = layout.space;
    std::map<std::string, Vector> locals;
    for (const auto &s : layout.sites) {
        const int N = space[space.index_of(s.pump)].cutoff;
        const cplx a = site_pump_amplitude(s.name, alpha);
        locals[s.pump] = coherent_amplitudes(N, a, tail_bound).amplitudes;
        const auto g = matter_ground_locals(space[space.index_of(s.phonon)].cutoff, p.site(s.name));
        locals[s.phonon] = g.phonon;
        locals[s.electron] = g.electron;
    }
    return product_state(space, locals);
}

} // namespace mzsim
