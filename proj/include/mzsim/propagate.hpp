#pragma once

#include <chrono>
#include <cmath>
#include <concepts>
#include <functional>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mzsim/opalg.hpp"

namespace mzsim {

/// Anything that can act on an amplitude vector: SparseOperator, KronOperator.
template <class Op>
concept LinearOperator = requires(const Op &op, const Vector &x, Vector &y) {
    op.apply_into(x, y);
    { op.dim() } -> std::convertible_to<std::size_t>;
    { op.fingerprint() } -> std::convertible_to<std::uint64_t>;
};

struct PropagatorConfig {
    double dt_sample = 0.05;       // output sampling interval (1/omega)
    double t_end = 32.0;
    int krylov_dim = 30;
    double step_tolerance = 1e-10; // local error bound per Krylov step
    int max_substep = 100000;      // Krylov steps allowed per sampling interval
    bool full_reorthogonalization = false;

    void validate() const {
        if (!(t_end > 0)) throw Error("t_end must be > 0");
        if (!(dt_sample > 0)) throw Error("dt_sample must be > 0");
        if (krylov_dim < 2) throw Error("krylov_dim must be >= 2");
        if (!(step_tolerance > 0)) throw Error("step_tolerance must be > 0");
        if (max_substep < 1) throw Error("max_substep must be >= 1");
    }

    /// Sample times 0, dt, 2dt, ..., with t_end always the last sample.
    std::vector<double> sample_times() const {
        std::vector<double> t{0.0};
        const auto n = static_cast<long>(std::floor(t_end / dt_sample + 1e-9));
        for (long i = 1; i <= n; ++i) t.push_back(static_cast<double>(i) * dt_sample);
        if (t_end - t.back() > 1e-12 * t_end) t.push_back(t_end);
        return t;
    }
};

struct PropagationStats {
    std::size_t matvecs = 0;
    std::size_t steps = 0;
    double max_step_error = 0; // largest a posteriori local error estimate accepted
    double smallest_step = 0;
    double largest_step = 0;
};

/// Short-iterate Lanczos propagator for psi(t) = exp(-iHt) psi(0).
///
/// Each step builds an m-dimensional Krylov basis, diagonalizes the
/// tridiagonal projection, and takes the longest step (up to the requested
/// interval) whose residual-based error estimate
///   beta * h_{m+1,m} * |e_m^T exp(-i T dt) e_1|
/// stays below step_tolerance.
namespace detail {

/// Lanczos tridiagonal projection T_m with exp(-i T dt) e_1 and the residual
/// error estimate beta * h_{m+1,m} * |e_m^T exp(-i T dt) e_1|.
class Projection {
  public:
    Projection() = default;
    Projection(const std::vector<double> &alpha, const std::vector<double> &beta, double beta0, bool invariant)
        : m_(alpha.size()), beta0_(beta0), h_next_(beta[alpha.size() - 1]), invariant_(invariant) {
        const auto m = static_cast<Eigen::Index>(m_);
        Eigen::VectorXd diag(m), sub(m > 0 ? m - 1 : 0);
        for (Eigen::Index i = 0; i < m; ++i) diag[i] = alpha[static_cast<std::size_t>(i)];
        for (Eigen::Index i = 0; i + 1 < m; ++i) sub[i] = beta[static_cast<std::size_t>(i)];
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
        es.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
        Q_ = es.eigenvectors().cast<cplx>();
        lam_ = es.eigenvalues();
        q0_ = es.eigenvectors().row(0).transpose();
    }

    std::size_t size() const { return m_; }

    Eigen::VectorXcd coeffs(double dt) const {
        Eigen::VectorXcd phase(static_cast<Eigen::Index>(m_));
        for (Eigen::Index i = 0; i < phase.size(); ++i) phase[i] = std::exp(cplx(0, -lam_[i] * dt)) * q0_[i];
        return Q_ * phase;
    }

    // The estimate oscillates in dt; also checking dt/2 guards against
    // accepting a long step at an accidental near-zero.
    double error(double dt) const {
        if (invariant_) return 0.0;
        return std::max(raw_error(dt), raw_error(0.5 * dt));
    }

  private:
    double raw_error(double dt) const {
        return beta0_ * h_next_ * std::abs(coeffs(dt)[static_cast<Eigen::Index>(m_ - 1)]);
    }

    std::size_t m_ = 0;
    double beta0_ = 0, h_next_ = 0;
    bool invariant_ = false;
    DenseMatrix Q_;
    Eigen::VectorXd lam_, q0_;
};

} // namespace detail

template <LinearOperator Op> class KrylovPropagator {
  public:
    KrylovPropagator(const Op &H, PropagatorConfig cfg) : H_(H), cfg_(std::move(cfg)) {
        cfg_.validate();
        const std::size_t m = static_cast<std::size_t>(cfg_.krylov_dim);
        basis_.resize(m + 1);
    }

    const PropagationStats &stats() const { return stats_; }
    const PropagatorConfig &config() const { return cfg_; }

    /// Advances psi in place by `duration` (negative runs backwards).
    void advance(Vector &psi, double duration) {
        double remaining = duration;
        int substeps = 0;
        while (std::abs(remaining) > 1e-15 * std::max(1.0, std::abs(duration))) {
            if (++substeps > cfg_.max_substep)
                throw Error("propagator needed more than max_substep steps; last error estimate " +
                            std::to_string(last_error_));
            remaining -= step(psi, remaining);
        }
    }

  private:
    static constexpr std::size_t kMinKrylov = 6;
    static constexpr Eigen::Index kChunk = 2048;
    using Projection = detail::Projection;

    /// y = H x, returning <x, y>; fused when the operator supports it.
    cplx apply_dot(const Vector &x, Vector &y) {
        ++stats_.matvecs;
        if constexpr (requires { H_.apply_into_dot(x, y); }) {
            return H_.apply_into_dot(x, y);
        } else {
            H_.apply_into(x, y);
            return x.dot(y);
        }
    }

    /// w = sw*w - su*u - sp*prev, returning |w|^2. Per-chunk partial sums are
    /// added in chunk order so the result does not depend on the thread count.
    static double fused_update(Vector &w, double sw, double su, const Vector &u, double sp, const Vector *prev) {
        const Eigen::Index n = w.size();
        const std::size_t chunks = static_cast<std::size_t>((n + kChunk - 1) / kChunk);
        std::vector<double> partial(chunks, 0.0);
        parallel_for(chunks, [&](std::size_t cb, std::size_t ce) {
            for (std::size_t k = cb; k < ce; ++k) {
                const Eigen::Index b = static_cast<Eigen::Index>(k) * kChunk;
                const Eigen::Index len = std::min(kChunk, n - b);
                auto ws = w.segment(b, len);
                if (prev)
                    ws = sw * ws - su * u.segment(b, len) - sp * prev->segment(b, len);
                else
                    ws = sw * ws - su * u.segment(b, len);
                partial[k] = ws.squaredNorm();
            }
        }, 16);
        double s = 0;
        for (double p : partial) s += p;
        return s;
    }

    /// One Krylov step toward `target` (signed); returns the signed time advanced.
    double step(Vector &psi, double target) {
        const std::size_t m_max = static_cast<std::size_t>(cfg_.krylov_dim);
        const double beta0 = psi.norm();
        if (beta0 == 0.0) return target;
        const Eigen::Index n = psi.size();
        for (auto &v : basis_)
            if (v.size() != n) v.resize(n);

        std::vector<double> alpha, beta; // beta[j] couples v_j and v_{j+1}
        // Basis vectors are stored unnormalized: v_j = basis_[j] / scale[j].
        std::vector<double> scale;
        basis_[0] = psi;
        scale.push_back(beta0);
        std::size_t m = 0;
        bool invariant = false;
        Projection proj;
        for (std::size_t j = 0; j < m_max; ++j) {
            Vector &w = basis_[j + 1];
            const Vector &u = basis_[j];
            const double inv = 1.0 / scale[j];
            const double a = apply_dot(u, w).real() * inv * inv;
            // w = H v_j - a v_j - beta_{j-1} v_{j-1}, and its norm, in one pass.
            const double c_prev = j > 0 ? beta[j - 1] / scale[j - 1] : 0.0;
            const Vector *prev = j > 0 ? &basis_[j - 1] : nullptr;
            double nrm2 = fused_update(w, inv, a * inv, u, c_prev, prev);
            if (cfg_.full_reorthogonalization) {
                for (std::size_t i = 0; i <= j; ++i) {
                    const double si = scale[i];
                    w -= (basis_[i].dot(w) / (si * si)) * basis_[i];
                }
                nrm2 = w.squaredNorm();
            }
            alpha.push_back(a);
            const double b = std::sqrt(nrm2);
            m = j + 1;
            if (b <= 1e-14 * std::abs(a) + 1e-300) {
                invariant = true;
                beta.push_back(0.0);
                break;
            }
            beta.push_back(b);
            scale.push_back(b);
            // Stop growing the basis once the whole remaining interval is reachable.
            if (m >= kMinKrylov && m < m_max) {
                proj = Projection(alpha, beta, beta0, false);
                if (proj.error(target) <= cfg_.step_tolerance) break;
            }
        }
        if (proj.size() != m) proj = Projection(alpha, beta, beta0, invariant);
        auto coeffs = [&](double dt) { return proj.coeffs(dt); };
        auto error = [&](double dt) { return proj.error(dt); };

        double dt = target;
        double err = error(dt);
        if (err > cfg_.step_tolerance) {
            // Shrink until acceptable, then bisect toward the largest acceptable step.
            double hi = dt;
            int guard = 0;
            while (err > cfg_.step_tolerance && ++guard < 200) {
                hi = dt;
                dt *= 0.5;
                err = error(dt);
            }
            double lo = dt;
            for (int it = 0; it < 12; ++it) {
                const double mid = 0.5 * (lo + hi);
                const double e = error(mid);
                if (e <= cfg_.step_tolerance) {
                    lo = mid;
                    err = e;
                } else {
                    hi = mid;
                }
            }
            dt = lo;
        }
        last_error_ = err;

        Eigen::VectorXcd c = beta0 * coeffs(dt);
        for (std::size_t i = 0; i < m; ++i) c[static_cast<Eigen::Index>(i)] /= scale[i];
        // Blocked combination: each chunk of psi is written once.
        parallel_for(static_cast<std::size_t>((n + kChunk - 1) / kChunk), [&](std::size_t cb, std::size_t ce) {
            for (std::size_t k = cb; k < ce; ++k) {
                const Eigen::Index b = static_cast<Eigen::Index>(k) * kChunk;
                const Eigen::Index len = std::min(kChunk, n - b);
                auto dst = psi.segment(b, len);
                dst = c[0] * basis_[0].segment(b, len);
                for (std::size_t i = 1; i < m; ++i) dst += c[static_cast<Eigen::Index>(i)] * basis_[i].segment(b, len);
            }
        }, 16);

        ++stats_.steps;
        stats_.max_step_error = std::max(stats_.max_step_error, err);
        const double adt = std::abs(dt);
        stats_.smallest_step = stats_.steps == 1 ? adt : std::min(stats_.smallest_step, adt);
        stats_.largest_step = std::max(stats_.largest_step, adt);
        return dt;
    }

    const Op &H_;
    PropagatorConfig cfg_;
    std::vector<Vector> basis_;
    PropagationStats stats_;
    double last_error_ = 0;
};

/// Per-sample bookkeeping of a run.
struct Trajectory {
    std::vector<double> times;
    std::vector<double> norms;
    std::vector<double> energies;
    std::vector<std::vector<double>> observables; // [observer][sample]
    std::vector<StateVector> snapshots;            // only when requested
    PropagationStats stats;
    double wall_seconds = 0;

    double max_norm_drift() const {
        double d = 0;
        for (double n : norms) d = std::max(d, std::abs(n - 1.0));
        return d;
    }
    /// max_t |E(t) - E(0)| / (1 + |E(0)|)
    double max_relative_energy_drift() const {
        double d = 0;
        for (double e : energies) d = std::max(d, std::abs(e - energies.front()) / (1.0 + std::abs(energies.front())));
        return d;
    }
};

using SampleVisitor = std::function<void(std::size_t index, double t, const StateVector &psi)>;

/// Evolves psi0 under a time-independent Hermitian H and calls `visit` at every
/// sample time (including t = 0). Norm and energy are logged per sample.
template <LinearOperator Op>
Trajectory evolve(const Op &H, const StateVector &psi0, const PropagatorConfig &cfg, const SampleVisitor &visit = {}) {
    if (H.fingerprint() != psi0.fingerprint()) throw Error("Hamiltonian and state live on different spaces");
    if (H.hermitian_hint() != true) throw Error("evolve requires an operator tagged Hermitian");
    const auto t0 = std::chrono::steady_clock::now();
    KrylovPropagator<Op> prop(H, cfg);
    Trajectory traj;
    StateVector psi = psi0;
    Vector hpsi(psi.amplitudes().size());
    const auto times = cfg.sample_times();
    double t_now = 0;
    for (std::size_t i = 0; i < times.size(); ++i) {
        if (i > 0) {
            prop.advance(psi.amplitudes(), times[i] - t_now);
            t_now = times[i];
        }
        if (!psi.all_finite()) throw Error("state became non-finite at t=" + std::to_string(t_now));
        H.apply_into(psi.amplitudes(), hpsi);
        traj.times.push_back(times[i]);
        traj.norms.push_back(psi.norm());
        traj.energies.push_back(psi.amplitudes().dot(hpsi).real() / psi.amplitudes().squaredNorm());
        if (visit) visit(i, times[i], psi);
    }
    traj.stats = prop.stats();
    traj.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return traj;
}

/// evolve() recording <O_k> (real part) for each observer at every sample.
template <LinearOperator Op, LinearOperator Obs>
Trajectory evolve(const Op &H, const StateVector &psi0, const PropagatorConfig &cfg, const std::vector<Obs> &observers,
                  bool keep_snapshots = false) {
    std::vector<std::vector<double>> values(observers.size());
    std::vector<StateVector> snaps;
    Vector tmp;
    auto visit = [&](std::size_t, double, const StateVector &psi) {
        tmp.resize(psi.amplitudes().size());
        for (std::size_t k = 0; k < observers.size(); ++k) {
            observers[k].apply_into(psi.amplitudes(), tmp);
            values[k].push_back(psi.amplitudes().dot(tmp).real());
        }
        if (keep_snapshots) snaps.push_back(psi);
    };
    Trajectory traj = evolve(H, psi0, cfg, SampleVisitor(visit));
    traj.observables = std::move(values);
    traj.snapshots = std::move(snaps);
    return traj;
}

/// Exact evolution through a dense Hermitian eigendecomposition; verification
/// oracle for spaces up to 4096 states.
class DenseEvolution {
  public:
    static constexpr std::size_t kMaxDim = 4096;

    explicit DenseEvolution(const DenseMatrix &H) {
        if (static_cast<std::size_t>(H.rows()) > kMaxDim) throw Error("dense oracle limited to dimension 4096");
        if (H.imag().cwiseAbs().maxCoeff() == 0.0) {
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H.real());
            if (es.info() != Eigen::Success) throw Error("dense eigensolver failed");
            evals_ = es.eigenvalues();
            evecs_ = es.eigenvectors().cast<cplx>();
        } else {
            Eigen::SelfAdjointEigenSolver<DenseMatrix> es(H);
            if (es.info() != Eigen::Success) throw Error("dense eigensolver failed");
            evals_ = es.eigenvalues();
            evecs_ = es.eigenvectors();
        }
    }
    explicit DenseEvolution(const SparseOperator &H) : DenseEvolution(checked_dense(H)) {}

    const Eigen::VectorXd &eigenvalues() const { return evals_; }

    Vector evolve(const Vector &psi0, double t) const {
        Vector c = evecs_.adjoint() * psi0;
        for (Eigen::Index i = 0; i < c.size(); ++i) c[i] *= std::exp(cplx(0, -evals_[i] * t));
        return evecs_ * c;
    }

  private:
    static DenseMatrix checked_dense(const SparseOperator &H) {
        if (H.dim() > kMaxDim) throw Error("dense oracle limited to dimension 4096");
        return H.to_dense();
    }
    Eigen::VectorXd evals_;
    DenseMatrix evecs_;
};

inline StateVector evolve_dense_oracle(const SparseOperator &H, const StateVector &psi0, double t) {
    H.check_state(psi0);
    return {psi0.fingerprint(), DenseEvolution(H).evolve(psi0.amplitudes(), t)};
}

} // namespace mzsim
