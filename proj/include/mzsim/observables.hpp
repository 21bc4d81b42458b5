#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "mzsim/entangle.hpp"
#include "mzsim/kron.hpp"
#include "mzsim/model.hpp"
#include "mzsim/opdsl.hpp"
#include "mzsim/propagate.hpp"

namespace mzsim {

/// Symbol table for the operator language on a layout: c1A/c2A/c3 (C1) or
/// c3A/c3B (C2), a_A, sx_A/sy_A/sz_A, plus every boson label itself.
inline dsl::SymbolTable symbol_table(const SiteLayout &layout) {
    dsl::SymbolTable t;
    for (const auto &[ident, label] : layout.symbols()) {
        const SubsystemSpec &s = layout.space[layout.space.index_of(label)];
        if (s.is_boson()) {
            t[ident] = {label, dsl::SymbolKind::Lower};
        } else if (ident.size() >= 2 && ident[0] == 's' && (ident[1] == 'x' || ident[1] == 'y' || ident[1] == 'z')) {
            t[ident] = {label, ident[1] == 'x'   ? dsl::SymbolKind::PauliX
                               : ident[1] == 'y' ? dsl::SymbolKind::PauliY
                                                 : dsl::SymbolKind::PauliZ};
        }
    }
    return t;
}

/// <n_k> = sum_i |psi_i|^2 n_k(i), computed without building the operator.
inline double occupation(const SpaceSpec &space, const StateVector &psi, const std::string &label) {
    if (psi.fingerprint() != space.fingerprint()) throw Error("state does not live on this space");
    const std::size_t k = space.index_of(label);
    if (!space[k].is_boson()) throw Error("occupation needs a boson mode, '" + label + "' is two-level");
    const std::size_t stride = space.stride(k), d = space.local_dim(k), dim = space.total_dim();
    const auto &x = psi.amplitudes();
    double s = 0;
    for (std::size_t i = 0; i < dim; ++i) s += std::norm(x[static_cast<Eigen::Index>(i)]) * static_cast<double>((i / stride) % d);
    return s / x.squaredNorm();
}

/// <c_a^dag c_b> for two distinct boson modes.
inline cplx mode_correlation(const SpaceSpec &space, const StateVector &psi, const std::string &a, const std::string &b) {
    const std::size_t ka = space.index_of(a), kb = space.index_of(b);
    if (!space[ka].is_boson() || !space[kb].is_boson()) throw Error("mode correlation needs boson modes");
    if (ka == kb) throw Error("mode correlation needs two distinct modes");
    const std::size_t sa = space.stride(ka), sb = space.stride(kb);
    const std::size_t da = space.local_dim(ka), db = space.local_dim(kb), dim = space.total_dim();
    const auto &x = psi.amplitudes();
    cplx s = 0;
    // c_a^dag c_b |.., na, .., nb, ..> = sqrt(na+1) sqrt(nb) |.., na+1, .., nb-1, ..>
    for (std::size_t i = 0; i < dim; ++i) {
        const std::size_t na = (i / sa) % da, nb = (i / sb) % db;
        if (nb == 0 || na + 1 >= da) continue;
        const std::size_t j = i + sa - sb;
        s += std::conj(x[static_cast<Eigen::Index>(j)]) * std::sqrt(static_cast<double>((na + 1) * nb)) * x[static_cast<Eigen::Index>(i)];
    }
    return s / x.squaredNorm();
}

/// <c> for a boson mode.
inline cplx mode_mean(const SpaceSpec &space, const StateVector &psi, const std::string &label) {
    const std::size_t k = space.index_of(label);
    if (!space[k].is_boson()) throw Error("'" + label + "' is not a boson mode");
    const std::size_t s = space.stride(k), d = space.local_dim(k), dim = space.total_dim();
    const auto &x = psi.amplitudes();
    cplx m = 0;
    for (std::size_t i = 0; i < dim; ++i) {
        const std::size_t n = (i / s) % d;
        if (n == 0) continue;
        m += std::conj(x[static_cast<Eigen::Index>(i - s)]) * std::sqrt(static_cast<double>(n)) * x[static_cast<Eigen::Index>(i)];
    }
    return m / x.squaredNorm();
}

/// Photon number at BS2 output port 2'A from idler moments, with a phase phi
/// applied to arm B: c_2'A = (c_2A + i e^{i phi} c_2B)/sqrt2, so
/// N = (<n_2A> + <n_2B>)/2 - Im[e^{i phi} <c_2A^dag c_2B>].
/// `port_b` selects the complementary port c_2'B = (i c_2A + e^{i phi} c_2B)/sqrt2.
inline double bs2_from_moments(double n_a, double n_b, cplx corr_ab, double phi, bool port_b = false) {
    const double interference = std::imag(std::exp(cplx(0, phi)) * corr_ab);
    return 0.5 * (n_a + n_b) + (port_b ? interference : -interference);
}

inline double bs2_output(const SpaceSpec &space, const StateVector &psi, double phi, const std::string &idler_a = "idler_A",
                         const std::string &idler_b = "idler_B", bool port_b = false) {
    return bs2_from_moments(occupation(space, psi, idler_a), occupation(space, psi, idler_b),
                            mode_correlation(space, psi, idler_a, idler_b), phi, port_b);
}

/// Composite operators tracked as indicators of entanglement build-up (C1 symbols).
namespace presets {
inline const std::vector<std::pair<std::string, std::string>> &composite() {
    static const std::vector<std::pair<std::string, std::string>> p = {
        {"fig8a", "sz_A * c3 * c2A + h.c."},
        {"fig8b", "sz_B * c3 * c2B + h.c."},
        {"fig8c", "sy_A * c3 * c2A * c2B' + h.c."},
        {"fig8d", "sz_B * sx_A * c3 * c2A * c2B' + h.c."},
    };
    return p;
}
inline std::string composite(const std::string &name) {
    for (const auto &[n, e] : composite())
        if (n == name) return e;
    throw Error("unknown composite preset '" + name + "'");
}
} // namespace presets

/// Operator of a parsed expression in the cheapest applicable representation:
/// a Kronecker operator split at the photon/matter boundary when the layout
/// has one, otherwise CSR.
class ExprOperator {
  public:
    ExprOperator(const SiteLayout &layout, const dsl::OpExpr &expr) : hermitian_(expr.hermitian_conjugate) {
        TermSum terms = dsl::lower_terms(expr, layout.space, symbol_table(layout));
        std::optional<bool> hint;
        if (hermitian_) hint = true;
        if (layout.split > 0 && layout.split < layout.space.size())
            op_ = KronOperator(terms, layout.split, hint);
        else
            op_ = terms.to_sparse(hint);
    }

    bool hermitian() const { return hermitian_; }

    cplx expectation(const StateVector &psi) const {
        return std::visit([&](const auto &op) { return mzsim::expectation(op, psi); }, op_);
    }

  private:
    bool hermitian_;
    std::variant<SparseOperator, KronOperator> op_;
};

/// Real expectation of a "+ h.c." expression.
inline double composite_expectation(const SiteLayout &layout, const StateVector &psi, const dsl::OpExpr &expr) {
    if (!expr.hermitian_conjugate) throw Error("composite observables must be Hermitian (end with '+ h.c.')");
    return ExprOperator(layout, expr).expectation(psi).real();
}

inline double composite_expectation(const SiteLayout &layout, const StateVector &psi, const std::string &text) {
    return composite_expectation(layout, psi, dsl::parse(text));
}

/// Right-hand side operator of i d/dt c_2j = [c_2j, H] without truncation
/// effects: Omega2 c_2j + mu sx_j + tau X_j sx_j + tau X_j.
inline TermSum idler_eom_rhs(const SiteLayout &layout, const ModelParams &p, const std::string &site) {
    const SiteLabels &s = layout.site(site);
    const MatterParams &m = p.site(site);
    const SpaceSpec &sp = layout.space;
    TermSum t(sp);
    t.add(p.Omega2, {detail::factor(sp, s.idler, "a")});
    t.add(m.mu, {detail::factor(sp, s.electron, "sx")});
    t.add(m.tau, {detail::factor(sp, s.phonon, "X"), detail::factor(sp, s.electron, "sx")});
    t.add(m.tau, {detail::factor(sp, s.phonon, "X")});
    return t;
}

/// Exact truncated commutator [c_2j, H] = Omega2 c + (1 - (N+1)|N><N|) M_j.
inline TermSum idler_eom_rhs_truncated(const SiteLayout &layout, const ModelParams &p, const std::string &site) {
    const SiteLabels &s = layout.site(site);
    const SpaceSpec &sp = layout.space;
    TermSum t = idler_eom_rhs(layout, p, site);
    const std::size_t k = sp.index_of(s.idler);
    const int N = sp[k].cutoff;
    DenseMatrix proj = DenseMatrix::Zero(N + 1, N + 1);
    proj(N, N) = -(N + 1.0);
    TermSum corr(sp);
    corr.add(1.0, {LocalFactor{k, proj, "-(N+1)|N><N|"}});
    TermSum M(sp);
    const MatterParams &m = p.site(site);
    M.add(m.mu, {detail::factor(sp, s.electron, "sx")});
    M.add(m.tau, {detail::factor(sp, s.phonon, "X"), detail::factor(sp, s.electron, "sx")});
    M.add(m.tau, {detail::factor(sp, s.phonon, "X")});
    t.append(corr.times(M));
    return t;
}

enum class EomRhs { Untruncated, TruncationExact };

/// |(<c>(t+dt) - <c>(t-dt)) / 2dt - <-i RHS>(t)| for the idler of `site`;
/// O(dt^2) when the dynamics obey the idler equation of motion.
inline double verify_eom_idler(const SiteLayout &layout, const ModelParams &p, const std::string &site,
                               const StateVector &psi_minus, const StateVector &psi_t, const StateVector &psi_plus,
                               double dt_fd, EomRhs rhs = EomRhs::Untruncated) {
    if (!(dt_fd > 0)) throw Error("dt_fd must be > 0");
    const SiteLabels &s = layout.site(site);
    TermSum c(layout.space);
    c.add(1.0, {detail::factor(layout.space, s.idler, "a")});
    const TermSum r = rhs == EomRhs::Untruncated ? idler_eom_rhs(layout, p, site) : idler_eom_rhs_truncated(layout, p, site);
    auto ev = [&](const TermSum &t, const StateVector &psi) {
        if (layout.split > 0 && layout.split < layout.space.size()) return expectation(KronOperator(t, layout.split), psi);
        return expectation(t.to_sparse(), psi);
    };
    const cplx fd = (ev(c, psi_plus) - ev(c, psi_minus)) / (2.0 * dt_fd);
    const cplx predicted = cplx(0, -1) * ev(r, psi_t);
    return std::abs(fd - predicted);
}

} // namespace mzsim
