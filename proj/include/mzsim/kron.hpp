#pragma once

#include <variant>

#include "mzsim/terms.hpp"

namespace mzsim {

namespace detail {

/// Kronecker product of local factors over a contiguous sub-space.
inline Csr<cplx> kron_factors(const SpaceSpec &sub, std::size_t offset, const std::vector<LocalFactor> &factors, cplx coeff) {
    TermSum t(sub);
    std::vector<LocalFactor> shifted;
    for (const auto &f : factors) shifted.push_back({f.subsystem - offset, f.matrix, f.name});
    t.add(coeff, shifted);
    return t.to_sparse().csr();
}

inline bool csr_close(const Csr<cplx> &a, const Csr<cplx> &b, double rel = 1e-13) {
    if (a.rows != b.rows || a.col != b.col || a.row_ptr != b.row_ptr) return false;
    double scale = 0;
    for (const auto &v : a.val) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < a.val.size(); ++i)
        if (std::abs(a.val[i] - b.val[i]) > rel * scale) return false;
    return true;
}

/// Rescales so the first stored entry is 1; returns the removed factor.
inline cplx csr_canonicalize(Csr<cplx> &m) {
    for (const auto &v : m.val)
        if (v != cplx(0)) {
            const cplx s = v;
            for (auto &x : m.val) x /= s;
            return s;
        }
    return 1.0;
}

inline bool csr_is_identity(const Csr<cplx> &m) {
    if (m.nnz() != m.rows) return false;
    for (std::size_t r = 0; r < m.rows; ++r)
        if (m.row_ptr[r] != r || m.col[r] != r || m.val[r] != cplx(1)) return false;
    return true;
}

inline bool csr_is_diagonal(const Csr<cplx> &m) {
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t j = m.row_ptr[r]; j < m.row_ptr[r + 1]; ++j)
            if (m.col[j] != r) return false;
    return true;
}

template <class T> Csr<T> csr_cast(const Csr<cplx> &m) {
    Csr<T> out;
    out.rows = m.rows;
    out.cols = m.cols;
    out.row_ptr = m.row_ptr;
    out.col = m.col;
    out.val.reserve(m.nnz());
    for (const auto &v : m.val) {
        if constexpr (std::is_same_v<T, double>)
            out.val.push_back(v.real());
        else
            out.val.push_back(v);
    }
    return out;
}

} // namespace detail

/// Matrix-free operator of the form sum_g Outer_g (x) Inner_g over a space
/// split into leading (outer) and trailing (inner) subsystems.
///
/// Built from a TermSum by grouping terms with proportional inner factors and
/// then proportional outer factors, so a Hamiltonian like
/// sum_i (c_i + c_i^dag) (x) M collapses to a single group. Per outer row r a
/// group costs one block axpy per outer nonzero plus one inner block product:
/// y_r += Inner (sum_j Outer[r,j] x_j). No full-size matrix or scratch vector
/// is ever stored.
class KronOperator {
  public:
    struct Group {
        Csr<cplx> outer;
        Csr<cplx> inner;
        bool inner_identity = false;
        bool outer_diagonal = false;
    };

    KronOperator() = default;

    KronOperator(const TermSum &sum, std::size_t split, std::optional<bool> hermitian_hint = std::nullopt)
        : space_(sum.space()), split_(split), hermitian_hint_(hermitian_hint) {
        if (split == 0 || split >= space_.size()) throw Error("Kronecker split must leave both parts nonempty");
        const SpaceSpec outer_space = space_.slice(0, split);
        const SpaceSpec inner_space = space_.slice(split, space_.size());
        outer_dim_ = outer_space.total_dim();
        inner_dim_ = inner_space.total_dim();

        std::vector<Group> groups;
        for (const auto &t : sum.terms()) {
            std::vector<LocalFactor> of, inf;
            for (const auto &f : t.factors) (f.subsystem < split ? of : inf).push_back(f);
            groups.push_back({detail::kron_factors(outer_space, 0, of, 1.0),
                              detail::kron_factors(inner_space, split, inf, t.coeff), false, false});
        }
        // Alternate merging on proportional outer and inner factors until stable.
        for (int round = 0; round < 4; ++round) {
            const std::size_t before = groups.size();
            groups = merge(std::move(groups), false);
            groups = merge(std::move(groups), true);
            if (groups.size() == before && round > 0) break;
        }
        for (auto &g : groups) {
            // Move any scalar on the inner factor outward so identities are recognized.
            Csr<cplx> probe = g.inner;
            const cplx s = detail::csr_canonicalize(probe);
            if (detail::csr_is_identity(probe)) {
                g.inner = std::move(probe);
                for (auto &v : g.outer.val) v *= s;
                g.inner_identity = true;
            }
            g.outer_diagonal = detail::csr_is_diagonal(g.outer);
        }
        // Identity-inner groups collapse into one outer matrix.
        std::vector<Group> final_groups;
        std::optional<Group> ident;
        for (auto &g : groups) {
            if (g.inner_identity) {
                if (!ident)
                    ident = std::move(g);
                else
                    ident->outer = detail::csr_linear(ident->outer, cplx(1), g.outer, cplx(1));
            } else {
                final_groups.push_back(std::move(g));
            }
        }
        if (ident) {
            ident->outer_diagonal = detail::csr_is_diagonal(ident->outer);
            final_groups.insert(final_groups.begin(), std::move(*ident));
        }
        groups_ = std::move(final_groups);

        real_ = true;
        for (const auto &g : groups_) {
            for (const auto &v : g.outer.val) real_ = real_ && v.imag() == 0.0;
            for (const auto &v : g.inner.val) real_ = real_ && v.imag() == 0.0;
        }
        if (real_)
            kernel_ = make_kernel<double>();
        else
            kernel_ = make_kernel<cplx>();
    }

    const SpaceSpec &space() const { return space_; }
    std::uint64_t fingerprint() const { return space_.fingerprint(); }
    std::size_t dim() const { return space_.total_dim(); }
    std::size_t outer_dim() const { return outer_dim_; }
    std::size_t inner_dim() const { return inner_dim_; }
    const std::vector<Group> &groups() const { return groups_; }
    bool is_real() const { return real_; }
    std::optional<bool> hermitian_hint() const { return hermitian_hint_; }

    void apply_into(const Vector &x, Vector &y) const {
        std::visit([&](const auto &k) { apply_impl(k, x, y, nullptr); }, kernel_);
    }

    /// y = A x and <x, y>, accumulated per outer row and summed in row order.
    cplx apply_into_dot(const Vector &x, Vector &y) const {
        std::vector<cplx> rows(outer_dim_);
        std::visit([&](const auto &k) { apply_impl(k, x, y, rows.data()); }, kernel_);
        cplx s = 0;
        for (const auto &r : rows) s += r;
        return s;
    }

    StateVector apply(const StateVector &psi) const {
        check_state(psi);
        Vector y(psi.amplitudes().size());
        apply_into(psi.amplitudes(), y);
        return {fingerprint(), std::move(y)};
    }

    void check_state(const StateVector &psi) const {
        if (fingerprint() != psi.fingerprint()) throw Error("operator and state live on different spaces");
    }

  private:
    template <class T> struct KernelGroup {
        Csr<T> outer, inner;
        bool inner_identity, outer_diagonal;
    };
    template <class T> using Kernel = std::vector<KernelGroup<T>>;

    template <class T> Kernel<T> make_kernel() const {
        Kernel<T> k;
        for (const auto &g : groups_)
            k.push_back({detail::csr_cast<T>(g.outer), detail::csr_cast<T>(g.inner), g.inner_identity, g.outer_diagonal});
        return k;
    }

    static std::vector<Group> merge(std::vector<Group> in, bool by_outer) {
        std::vector<Group> out;
        for (auto &g : in) {
            Csr<cplx> &key = by_outer ? g.outer : g.inner;
            Csr<cplx> &other = by_outer ? g.inner : g.outer;
            const cplx s = detail::csr_canonicalize(key);
            for (auto &v : other.val) v *= s;
            bool placed = false;
            for (auto &o : out) {
                Csr<cplx> &okey = by_outer ? o.outer : o.inner;
                Csr<cplx> &oother = by_outer ? o.inner : o.outer;
                if (detail::csr_close(okey, key)) {
                    oother = detail::csr_linear(oother, cplx(1), other, cplx(1));
                    placed = true;
                    break;
                }
            }
            if (!placed) out.push_back(std::move(g));
        }
        // Drop groups that cancelled exactly.
        std::erase_if(out, [](const Group &g) { return g.outer.nnz() == 0 || g.inner.nnz() == 0; });
        return out;
    }

    template <class T> void apply_impl(const Kernel<T> &kernel, const Vector &x, Vector &y, cplx *row_dot) const {
        const std::size_t B = inner_dim_;
        if (static_cast<std::size_t>(x.size()) != dim()) throw Error("operator applied to a vector of wrong length");
        y.resize(x.size());
        const cplx *xd = x.data();
        cplx *yd = y.data();
        parallel_for(outer_dim_, [&](std::size_t b, std::size_t e) {
            std::vector<cplx> u(B);
            for (std::size_t r = b; r < e; ++r) {
                cplx *__restrict yr = yd + r * B;
                std::fill(yr, yr + B, cplx(0));
                for (const auto &kg : kernel) {
                    const auto &o = kg.outer;
                    const std::size_t j0 = o.row_ptr[r], j1 = o.row_ptr[r + 1];
                    if (j0 == j1) continue;
                    if (kg.inner_identity) {
                        for (std::size_t j = j0; j < j1; ++j) axpy(o.val[j], xd + static_cast<std::size_t>(o.col[j]) * B, yr, B);
                        continue;
                    }
                    const cplx *src;
                    T scale = T(1);
                    if (kg.outer_diagonal) {
                        src = xd + r * B;
                        scale = o.val[j0];
                    } else {
                        std::fill(u.begin(), u.end(), cplx(0));
                        for (std::size_t j = j0; j < j1; ++j)
                            axpy(o.val[j], xd + static_cast<std::size_t>(o.col[j]) * B, u.data(), B);
                        src = u.data();
                    }
                    const auto &m = kg.inner;
                    for (std::size_t i = 0; i < B; ++i) {
                        cplx s = 0;
                        for (std::size_t k = m.row_ptr[i]; k < m.row_ptr[i + 1]; ++k) s += m.val[k] * src[m.col[k]];
                        yr[i] += scale * s;
                    }
                }
                if (row_dot) {
                    const cplx *xr = xd + r * B;
                    cplx d = 0;
                    for (std::size_t i = 0; i < B; ++i) d += std::conj(xr[i]) * yr[i];
                    row_dot[r] = d;
                }
            }
        }, 16);
    }

    template <class T> static void axpy(T a, const cplx *__restrict x, cplx *__restrict y, std::size_t n) {
        if constexpr (std::is_same_v<T, double>) {
            // Treat complex as interleaved doubles so the loop vectorizes.
            const double *xs = reinterpret_cast<const double *>(x);
            double *ys = reinterpret_cast<double *>(y);
            for (std::size_t i = 0; i < 2 * n; ++i) ys[i] += a * xs[i];
        } else {
            for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
        }
    }

    SpaceSpec space_;
    std::size_t split_ = 0;
    std::size_t outer_dim_ = 0, inner_dim_ = 0;
    std::vector<Group> groups_;
    bool real_ = false;
    std::variant<Kernel<double>, Kernel<cplx>> kernel_;
    std::optional<bool> hermitian_hint_;
};

inline cplx expectation(const KronOperator &op, const StateVector &psi) {
    op.check_state(psi);
    detail::warn_unnormalized(psi.norm());
    Vector y(psi.amplitudes().size());
    op.apply_into(psi.amplitudes(), y);
    return detail::checked_expectation(psi.amplitudes().dot(y), op.hermitian_hint() == true);
}

} // namespace mzsim
