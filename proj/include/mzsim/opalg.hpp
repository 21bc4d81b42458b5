#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mzsim/hspace.hpp"
#include "mzsim/parallel.hpp"

namespace mzsim {

using cplx = std::complex<double>;
using Vector = Eigen::VectorXcd;
using DenseMatrix = Eigen::MatrixXcd;

inline constexpr double kHermitianTol = 1e-12;

/// Compressed-row matrix with sorted column indices per row.
template <class T> struct Csr {
    std::size_t rows = 0, cols = 0;
    std::vector<std::size_t> row_ptr{0};
    std::vector<std::uint32_t> col;
    std::vector<T> val;

    std::size_t nnz() const { return val.size(); }

    static Csr identity(std::size_t n) {
        Csr m;
        m.rows = m.cols = n;
        m.row_ptr.resize(n + 1);
        m.col.resize(n);
        m.val.assign(n, T(1));
        for (std::size_t i = 0; i < n; ++i) {
            m.row_ptr[i] = i;
            m.col[i] = static_cast<std::uint32_t>(i);
        }
        m.row_ptr[n] = n;
        return m;
    }

    T at(std::size_t r, std::size_t c) const {
        const auto b = col.begin() + static_cast<std::ptrdiff_t>(row_ptr[r]);
        const auto e = col.begin() + static_cast<std::ptrdiff_t>(row_ptr[r + 1]);
        auto it = std::lower_bound(b, e, static_cast<std::uint32_t>(c));
        if (it != e && *it == c) return val[static_cast<std::size_t>(it - col.begin())];
        return T(0);
    }
};

namespace detail {

/// Sparse accumulator for building one CSR row at a time. Entries are summed in
/// insertion order, then emitted in ascending column order.
template <class T> class RowAccumulator {
  public:
    explicit RowAccumulator(std::size_t cols) : dense_(cols, T(0)), used_(cols, false) {}

    void add(std::size_t c, T v) {
        if (!used_[c]) {
            used_[c] = true;
            touched_.push_back(c);
        }
        dense_[c] += v;
    }

    void flush(Csr<T> &out, bool drop_zeros = true) {
        std::sort(touched_.begin(), touched_.end());
        for (auto c : touched_) {
            if (!drop_zeros || dense_[c] != T(0)) {
                out.col.push_back(static_cast<std::uint32_t>(c));
                out.val.push_back(dense_[c]);
            }
            dense_[c] = T(0);
            used_[c] = false;
        }
        touched_.clear();
        out.row_ptr.push_back(out.val.size());
    }

  private:
    std::vector<T> dense_;
    std::vector<bool> used_;
    std::vector<std::size_t> touched_;
};

template <class T> Csr<T> csr_linear(const Csr<T> &a, T sa, const Csr<T> &b, T sb) {
    Csr<T> out;
    out.rows = a.rows;
    out.cols = a.cols;
    out.row_ptr.reserve(a.rows + 1);
    out.col.reserve(a.nnz() + b.nnz());
    out.val.reserve(a.nnz() + b.nnz());
    for (std::size_t r = 0; r < a.rows; ++r) {
        std::size_t i = a.row_ptr[r], ie = a.row_ptr[r + 1];
        std::size_t j = b.row_ptr[r], je = b.row_ptr[r + 1];
        while (i < ie || j < je) {
            std::uint32_t c;
            T v;
            if (j >= je || (i < ie && a.col[i] < b.col[j])) {
                c = a.col[i];
                v = sa * a.val[i++];
            } else if (i >= ie || b.col[j] < a.col[i]) {
                c = b.col[j];
                v = sb * b.val[j++];
            } else {
                c = a.col[i];
                v = sa * a.val[i++] + sb * b.val[j++];
            }
            if (v != T(0)) {
                out.col.push_back(c);
                out.val.push_back(v);
            }
        }
        out.row_ptr.push_back(out.val.size());
    }
    return out;
}

template <class T> Csr<T> csr_product(const Csr<T> &a, const Csr<T> &b) {
    Csr<T> out;
    out.rows = a.rows;
    out.cols = b.cols;
    out.row_ptr.reserve(a.rows + 1);
    RowAccumulator<T> acc(b.cols);
    for (std::size_t r = 0; r < a.rows; ++r) {
        for (std::size_t i = a.row_ptr[r]; i < a.row_ptr[r + 1]; ++i) {
            const std::size_t k = a.col[i];
            const T av = a.val[i];
            for (std::size_t j = b.row_ptr[k]; j < b.row_ptr[k + 1]; ++j) acc.add(b.col[j], av * b.val[j]);
        }
        acc.flush(out);
    }
    return out;
}

inline Csr<cplx> csr_adjoint(const Csr<cplx> &a) {
    Csr<cplx> out;
    out.rows = a.cols;
    out.cols = a.rows;
    std::vector<std::size_t> count(a.cols + 1, 0);
    for (auto c : a.col) ++count[c + 1];
    for (std::size_t c = 0; c < a.cols; ++c) count[c + 1] += count[c];
    out.row_ptr = count;
    out.col.resize(a.nnz());
    out.val.resize(a.nnz());
    auto next = count;
    // Rows of `a` visited in ascending order keep each output row sorted.
    for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t i = a.row_ptr[r]; i < a.row_ptr[r + 1]; ++i) {
            const std::size_t dst = next[a.col[i]]++;
            out.col[dst] = static_cast<std::uint32_t>(r);
            out.val[dst] = std::conj(a.val[i]);
        }
    return out;
}

/// Embeds a local operator acting on subsystem k of `space` (identity elsewhere).
inline Csr<cplx> embed_local(const SpaceSpec &space, std::size_t k, const Csr<cplx> &local) {
    const std::size_t dim = space.total_dim();
    const std::size_t stride = space.stride(k);
    Csr<cplx> out;
    out.rows = out.cols = dim;
    out.row_ptr.reserve(dim + 1);
    for (std::size_t i = 0; i < dim; ++i) {
        const std::size_t n = static_cast<std::size_t>(space.occupation(i, k));
        const std::size_t base = i - n * stride;
        for (std::size_t j = local.row_ptr[n]; j < local.row_ptr[n + 1]; ++j) {
            if (local.val[j] == cplx(0)) continue;
            out.col.push_back(static_cast<std::uint32_t>(base + local.col[j] * stride));
            out.val.push_back(local.val[j]);
        }
        out.row_ptr.push_back(out.val.size());
    }
    return out;
}

} // namespace detail

/// Local (single-subsystem) matrices in the Fock / {|g>,|e>} basis.
namespace local {

inline Csr<cplx> from_dense(const DenseMatrix &m) {
    Csr<cplx> out;
    out.rows = static_cast<std::size_t>(m.rows());
    out.cols = static_cast<std::size_t>(m.cols());
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            if (m(r, c) != cplx(0)) {
                out.col.push_back(static_cast<std::uint32_t>(c));
                out.val.push_back(m(r, c));
            }
        out.row_ptr.push_back(out.val.size());
    }
    return out;
}

/// <n-1|a|n> = sqrt(n).
inline DenseMatrix annihilation(int cutoff) {
    DenseMatrix m = DenseMatrix::Zero(cutoff + 1, cutoff + 1);
    for (int n = 1; n <= cutoff; ++n) m(n - 1, n) = std::sqrt(static_cast<double>(n));
    return m;
}

inline DenseMatrix number(int cutoff) {
    DenseMatrix m = DenseMatrix::Zero(cutoff + 1, cutoff + 1);
    for (int n = 0; n <= cutoff; ++n) m(n, n) = n;
    return m;
}

// |g> = 0, |e> = 1, so sigma_z = diag(-1, +1) and [sz, sx] = 2i sy.
inline DenseMatrix pauli(char axis) {
    DenseMatrix m = DenseMatrix::Zero(2, 2);
    switch (axis) {
    case 'x':
        m(0, 1) = m(1, 0) = 1.0;
        break;
    case 'y':
        m(0, 1) = cplx(0, 1);
        m(1, 0) = cplx(0, -1);
        break;
    case 'z':
        m(0, 0) = -1.0;
        m(1, 1) = 1.0;
        break;
    default:
        throw Error(std::string("unknown Pauli axis '") + axis + "'");
    }
    return m;
}

} // namespace local

/// Dense amplitude vector tagged with the fingerprint of its space.
class StateVector {
  public:
    StateVector() = default;
    StateVector(const SpaceSpec &space) : fingerprint_(space.fingerprint()), amp_(Vector::Zero(static_cast<Eigen::Index>(space.total_dim()))) {}
    StateVector(std::uint64_t fingerprint, Vector amplitudes) : fingerprint_(fingerprint), amp_(std::move(amplitudes)) {}

    static StateVector basis(const SpaceSpec &space, std::size_t index) {
        StateVector s(space);
        s.amp_[static_cast<Eigen::Index>(index)] = 1.0;
        return s;
    }

    std::uint64_t fingerprint() const { return fingerprint_; }
    std::size_t dim() const { return static_cast<std::size_t>(amp_.size()); }
    const Vector &amplitudes() const { return amp_; }
    Vector &amplitudes() { return amp_; }
    cplx operator[](std::size_t i) const { return amp_[static_cast<Eigen::Index>(i)]; }

    double norm() const { return amp_.norm(); }
    bool all_finite() const { return amp_.allFinite(); }

    StateVector normalized() const {
        const double n = norm();
        if (!(n > 0)) throw Error("cannot normalize a zero state");
        return StateVector(fingerprint_, amp_ / n);
    }

    cplx dot(const StateVector &other) const {
        check_same(other);
        return amp_.dot(other.amp_);
    }

    void check_same(const StateVector &other) const {
        if (fingerprint_ != other.fingerprint_) throw Error("state vectors live on different spaces");
    }

  private:
    std::uint64_t fingerprint_ = 0;
    Vector amp_;
};

/// Immutable sparse operator over a composite space. Arithmetic returns new
/// operators; operands must share the space fingerprint.
class SparseOperator {
  public:
    SparseOperator() = default;
    SparseOperator(std::uint64_t fingerprint, Csr<cplx> m, std::optional<bool> hermitian_hint = std::nullopt)
        : fingerprint_(fingerprint), m_(std::move(m)), hermitian_hint_(hermitian_hint) {}

    static SparseOperator identity(const SpaceSpec &space) {
        return {space.fingerprint(), Csr<cplx>::identity(space.total_dim()), true};
    }
    static SparseOperator zero(const SpaceSpec &space) {
        Csr<cplx> m;
        m.rows = m.cols = space.total_dim();
        m.row_ptr.assign(m.rows + 1, 0);
        return {space.fingerprint(), std::move(m), true};
    }
    static SparseOperator embed(const SpaceSpec &space, std::size_t k, const DenseMatrix &local_matrix,
                                std::optional<bool> hermitian_hint = std::nullopt) {
        if (static_cast<std::size_t>(local_matrix.rows()) != space.local_dim(k))
            throw Error("local matrix does not match dimension of '" + space[k].label + "'");
        return {space.fingerprint(), detail::embed_local(space, k, local::from_dense(local_matrix)), hermitian_hint};
    }
    static SparseOperator from_dense(const SpaceSpec &space, const DenseMatrix &m) {
        if (static_cast<std::size_t>(m.rows()) != space.total_dim()) throw Error("dense matrix has wrong dimension");
        return {space.fingerprint(), local::from_dense(m)};
    }

    std::uint64_t fingerprint() const { return fingerprint_; }
    std::size_t dim() const { return m_.rows; }
    std::size_t nnz() const { return m_.nnz(); }
    const Csr<cplx> &csr() const { return m_; }
    std::optional<bool> hermitian_hint() const { return hermitian_hint_; }
    cplx at(std::size_t r, std::size_t c) const { return m_.at(r, c); }

    SparseOperator with_hermitian_hint(bool h) const { return {fingerprint_, m_, h}; }

    SparseOperator adjoint() const {
        return {fingerprint_, detail::csr_adjoint(m_), hermitian_hint_};
    }

    friend SparseOperator operator+(const SparseOperator &a, const SparseOperator &b) {
        a.check_same(b);
        return {a.fingerprint_, detail::csr_linear(a.m_, cplx(1), b.m_, cplx(1)), both_hermitian(a, b)};
    }
    friend SparseOperator operator-(const SparseOperator &a, const SparseOperator &b) {
        a.check_same(b);
        return {a.fingerprint_, detail::csr_linear(a.m_, cplx(1), b.m_, cplx(-1)), both_hermitian(a, b)};
    }
    friend SparseOperator operator*(const SparseOperator &a, const SparseOperator &b) {
        a.check_same(b);
        return {a.fingerprint_, detail::csr_product(a.m_, b.m_)};
    }
    friend SparseOperator operator*(cplx s, const SparseOperator &a) {
        Csr<cplx> m = a.m_;
        for (auto &v : m.val) v *= s;
        std::optional<bool> h;
        if (a.hermitian_hint_ == true && s.imag() == 0.0) h = true;
        return {a.fingerprint_, std::move(m), h};
    }
    friend SparseOperator operator*(double s, const SparseOperator &a) { return cplx(s) * a; }
    friend SparseOperator operator-(const SparseOperator &a) { return cplx(-1) * a; }

    /// Largest entrywise |A - A^dagger|.
    double hermiticity_error() const {
        const auto adj = detail::csr_adjoint(m_);
        const auto diff = detail::csr_linear(m_, cplx(1), adj, cplx(-1));
        double e = 0;
        for (const auto &v : diff.val) e = std::max(e, std::abs(v));
        return e;
    }
    bool is_hermitian(double tol = kHermitianTol) const { return hermiticity_error() <= tol; }

    /// Throws if the operator is tagged Hermitian but is not.
    void verify_hermitian_hint(double tol = kHermitianTol) const {
        if (hermitian_hint_ == true) {
            const double e = hermiticity_error();
            if (e > tol) throw Error("operator tagged Hermitian deviates by " + std::to_string(e));
        }
    }

    void apply_into(const Vector &x, Vector &y) const {
        parallel_for(m_.rows, [&](std::size_t b, std::size_t e) {
            for (std::size_t r = b; r < e; ++r) {
                cplx s = 0;
                for (std::size_t j = m_.row_ptr[r]; j < m_.row_ptr[r + 1]; ++j) s += m_.val[j] * x[m_.col[j]];
                y[static_cast<Eigen::Index>(r)] = s;
            }
        });
    }

    StateVector apply(const StateVector &psi) const {
        check_state(psi);
        Vector y(psi.amplitudes().size());
        apply_into(psi.amplitudes(), y);
        return {fingerprint_, std::move(y)};
    }

    DenseMatrix to_dense() const {
        DenseMatrix d = DenseMatrix::Zero(static_cast<Eigen::Index>(m_.rows), static_cast<Eigen::Index>(m_.cols));
        for (std::size_t r = 0; r < m_.rows; ++r)
            for (std::size_t j = m_.row_ptr[r]; j < m_.row_ptr[r + 1]; ++j)
                d(static_cast<Eigen::Index>(r), m_.col[j]) += m_.val[j];
        return d;
    }

    /// Matrix Market coordinate dump (1-based indices).
    void write_matrix_market(std::ostream &os) const {
        os << "%%MatrixMarket matrix coordinate complex general\n";
        os << m_.rows << ' ' << m_.cols << ' ' << m_.nnz() << '\n';
        os << std::setprecision(17);
        for (std::size_t r = 0; r < m_.rows; ++r)
            for (std::size_t j = m_.row_ptr[r]; j < m_.row_ptr[r + 1]; ++j)
                os << r + 1 << ' ' << m_.col[j] + 1 << ' ' << m_.val[j].real() << ' ' << m_.val[j].imag() << '\n';
    }

    void check_same(const SparseOperator &other) const {
        if (fingerprint_ != other.fingerprint_) throw Error("operators live on different spaces");
    }
    void check_state(const StateVector &psi) const {
        if (fingerprint_ != psi.fingerprint()) throw Error("operator and state live on different spaces");
    }

  private:
    static std::optional<bool> both_hermitian(const SparseOperator &a, const SparseOperator &b) {
        if (a.hermitian_hint_ == true && b.hermitian_hint_ == true) return true;
        return std::nullopt;
    }

    std::uint64_t fingerprint_ = 0;
    Csr<cplx> m_;
    std::optional<bool> hermitian_hint_;
};

inline SparseOperator adjoint(const SparseOperator &a) { return a.adjoint(); }

inline SparseOperator commutator(const SparseOperator &a, const SparseOperator &b) { return a * b - b * a; }

inline SparseOperator lower(const SpaceSpec &space, std::string_view label) {
    const std::size_t k = space.index_of(label);
    if (!space[k].is_boson()) throw Error("'" + std::string(label) + "' is not a boson mode");
    return SparseOperator::embed(space, k, local::annihilation(space[k].cutoff));
}

inline SparseOperator raise(const SpaceSpec &space, std::string_view label) { return lower(space, label).adjoint(); }

inline SparseOperator number_op(const SpaceSpec &space, std::string_view label) {
    const std::size_t k = space.index_of(label);
    if (!space[k].is_boson()) throw Error("'" + std::string(label) + "' is not a boson mode");
    return SparseOperator::embed(space, k, local::number(space[k].cutoff), true);
}

inline SparseOperator pauli(const SpaceSpec &space, std::string_view label, char axis) {
    const std::size_t k = space.index_of(label);
    if (space[k].kind != SubsystemKind::TwoLevel) throw Error("'" + std::string(label) + "' is not a two-level system");
    return SparseOperator::embed(space, k, local::pauli(axis), true);
}

/// Expression tree over operators for `compose`.
struct OpNode {
    enum class Kind { Leaf, Add, Mul, Scale, Adjoint } kind = Kind::Leaf;
    SparseOperator leaf;
    cplx scale = 1.0;
    std::vector<OpNode> children;

    static OpNode of(SparseOperator op) { return {Kind::Leaf, std::move(op), 1.0, {}}; }
    static OpNode add(std::vector<OpNode> c) { return {Kind::Add, {}, 1.0, std::move(c)}; }
    static OpNode mul(std::vector<OpNode> c) { return {Kind::Mul, {}, 1.0, std::move(c)}; }
    static OpNode scaled(cplx s, OpNode c) { return {Kind::Scale, {}, s, {std::move(c)}}; }
    static OpNode adj(OpNode c) { return {Kind::Adjoint, {}, 1.0, {std::move(c)}}; }
};

inline SparseOperator compose(const OpNode &node) {
    switch (node.kind) {
    case OpNode::Kind::Leaf:
        return node.leaf;
    case OpNode::Kind::Scale:
        return node.scale * compose(node.children.at(0));
    case OpNode::Kind::Adjoint:
        return compose(node.children.at(0)).adjoint();
    case OpNode::Kind::Add:
    case OpNode::Kind::Mul: {
        if (node.children.empty()) throw Error("empty sum/product in operator expression");
        SparseOperator acc = compose(node.children[0]);
        for (std::size_t i = 1; i < node.children.size(); ++i)
            acc = node.kind == OpNode::Kind::Add ? acc + compose(node.children[i]) : acc * compose(node.children[i]);
        return acc;
    }
    }
    throw Error("bad operator node");
}

namespace detail {
inline void warn_unnormalized(double norm) {
    if (std::abs(norm - 1.0) > 1e-6) std::fprintf(stderr, "mzsim: warning: expectation on state with norm %.12g\n", norm);
}

inline cplx checked_expectation(cplx value, bool hermitian) {
    if (hermitian && std::abs(value.imag()) > 1e-9 * (1.0 + std::abs(value.real())))
        throw Error("expectation of Hermitian operator has imaginary part " + std::to_string(value.imag()));
    return value;
}
} // namespace detail

/// <psi|O|psi>. Hermitian-tagged operators must give a real value.
inline cplx expectation(const SparseOperator &op, const StateVector &psi) {
    op.check_state(psi);
    detail::warn_unnormalized(psi.norm());
    const auto &m = op.csr();
    const auto &x = psi.amplitudes();
    cplx s = 0;
    for (std::size_t r = 0; r < m.rows; ++r) {
        cplx row = 0;
        for (std::size_t j = m.row_ptr[r]; j < m.row_ptr[r + 1]; ++j) row += m.val[j] * x[m.col[j]];
        s += std::conj(x[static_cast<Eigen::Index>(r)]) * row;
    }
    return detail::checked_expectation(s, op.hermitian_hint() == true);
}

} // namespace mzsim
