#pragma once

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "mzsim/opalg.hpp"

namespace mzsim {

/// One local matrix acting on a single subsystem.
struct LocalFactor {
    std::size_t subsystem = 0;
    DenseMatrix matrix;
    std::string name; // diagnostic only
};

/// coeff * (product of local factors on distinct subsystems). Factors are kept
/// sorted by subsystem; factors on different subsystems commute.
struct ProductTerm {
    cplx coeff = 1.0;
    std::vector<LocalFactor> factors;
};

/// Sum of product terms over a fixed space. This is the common source from
/// which both the CSR operator and the matrix-free Kronecker operator are built.
class TermSum {
  public:
    TermSum() = default;
    explicit TermSum(SpaceSpec space) : space_(std::move(space)) {}

    const SpaceSpec &space() const { return space_; }
    const std::vector<ProductTerm> &terms() const { return terms_; }
    bool empty() const { return terms_.empty(); }

    /// Adds coeff * f_1 * f_2 * ... (operator order preserved). Factors on the
    /// same subsystem are multiplied in the given order.
    TermSum &add(cplx coeff, const std::vector<LocalFactor> &ordered_factors) {
        std::map<std::size_t, LocalFactor> merged;
        for (const auto &f : ordered_factors) {
            if (f.subsystem >= space_.size()) throw Error("factor refers to a subsystem outside the space");
            if (static_cast<std::size_t>(f.matrix.rows()) != space_.local_dim(f.subsystem))
                throw Error("factor dimension mismatch on '" + space_[f.subsystem].label + "'");
            auto it = merged.find(f.subsystem);
            if (it == merged.end()) {
                merged.emplace(f.subsystem, f);
            } else {
                it->second.matrix = it->second.matrix * f.matrix;
                it->second.name += " " + f.name;
            }
        }
        ProductTerm t;
        t.coeff = coeff;
        for (auto &[k, f] : merged) t.factors.push_back(std::move(f));
        if (coeff != cplx(0)) terms_.push_back(std::move(t));
        return *this;
    }

    /// Term-by-term listing, one line per product term.
    std::string describe() const {
        std::string out;
        for (const auto &t : terms_) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "(%.10g%+.10gi)", t.coeff.real(), t.coeff.imag());
            out += buf;
            for (const auto &f : t.factors)
                out += " [" + space_[f.subsystem].label + ": " + (f.name.empty() ? "matrix" : f.name) + "]";
            out += '\n';
        }
        return out;
    }

    TermSum &append(const TermSum &other, cplx scale = 1.0) {
        if (!(other.space_ == space_)) throw Error("cannot add term sums over different spaces");
        for (auto t : other.terms_) {
            t.coeff *= scale;
            if (t.coeff != cplx(0)) terms_.push_back(std::move(t));
        }
        return *this;
    }

    /// Product of two term sums (this * other), distributing over terms.
    TermSum times(const TermSum &other) const {
        if (!(other.space_ == space_)) throw Error("cannot multiply term sums over different spaces");
        TermSum out(space_);
        for (const auto &a : terms_)
            for (const auto &b : other.terms_) {
                std::vector<LocalFactor> fs = a.factors;
                fs.insert(fs.end(), b.factors.begin(), b.factors.end());
                out.add(a.coeff * b.coeff, fs);
            }
        return out;
    }

    TermSum adjoint() const {
        TermSum out(space_);
        for (const auto &t : terms_) {
            ProductTerm a;
            a.coeff = std::conj(t.coeff);
            for (const auto &f : t.factors) a.factors.push_back({f.subsystem, f.matrix.adjoint(), f.name + "'"});
            out.terms_.push_back(std::move(a));
        }
        return out;
    }

    /// Assembles the full CSR matrix. Row entries are accumulated term by term.
    SparseOperator to_sparse(std::optional<bool> hermitian_hint = std::nullopt) const {
        const std::size_t dim = space_.total_dim();
        struct Prepared {
            cplx coeff;
            std::vector<std::size_t> subsystem;
            std::vector<Csr<cplx>> local;
        };
        std::vector<Prepared> prepared;
        for (const auto &t : terms_) {
            Prepared p{t.coeff, {}, {}};
            for (const auto &f : t.factors) {
                p.subsystem.push_back(f.subsystem);
                p.local.push_back(local::from_dense(f.matrix));
            }
            prepared.push_back(std::move(p));
        }
        Csr<cplx> out;
        out.rows = out.cols = dim;
        out.row_ptr.reserve(dim + 1);
        detail::RowAccumulator<cplx> acc(dim);
        std::vector<std::size_t> cursor;
        for (std::size_t row = 0; row < dim; ++row) {
            for (const auto &p : prepared) {
                const std::size_t nf = p.local.size();
                // Enumerate all combinations of nonzeros in the involved local rows.
                std::size_t base = row;
                std::vector<std::size_t> lrow(nf);
                bool empty = false;
                for (std::size_t f = 0; f < nf; ++f) {
                    lrow[f] = static_cast<std::size_t>(space_.occupation(row, p.subsystem[f]));
                    base -= lrow[f] * space_.stride(p.subsystem[f]);
                    if (p.local[f].row_ptr[lrow[f]] == p.local[f].row_ptr[lrow[f] + 1]) empty = true;
                }
                if (empty) continue;
                cursor.assign(nf, 0);
                for (std::size_t f = 0; f < nf; ++f) cursor[f] = p.local[f].row_ptr[lrow[f]];
                while (true) {
                    cplx v = p.coeff;
                    std::size_t col = base;
                    for (std::size_t f = 0; f < nf; ++f) {
                        v *= p.local[f].val[cursor[f]];
                        col += p.local[f].col[cursor[f]] * space_.stride(p.subsystem[f]);
                    }
                    acc.add(col, v);
                    bool done = true;
                    for (std::size_t f = nf; f-- > 0;) {
                        if (++cursor[f] < p.local[f].row_ptr[lrow[f] + 1]) {
                            done = false;
                            break;
                        }
                        cursor[f] = p.local[f].row_ptr[lrow[f]];
                    }
                    if (done) break;
                }
            }
            acc.flush(out);
        }
        return {space_.fingerprint(), std::move(out), hermitian_hint};
    }

  private:
    SpaceSpec space_;
    std::vector<ProductTerm> terms_;
};

/// Shorthand local matrices keyed by subsystem kind.
namespace local {
inline DenseMatrix creation(int cutoff) { return annihilation(cutoff).adjoint(); }
inline DenseMatrix quadrature(int cutoff) { return annihilation(cutoff) + creation(cutoff); }
inline DenseMatrix excited_projector() {
    DenseMatrix m = DenseMatrix::Zero(2, 2);
    m(1, 1) = 1.0;
    return m;
}
} // namespace local

} // namespace mzsim
