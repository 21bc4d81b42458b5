#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mzsim {

/// Raised for every contract violation in the library (bad labels, shape
/// mismatches, tolerance failures). Carries a human-readable message only.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class SubsystemKind { Boson, TwoLevel };

/// One tensor factor of a composite space. A boson with cutoff N keeps Fock
/// states |0>..|N>; a two-level system keeps |g> (index 0) and |e> (index 1).
struct SubsystemSpec {
    std::string label;
    SubsystemKind kind = SubsystemKind::Boson;
    int cutoff = 1;

    static SubsystemSpec boson(std::string label, int cutoff) {
        return {std::move(label), SubsystemKind::Boson, cutoff};
    }
    static SubsystemSpec two_level(std::string label) {
        return {std::move(label), SubsystemKind::TwoLevel, 1};
    }

    std::size_t local_dim() const { return static_cast<std::size_t>(cutoff) + 1; }
    bool is_boson() const { return kind == SubsystemKind::Boson; }

    friend bool operator==(const SubsystemSpec &, const SubsystemSpec &) = default;
};

/// Ordered tensor product of subsystems. Basis indices are row-major with the
/// last listed subsystem varying fastest.
class SpaceSpec {
  public:
    SpaceSpec() = default;

    explicit SpaceSpec(std::vector<SubsystemSpec> subsystems) : subsystems_(std::move(subsystems)) {
        if (subsystems_.empty()) throw Error("space must contain at least one subsystem");
        for (std::size_t i = 0; i < subsystems_.size(); ++i) {
            const auto &s = subsystems_[i];
            if (s.label.empty()) throw Error("subsystem label must be nonempty");
            if (s.kind == SubsystemKind::Boson && s.cutoff < 1)
                throw Error("boson '" + s.label + "' has cutoff " + std::to_string(s.cutoff) + " (must be >= 1)");
            if (s.kind == SubsystemKind::TwoLevel) subsystems_[i].cutoff = 1;
            for (std::size_t j = 0; j < i; ++j)
                if (subsystems_[j].label == s.label) throw Error("duplicate subsystem label '" + s.label + "'");
        }
        strides_.assign(subsystems_.size(), 1);
        std::size_t total = 1;
        for (std::size_t k = subsystems_.size(); k-- > 0;) {
            strides_[k] = total;
            const std::size_t d = subsystems_[k].local_dim();
            if (total > std::numeric_limits<std::size_t>::max() / d) throw Error("total dimension overflows");
            total *= d;
        }
        total_dim_ = total;
        fingerprint_ = compute_fingerprint();
    }

    std::size_t size() const { return subsystems_.size(); }
    std::size_t total_dim() const { return total_dim_; }
    const std::vector<SubsystemSpec> &subsystems() const { return subsystems_; }
    const SubsystemSpec &operator[](std::size_t k) const { return subsystems_[k]; }
    std::size_t stride(std::size_t k) const { return strides_[k]; }
    std::size_t local_dim(std::size_t k) const { return subsystems_[k].local_dim(); }
    std::uint64_t fingerprint() const { return fingerprint_; }

    std::optional<std::size_t> find(std::string_view label) const {
        for (std::size_t k = 0; k < subsystems_.size(); ++k)
            if (subsystems_[k].label == label) return k;
        return std::nullopt;
    }

    std::size_t index_of(std::string_view label) const {
        if (auto k = find(label)) return *k;
        throw Error("unknown subsystem label '" + std::string(label) + "'");
    }

    std::vector<std::string> labels() const {
        std::vector<std::string> out;
        out.reserve(subsystems_.size());
        for (const auto &s : subsystems_) out.push_back(s.label);
        return out;
    }

    std::size_t basis_index(std::span<const int> occupations) const {
        if (occupations.size() != subsystems_.size())
            throw Error("expected " + std::to_string(subsystems_.size()) + " occupations, got " +
                        std::to_string(occupations.size()));
        std::size_t idx = 0;
        for (std::size_t k = 0; k < subsystems_.size(); ++k) {
            const int n = occupations[k];
            if (n < 0 || static_cast<std::size_t>(n) >= local_dim(k))
                throw Error("occupation " + std::to_string(n) + " out of range for '" + subsystems_[k].label + "'");
            idx += static_cast<std::size_t>(n) * strides_[k];
        }
        return idx;
    }

    std::vector<int> basis_unindex(std::size_t index) const {
        if (index >= total_dim_) throw Error("basis index out of range");
        std::vector<int> occ(subsystems_.size());
        for (std::size_t k = 0; k < subsystems_.size(); ++k) {
            occ[k] = static_cast<int>(index / strides_[k]);
            index %= strides_[k];
        }
        return occ;
    }

    /// Local occupation of subsystem k in basis state `index`.
    int occupation(std::size_t index, std::size_t k) const {
        return static_cast<int>((index / strides_[k]) % local_dim(k));
    }

    /// Sub-space formed by the contiguous subsystem range [first, last).
    SpaceSpec slice(std::size_t first, std::size_t last) const {
        if (first >= last || last > subsystems_.size()) throw Error("invalid subsystem slice");
        return SpaceSpec(std::vector<SubsystemSpec>(subsystems_.begin() + static_cast<std::ptrdiff_t>(first),
                                                    subsystems_.begin() + static_cast<std::ptrdiff_t>(last)));
    }

    friend bool operator==(const SpaceSpec &a, const SpaceSpec &b) { return a.subsystems_ == b.subsystems_; }

  private:
    std::uint64_t compute_fingerprint() const {
        // FNV-1a over labels, kinds and cutoffs.
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](unsigned char c) {
            h ^= c;
            h *= 1099511628211ull;
        };
        for (const auto &s : subsystems_) {
            for (char c : s.label) mix(static_cast<unsigned char>(c));
            mix(0);
            mix(static_cast<unsigned char>(s.kind));
            for (int b = 0; b < 4; ++b) mix(static_cast<unsigned char>((s.cutoff >> (8 * b)) & 0xff));
        }
        return h;
    }

    std::vector<SubsystemSpec> subsystems_;
    std::vector<std::size_t> strides_;
    std::size_t total_dim_ = 0;
    std::uint64_t fingerprint_ = 0;
};

inline SpaceSpec build_space(std::vector<SubsystemSpec> spec) { return SpaceSpec(std::move(spec)); }

/// Split of a space's subsystems into a kept group and its traced complement.
/// Both lists hold subsystem positions in space order.
struct Partition {
    std::vector<std::size_t> kept;
    std::vector<std::size_t> traced;
    std::vector<std::string> kept_labels;
    std::vector<std::string> traced_labels;
};

inline Partition partition(const SpaceSpec &space, std::span<const std::string> kept) {
    if (kept.empty()) throw Error("partition needs at least one kept subsystem");
    std::vector<bool> keep(space.size(), false);
    for (const auto &label : kept) {
        const std::size_t k = space.index_of(label);
        if (keep[k]) throw Error("subsystem '" + label + "' listed twice in partition");
        keep[k] = true;
    }
    Partition p;
    for (std::size_t k = 0; k < space.size(); ++k) {
        if (keep[k]) {
            p.kept.push_back(k);
            p.kept_labels.push_back(space[k].label);
        } else {
            p.traced.push_back(k);
            p.traced_labels.push_back(space[k].label);
        }
    }
    return p;
}

inline Partition partition(const SpaceSpec &space, std::initializer_list<std::string> kept) {
    std::vector<std::string> v(kept);
    return partition(space, std::span<const std::string>(v));
}

} // namespace mzsim
