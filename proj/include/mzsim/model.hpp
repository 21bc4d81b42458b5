#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mzsim/kron.hpp"
#include "mzsim/terms.hpp"

namespace mzsim {

/// Couplings of one electron-phonon medium. Energies in units of the phonon
/// frequency, hbar = 1.
struct MatterParams {
    double omega = 1.0;    // phonon frequency
    double mu = 0.5;       // bare dipole strength
    double tau = 0.1;      // phonon-modulated dipole strength
    double nu = 1.0;       // electron-phonon coupling (not fixed by the model source)
    double epsilon = 27.0; // electronic gap

    friend bool operator==(const MatterParams &, const MatterParams &) = default;
};

struct ModelParams {
    double Omega1 = 13.5; // pump
    double Omega2 = 12.5; // idler
    double Omega3 = 1.0;  // signal
    MatterParams matter;
    /// Optional per-site replacements keyed by site name ("A", "B").
    std::map<std::string, MatterParams> site_overrides;

    const MatterParams &site(const std::string &name) const {
        auto it = site_overrides.find(name);
        return it == site_overrides.end() ? matter : it->second;
    }

    void validate() const {
        auto check = [](const MatterParams &m, const std::string &where) {
            if (!(m.omega > 0)) throw Error(where + ": omega must be > 0");
            if (m.epsilon < 0) throw Error(where + ": epsilon must be >= 0");
        };
        if (Omega1 < 0 || Omega2 < 0 || Omega3 < 0) throw Error("photon frequencies must be >= 0");
        check(matter, "model");
        for (const auto &[k, m] : site_overrides) check(m, "site " + k);
    }
};

enum class Topology { SingleSite, C1, C2 };

inline std::string to_string(Topology t) {
    switch (t) {
    case Topology::SingleSite:
        return "single";
    case Topology::C1:
        return "C1";
    case Topology::C2:
        return "C2";
    }
    return "?";
}

inline Topology topology_from_string(const std::string &s) {
    if (s == "single" || s == "single_site") return Topology::SingleSite;
    if (s == "C1" || s == "c1") return Topology::C1;
    if (s == "C2" || s == "c2") return Topology::C2;
    throw Error("unknown topology '" + s + "' (expected single, C1 or C2)");
}

/// Subsystem labels of one medium and the photon modes it couples to.
struct SiteLabels {
    std::string name; // "A", "B", or "" for a single site
    std::string pump, idler, signal, phonon, electron;
};

struct Cutoffs {
    int pump = 12;
    int idler = 4;
    int signal = 4;
    int phonon = 6;

    friend bool operator==(const Cutoffs &, const Cutoffs &) = default;
};

/// Subsystem ordering for a topology. Photon modes come first, matter last,
/// so `split` separates them for the Kronecker operator.
struct SiteLayout {
    Topology topology = Topology::C1;
    std::vector<SiteLabels> sites;
    std::vector<std::string> signal_modes; // each gets one Omega3 n term
    SpaceSpec space;
    std::size_t split = 0; // number of photon subsystems

    /// DSL identifier -> subsystem label.
    std::map<std::string, std::string> symbols() const {
        std::map<std::string, std::string> s;
        for (const auto &site : sites) {
            const std::string sfx = site.name;
            const std::string us = site.name.empty() ? "" : "_" + site.name;
            s["c1" + sfx] = site.pump;
            s["c2" + sfx] = site.idler;
            s["a" + us] = site.phonon;
            s["sx" + us] = site.electron;
            s["sy" + us] = site.electron;
            s["sz" + us] = site.electron;
            if (topology != Topology::C1) s["c3" + sfx] = site.signal;
        }
        if (topology == Topology::C1) s["c3"] = "signal";
        for (const auto &label : space.labels()) s[label] = label;
        return s;
    }

    const SiteLabels &site(const std::string &name) const {
        for (const auto &s : sites)
            if (s.name == name) return s;
        throw Error("layout has no site '" + name + "'");
    }
};

inline SiteLayout make_layout(Topology topology, const Cutoffs &cut) {
    SiteLayout L;
    L.topology = topology;
    std::vector<SubsystemSpec> photons, matter;
    if (topology == Topology::SingleSite) {
        L.sites.push_back({"", "pump", "idler", "signal", "phonon", "electron"});
        photons = {SubsystemSpec::boson("pump", cut.pump), SubsystemSpec::boson("idler", cut.idler),
                   SubsystemSpec::boson("signal", cut.signal)};
        matter = {SubsystemSpec::boson("phonon", cut.phonon), SubsystemSpec::two_level("electron")};
        L.signal_modes = {"signal"};
    } else {
        const bool shared = topology == Topology::C1;
        for (const std::string n : {"A", "B"})
            L.sites.push_back({n, "pump_" + n, "idler_" + n, shared ? "signal" : "signal_" + n, "phonon_" + n, "electron_" + n});
        photons = {SubsystemSpec::boson("pump_A", cut.pump), SubsystemSpec::boson("pump_B", cut.pump),
                   SubsystemSpec::boson("idler_A", cut.idler), SubsystemSpec::boson("idler_B", cut.idler)};
        if (shared) {
            photons.push_back(SubsystemSpec::boson("signal", cut.signal));
            L.signal_modes = {"signal"};
        } else {
            photons.push_back(SubsystemSpec::boson("signal_A", cut.signal));
            photons.push_back(SubsystemSpec::boson("signal_B", cut.signal));
            L.signal_modes = {"signal_A", "signal_B"};
        }
        matter = {SubsystemSpec::boson("phonon_A", cut.phonon), SubsystemSpec::boson("phonon_B", cut.phonon),
                  SubsystemSpec::two_level("electron_A"), SubsystemSpec::two_level("electron_B")};
    }
    L.split = photons.size();
    photons.insert(photons.end(), matter.begin(), matter.end());
    L.space = SpaceSpec(std::move(photons));
    return L;
}

namespace detail {

inline void require_boson(const SpaceSpec &space, const std::string &label) {
    const auto k = space.find(label);
    if (!k) throw Error("space is missing subsystem '" + label + "'");
    if (!space[*k].is_boson()) throw Error("'" + label + "' must be a boson mode");
}

inline void require_two_level(const SpaceSpec &space, const std::string &label) {
    const auto k = space.find(label);
    if (!k) throw Error("space is missing subsystem '" + label + "'");
    if (space[*k].kind != SubsystemKind::TwoLevel) throw Error("'" + label + "' must be a two-level system");
}

inline LocalFactor factor(const SpaceSpec &space, const std::string &label, const std::string &what) {
    const std::size_t k = space.index_of(label);
    const int N = space[k].cutoff;
    DenseMatrix m;
    if (what == "n")
        m = local::number(N);
    else if (what == "X")
        m = local::quadrature(N);
    else if (what == "a")
        m = local::annihilation(N);
    else if (what == "n_e")
        m = local::excited_projector();
    else if (what.size() == 2 && what[0] == 's')
        m = local::pauli(what[1]);
    else
        throw Error("unknown factor kind " + what);
    return {k, std::move(m), what};
}

} // namespace detail

/// Per-site terms of the single-medium Hamiltonian without the signal free
/// energy: Omega1 n1 + Omega2 n2 + omega n_a + n_e (nu X_a + eps) + M * sum_i (c_i + c_i^dag),
/// with M = (mu + tau X_a) sx + tau X_a. No rotating-wave approximation.
inline void add_site_terms(TermSum &h, const SiteLabels &s, const ModelParams &p) {
    const SpaceSpec &sp = h.space();
    for (const auto &l : {s.pump, s.idler, s.signal, s.phonon}) detail::require_boson(sp, l);
    detail::require_two_level(sp, s.electron);
    const MatterParams &m = p.site(s.name);
    using detail::factor;

    h.add(p.Omega1, {factor(sp, s.pump, "n")});
    h.add(p.Omega2, {factor(sp, s.idler, "n")});
    h.add(m.omega, {factor(sp, s.phonon, "n")});
    h.add(m.nu, {factor(sp, s.electron, "n_e"), factor(sp, s.phonon, "X")});
    h.add(m.epsilon, {factor(sp, s.electron, "n_e")});
    for (const auto &mode : {s.pump, s.idler, s.signal}) {
        const LocalFactor q = factor(sp, mode, "X");
        h.add(m.mu, {factor(sp, s.electron, "sx"), q});
        h.add(m.tau, {factor(sp, s.phonon, "X"), factor(sp, s.electron, "sx"), q});
        h.add(m.tau, {factor(sp, s.phonon, "X"), q});
    }
}

/// Full Hamiltonian of a layout as a term sum (C1: shared signal mode).
inline TermSum hamiltonian_terms(const SiteLayout &layout, const ModelParams &p) {
    p.validate();
    TermSum h(layout.space);
    for (const auto &sig : layout.signal_modes) h.add(p.Omega3, {detail::factor(layout.space, sig, "n")});
    for (const auto &s : layout.sites) add_site_terms(h, s, p);
    return h;
}

namespace detail {
inline SparseOperator checked_hermitian(const TermSum &h) {
    SparseOperator op = h.to_sparse(true);
    const double err = op.hermiticity_error();
    if (err > kHermitianTol) throw Error("assembled Hamiltonian is not Hermitian (deviation " + std::to_string(err) + ")");
    return op;
}
} // namespace detail

/// Single-medium Hamiltonian on an arbitrary space holding the given labels.
inline SparseOperator build_h0(const SpaceSpec &space, const ModelParams &p, const SiteLabels &labels) {
    p.validate();
    TermSum h(space);
    h.add(p.Omega3, {detail::factor(space, labels.signal, "n")});
    add_site_terms(h, labels, p);
    return detail::checked_hermitian(h);
}

inline SparseOperator build_h1(const SiteLayout &layout, const ModelParams &p) {
    if (layout.topology != Topology::C1) throw Error("build_h1 needs the C1 layout");
    return detail::checked_hermitian(hamiltonian_terms(layout, p));
}

inline SparseOperator build_h2(const SiteLayout &layout, const ModelParams &p) {
    if (layout.topology != Topology::C2) throw Error("build_h2 needs the C2 layout");
    return detail::checked_hermitian(hamiltonian_terms(layout, p));
}

/// Matrix-free form of the layout Hamiltonian for large spaces.
inline KronOperator build_structured(const SiteLayout &layout, const ModelParams &p) {
    return KronOperator(hamiltonian_terms(layout, p), layout.split, true);
}

/// Single-site layout for medium `site` of a C2 interferometer. C2 is a sum of
/// two commuting single-site Hamiltonians, so product inputs can be evolved per site.
inline SiteLayout make_c2_site_layout(const std::string &site, const Cutoffs &cut) {
    SiteLayout L;
    L.topology = Topology::SingleSite;
    const std::string n = site;
    L.sites.push_back({n, "pump_" + n, "idler_" + n, "signal_" + n, "phonon_" + n, "electron_" + n});
    L.space = SpaceSpec({SubsystemSpec::boson("pump_" + n, cut.pump), SubsystemSpec::boson("idler_" + n, cut.idler),
                         SubsystemSpec::boson("signal_" + n, cut.signal), SubsystemSpec::boson("phonon_" + n, cut.phonon),
                         SubsystemSpec::two_level("electron_" + n)});
    L.signal_modes = {"signal_" + n};
    L.split = 3;
    return L;
}

} // namespace mzsim
