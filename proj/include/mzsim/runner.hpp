#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include "mzsim/entangle.hpp"
#include "mzsim/observables.hpp"
#include "mzsim/propagate.hpp"
#include "mzsim/states.hpp"

namespace mzsim::runner {

using json = nlohmann::json;

/// Schema violation, carrying a file:line:column prefix.
struct ConfigError : Error {
    using Error::Error;
};

struct BudgetError : Error {
    using Error::Error;
};

enum class ObsKind { Occupation, Bs2, MutualInfo, Expr };

struct ObservableSpec {
    std::string name;
    ObsKind kind = ObsKind::Occupation;
    std::string label;                 // occupation
    double phase = 0;                  // bs2
    bool port_b = false;               // bs2: complementary output port
    std::vector<std::string> group_a;  // mutual information
    std::vector<std::string> group_b;
    std::string expr;                  // operator expression or preset name
    int stride = 1;
};

enum class C2Mode { Auto, Joint, Factorized };

inline std::string to_string(C2Mode m) {
    switch (m) {
    case C2Mode::Joint: return "joint";
    case C2Mode::Factorized: return "factorized";
    default: return "auto";
    }
}

struct Scenario {
    std::string name = "scenario";
    Topology topology = Topology::C1;
    ModelParams params;
    Cutoffs cutoffs;
    double alpha2 = 8.0;   // mean pump photon number entering BS1
    double tail_bound = 1e-3;
    PropagatorConfig prop;
    std::vector<ObservableSpec> observables;
    C2Mode c2_mode = C2Mode::Auto;
    double mem_budget_gib = 4.0;
    EntropyUnit unit = EntropyUnit::Nats;
    int im_stride = 10;
    std::size_t factorize_above = 2'000'000; // C2 auto mode: joint dimension limit
};

// ---------------------------------------------------------------- defaults

inline ObservableSpec occ(const std::string &name, const std::string &label) {
    ObservableSpec o;
    o.name = name;
    o.kind = ObsKind::Occupation;
    o.label = label;
    return o;
}

inline ObservableSpec im(const std::string &name, std::vector<std::string> a, std::vector<std::string> b, int stride) {
    ObservableSpec o;
    o.name = name;
    o.kind = ObsKind::MutualInfo;
    o.group_a = std::move(a);
    o.group_b = std::move(b);
    o.stride = stride;
    return o;
}

inline ObservableSpec bs2(const std::string &name, double phase) {
    ObservableSpec o;
    o.name = name;
    o.kind = ObsKind::Bs2;
    o.phase = phase;
    return o;
}

inline ObservableSpec expr_obs(const std::string &name, const std::string &expr) {
    ObservableSpec o;
    o.name = name;
    o.kind = ObsKind::Expr;
    o.expr = expr;
    return o;
}

inline std::vector<ObservableSpec> default_observables(Topology t, int im_stride) {
    std::vector<ObservableSpec> v;
    if (t == Topology::SingleSite) {
        v = {occ("N1", "pump"), occ("N2", "idler"), occ("N3", "signal"),
             im("IM_signal_idler", {"signal"}, {"idler"}, im_stride)};
        return v;
    }
    v = {occ("N1A", "pump_A"), occ("N1B", "pump_B"), occ("N2A", "idler_A"), occ("N2B", "idler_B")};
    if (t == Topology::C1) {
        v.push_back(occ("N3", "signal"));
        v.push_back(im("IM_signal_idlerA", {"signal"}, {"idler_A"}, im_stride));
        v.push_back(im("IM_signal_idlerB", {"signal"}, {"idler_B"}, im_stride));
        v.push_back(im("IM_idlerA_idlerB", {"idler_A"}, {"idler_B"}, im_stride));
        v.push_back(bs2("NBS2", 0.0));
        for (const auto &[n, e] : presets::composite()) v.push_back(expr_obs(n, n));
    } else {
        v.push_back(occ("N3A", "signal_A"));
        v.push_back(occ("N3B", "signal_B"));
        v.push_back(im("IM_signalA_idlerA", {"signal_A"}, {"idler_A"}, im_stride));
        v.push_back(im("IM_signalB_idlerB", {"signal_B"}, {"idler_B"}, im_stride));
        v.push_back(im("IM_idlerA_idlerB", {"idler_A"}, {"idler_B"}, im_stride));
        v.push_back(im("IM_signalA_idlerB", {"signal_A"}, {"idler_B"}, im_stride));
        v.push_back(bs2("NBS2", 0.0));
    }
    return v;
}

// ---------------------------------------------------------------- parsing

namespace detail {

inline std::string where(const std::string &source, const YAML::Mark &m) {
    if (m.line < 0) return source + ": ";
    return source + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1) + ": ";
}

class Reader {
  public:
    explicit Reader(std::string source) : source_(std::move(source)) {}

    [[noreturn]] void fail(const YAML::Node &n, const std::string &msg) const { throw ConfigError(where(source_, n.Mark()) + msg); }

    void require_map(const YAML::Node &n, const std::string &what) const {
        if (!n.IsMap()) fail(n, what + " must be a mapping");
    }

    /// Rejects keys outside `allowed`.
    void check_keys(const YAML::Node &n, const std::set<std::string> &allowed, const std::string &what) const {
        for (const auto &kv : n) {
            const auto key = kv.first.as<std::string>();
            if (!allowed.count(key)) {
                std::string list;
                for (const auto &a : allowed) list += (list.empty() ? "" : ", ") + a;
                fail(kv.first, "unknown key '" + key + "' in " + what + " (allowed: " + list + ")");
            }
        }
    }

    template <class T> T as(const YAML::Node &n, const std::string &key) const {
        try {
            return n.as<T>();
        } catch (const YAML::BadConversion &) {
            fail(n, "'" + key + "' has the wrong type");
        }
    }

    template <class T> void get(const YAML::Node &parent, const std::string &key, T &out) const {
        const YAML::Node n = parent[key];
        if (n) out = as<T>(n, key);
    }

    double positive(const YAML::Node &parent, const std::string &key, double current) const {
        const YAML::Node n = parent[key];
        if (!n) return current;
        const double v = as<double>(n, key);
        if (!(v > 0) || !std::isfinite(v)) fail(n, "'" + key + "' must be > 0");
        return v;
    }

    double finite(const YAML::Node &parent, const std::string &key, double current) const {
        const YAML::Node n = parent[key];
        if (!n) return current;
        const double v = as<double>(n, key);
        if (!std::isfinite(v)) fail(n, "'" + key + "' must be finite");
        return v;
    }

    const std::string &source() const { return source_; }

  private:
    std::string source_;
};

inline void read_matter(const Reader &r, const YAML::Node &n, MatterParams &m, bool allow_sites, ModelParams *p) {
    std::set<std::string> keys = {"omega", "mu", "tau", "nu", "epsilon"};
    if (allow_sites) keys.insert({"Omega1", "Omega2", "Omega3", "sites"});
    r.require_map(n, "params");
    r.check_keys(n, keys, "params");
    m.omega = r.positive(n, "omega", m.omega);
    m.mu = r.finite(n, "mu", m.mu);
    m.tau = r.finite(n, "tau", m.tau);
    m.nu = r.finite(n, "nu", m.nu);
    m.epsilon = r.finite(n, "epsilon", m.epsilon);
    if (!allow_sites) return;
    p->Omega1 = r.positive(n, "Omega1", p->Omega1);
    p->Omega2 = r.positive(n, "Omega2", p->Omega2);
    p->Omega3 = r.positive(n, "Omega3", p->Omega3);
    if (const auto sites = n["sites"]) {
        r.require_map(sites, "params.sites");
        for (const auto &kv : sites) {
            const auto site = kv.first.as<std::string>();
            if (site != "A" && site != "B") r.fail(kv.first, "site overrides are keyed A or B, got '" + site + "'");
            MatterParams sm = m;
            read_matter(r, kv.second, sm, false, nullptr);
            p->site_overrides[site] = sm;
        }
    }
}

inline std::vector<std::string> read_group(const Reader &r, const YAML::Node &n, const std::string &key) {
    if (n.IsScalar()) return {r.as<std::string>(n, key)};
    if (!n.IsSequence() || n.size() == 0) r.fail(n, "'" + key + "' must be a label or a nonempty list of labels");
    std::vector<std::string> g;
    for (const auto &x : n) g.push_back(r.as<std::string>(x, key));
    return g;
}

inline ObservableSpec read_observable(const Reader &r, const YAML::Node &n, int im_stride) {
    r.require_map(n, "observable");
    r.check_keys(n, {"name", "occupation", "bs2_output", "port", "im", "expr", "preset", "stride"}, "observable");
    ObservableSpec o;
    if (!n["name"]) r.fail(n, "observable needs a 'name'");
    o.name = r.as<std::string>(n["name"], "name");
    if (o.name.empty() || o.name.find_first_of(",\n\"") != std::string::npos)
        r.fail(n["name"], "observable name must be nonempty without commas or quotes");
    int kinds = 0;
    if (const auto x = n["occupation"]) {
        ++kinds;
        o.kind = ObsKind::Occupation;
        o.label = r.as<std::string>(x, "occupation");
    }
    if (const auto x = n["bs2_output"]) {
        ++kinds;
        o.kind = ObsKind::Bs2;
        if (x.IsMap()) {
            r.check_keys(x, {"phase"}, "bs2_output");
            o.phase = r.finite(x, "phase", 0.0);
        } else {
            o.phase = r.as<double>(x, "bs2_output");
        }
        if (!(o.phase >= 0 && o.phase < 2 * std::numbers::pi)) r.fail(x, "bs2 phase must lie in [0, 2pi)");
        if (const auto port = n["port"]) {
            const auto p = r.as<std::string>(port, "port");
            if (p != "A" && p != "B") r.fail(port, "port must be A or B");
            o.port_b = p == "B";
        }
    } else if (n["port"]) {
        r.fail(n["port"], "'port' only applies to bs2_output");
    }
    if (const auto x = n["im"]) {
        ++kinds;
        o.kind = ObsKind::MutualInfo;
        if (!x.IsSequence() || x.size() != 2) r.fail(x, "'im' takes two groups: [groupA, groupB]");
        o.group_a = read_group(r, x[0], "im");
        o.group_b = read_group(r, x[1], "im");
        o.stride = im_stride;
    }
    if (const auto x = n["expr"]) {
        ++kinds;
        o.kind = ObsKind::Expr;
        o.expr = r.as<std::string>(x, "expr");
        try {
            const auto e = dsl::parse(o.expr);
            if (!e.hermitian_conjugate) r.fail(x, "operator observables must end with '+ h.c.'");
        } catch (const dsl::SyntaxError &err) {
            r.fail(x, std::string("expression: ") + err.what());
        }
    }
    if (const auto x = n["preset"]) {
        ++kinds;
        o.kind = ObsKind::Expr;
        o.expr = r.as<std::string>(x, "preset");
        try {
            presets::composite(o.expr);
        } catch (const Error &err) {
            r.fail(x, err.what());
        }
    }
    if (kinds != 1) r.fail(n, "observable '" + o.name + "' needs exactly one of occupation, bs2_output, im, expr, preset");
    if (const auto x = n["stride"]) {
        o.stride = r.as<int>(x, "stride");
        if (o.stride < 1) r.fail(x, "stride must be >= 1");
    }
    return o;
}

} // namespace detail

/// Expression text of an observable (presets resolved).
inline std::string expression_text(const ObservableSpec &o) {
    for (const auto &[n, e] : presets::composite())
        if (n == o.expr) return e;
    return o.expr;
}

/// Labels of the joint layout a scenario runs on.
inline SiteLayout scenario_layout(const Scenario &s) { return make_layout(s.topology, s.cutoffs); }

/// Checks every referenced label and expression against the generated space.
inline void check_references(const Scenario &s, const std::function<std::string(std::size_t)> &where = {}) {
    const SiteLayout L = scenario_layout(s);
    const dsl::SymbolTable table = symbol_table(L);
    std::set<std::string> names;
    for (std::size_t i = 0; i < s.observables.size(); ++i) {
        const auto &o = s.observables[i];
        const std::string at = where ? where(i) : "observable '" + o.name + "': ";
        auto fail = [&](const std::string &m) { throw ConfigError(at + m); };
        if (!names.insert(o.name).second) fail("duplicate observable name '" + o.name + "'");
        auto boson = [&](const std::string &label) {
            const auto k = L.space.find(label);
            if (!k) fail("unknown subsystem '" + label + "'");
            if (!L.space[*k].is_boson()) fail("'" + label + "' is not a boson mode");
        };
        switch (o.kind) {
        case ObsKind::Occupation: boson(o.label); break;
        case ObsKind::Bs2:
            if (s.topology == Topology::SingleSite) fail("bs2_output needs idler_A and idler_B");
            break;
        case ObsKind::MutualInfo: {
            std::size_t kept = 1;
            std::set<std::string> seen;
            for (const auto *g : {&o.group_a, &o.group_b})
                for (const auto &l : *g) {
                    const auto k = L.space.find(l);
                    if (!k) fail("unknown subsystem '" + l + "'");
                    if (!seen.insert(l).second) fail("mutual information groups overlap on '" + l + "'");
                    kept *= L.space.local_dim(*k);
                }
            if (kept > kDefaultDensityGuard) fail("mutual information groups span dimension " + std::to_string(kept) + " > 4096");
            break;
        }
        case ObsKind::Expr:
            try {
                dsl::lower_terms(dsl::parse(expression_text(o)), L.space, table);
            } catch (const std::exception &e) {
                fail(e.what());
            }
            break;
        }
    }
}

inline Scenario parse_scenario(const YAML::Node &root, const std::string &source) {
    detail::Reader r(source);
    if (!root || !root.IsMap()) throw ConfigError(source + ": top level must be a mapping");
    r.check_keys(root, {"scenario", "topology", "alpha", "alpha2", "tail_bound", "params", "cutoffs", "propagator",
                        "observables", "c2_mode", "mem_budget_gib", "entropy_unit", "im_stride", "factorize_above"},
                 "scenario");
    Scenario s;
    r.get(root, "scenario", s.name);
    if (s.name.empty() || s.name.find_first_of("/\\ ") != std::string::npos)
        r.fail(root["scenario"], "scenario name must be nonempty without slashes or spaces");
    if (const auto t = root["topology"]) {
        try {
            s.topology = topology_from_string(r.as<std::string>(t, "topology"));
        } catch (const Error &e) {
            r.fail(t, e.what());
        }
    }
    if (root["alpha"] && root["alpha2"]) r.fail(root["alpha2"], "give either alpha or alpha2, not both");
    if (const auto a = root["alpha"]) {
        const double v = r.as<double>(a, "alpha");
        if (!(v >= 0) || !std::isfinite(v)) r.fail(a, "alpha must be >= 0");
        s.alpha2 = v * v;
    }
    if (const auto a = root["alpha2"]) {
        s.alpha2 = r.as<double>(a, "alpha2");
        if (!(s.alpha2 >= 0) || !std::isfinite(s.alpha2)) r.fail(a, "alpha2 must be >= 0");
    }
    s.tail_bound = r.positive(root, "tail_bound", s.tail_bound);
    if (const auto p = root["params"]) detail::read_matter(r, p, s.params.matter, true, &s.params);
    try {
        s.params.validate();
    } catch (const Error &e) {
        r.fail(root["params"] ? root["params"] : root, e.what());
    }
    if (const auto c = root["cutoffs"]) {
        r.require_map(c, "cutoffs");
        r.check_keys(c, {"pump", "idler", "signal", "phonon"}, "cutoffs");
        for (auto [key, ptr] : {std::pair{"pump", &s.cutoffs.pump}, {"idler", &s.cutoffs.idler},
                                {"signal", &s.cutoffs.signal}, {"phonon", &s.cutoffs.phonon}}) {
            if (const auto v = c[key]) {
                *ptr = r.as<int>(v, key);
                if (*ptr < 1) r.fail(v, std::string(key) + " cutoff must be >= 1");
            }
        }
    }
    if (const auto p = root["propagator"]) {
        r.require_map(p, "propagator");
        r.check_keys(p, {"dt_sample", "t_end", "krylov_dim", "step_tolerance", "max_substep", "full_reorthogonalization"},
                     "propagator");
        s.prop.dt_sample = r.positive(p, "dt_sample", s.prop.dt_sample);
        s.prop.t_end = r.positive(p, "t_end", s.prop.t_end);
        s.prop.step_tolerance = r.positive(p, "step_tolerance", s.prop.step_tolerance);
        r.get(p, "krylov_dim", s.prop.krylov_dim);
        r.get(p, "max_substep", s.prop.max_substep);
        r.get(p, "full_reorthogonalization", s.prop.full_reorthogonalization);
        try {
            s.prop.validate();
        } catch (const Error &e) {
            r.fail(p, e.what());
        }
    }
    if (const auto m = root["c2_mode"]) {
        const auto v = r.as<std::string>(m, "c2_mode");
        if (v == "auto")
            s.c2_mode = C2Mode::Auto;
        else if (v == "joint")
            s.c2_mode = C2Mode::Joint;
        else if (v == "factorized")
            s.c2_mode = C2Mode::Factorized;
        else
            r.fail(m, "c2_mode must be auto, joint or factorized");
    }
    s.mem_budget_gib = r.positive(root, "mem_budget_gib", s.mem_budget_gib);
    if (const auto u = root["entropy_unit"]) {
        const auto v = r.as<std::string>(u, "entropy_unit");
        if (v == "nats")
            s.unit = EntropyUnit::Nats;
        else if (v == "bits")
            s.unit = EntropyUnit::Bits;
        else
            r.fail(u, "entropy_unit must be nats or bits");
    }
    if (const auto x = root["im_stride"]) {
        s.im_stride = r.as<int>(x, "im_stride");
        if (s.im_stride < 1) r.fail(x, "im_stride must be >= 1");
    }
    if (const auto x = root["factorize_above"]) s.factorize_above = r.as<std::size_t>(x, "factorize_above");

    std::vector<YAML::Mark> marks;
    if (const auto obs = root["observables"]) {
        if (!obs.IsSequence()) r.fail(obs, "observables must be a list");
        for (const auto &o : obs) {
            s.observables.push_back(detail::read_observable(r, o, s.im_stride));
            marks.push_back(o.Mark());
        }
    } else {
        s.observables = default_observables(s.topology, s.im_stride);
    }
    check_references(s, [&](std::size_t i) {
        return i < marks.size() ? detail::where(source, marks[i]) : source + ": default observable '" + s.observables[i].name + "': ";
    });
    return s;
}

inline Scenario load_scenario(const std::string &path) {
    YAML::Node root;
    try {
        root = YAML::LoadFile(path);
    } catch (const YAML::BadFile &) {
        throw ConfigError(path + ": cannot open config file");
    } catch (const YAML::ParserException &e) {
        throw ConfigError(detail::where(path, e.mark) + e.msg);
    }
    return parse_scenario(root, path);
}

inline Scenario scenario_from_string(const std::string &text, const std::string &source = "<string>") {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException &e) {
        throw ConfigError(detail::where(source, e.mark) + e.msg);
    }
    return parse_scenario(root, source);
}

// ---------------------------------------------------------------- resolved config

inline json matter_json(const MatterParams &m) {
    return {{"omega", m.omega}, {"mu", m.mu}, {"tau", m.tau}, {"nu", m.nu}, {"epsilon", m.epsilon}};
}

inline json observable_json(const ObservableSpec &o) {
    json j{{"name", o.name}, {"stride", o.stride}};
    switch (o.kind) {
    case ObsKind::Occupation: j["occupation"] = o.label; break;
    case ObsKind::Bs2:
        j["bs2_output"] = {{"phase", o.phase}};
        j["port"] = o.port_b ? "B" : "A";
        break;
    case ObsKind::MutualInfo: j["im"] = {o.group_a, o.group_b}; break;
    case ObsKind::Expr: j["expr"] = expression_text(o); break;
    }
    return j;
}

/// Every setting that influences the output; enough to reproduce a run.
inline json resolved_config(const Scenario &s) {
    json params = matter_json(s.params.matter);
    params["Omega1"] = s.params.Omega1;
    params["Omega2"] = s.params.Omega2;
    params["Omega3"] = s.params.Omega3;
    json sites = json::object();
    for (const auto &[k, m] : s.params.site_overrides) sites[k] = matter_json(m);
    params["sites"] = sites;
    json obs = json::array();
    for (const auto &o : s.observables) obs.push_back(observable_json(o));
    return {{"scenario", s.name},
            {"topology", to_string(s.topology)},
            {"alpha2", s.alpha2},
            {"tail_bound", s.tail_bound},
            {"params", params},
            {"cutoffs", {{"pump", s.cutoffs.pump}, {"idler", s.cutoffs.idler}, {"signal", s.cutoffs.signal}, {"phonon", s.cutoffs.phonon}}},
            {"propagator",
             {{"dt_sample", s.prop.dt_sample},
              {"t_end", s.prop.t_end},
              {"krylov_dim", s.prop.krylov_dim},
              {"step_tolerance", s.prop.step_tolerance},
              {"max_substep", s.prop.max_substep},
              {"full_reorthogonalization", s.prop.full_reorthogonalization}}},
            {"observables", obs},
            {"c2_mode", to_string(s.c2_mode)},
            {"mem_budget_gib", s.mem_budget_gib},
            {"entropy_unit", s.unit == EntropyUnit::Nats ? "nats" : "bits"},
            {"im_stride", s.im_stride},
            {"factorize_above", s.factorize_above}};
}

/// Converts a resolved config back to YAML text, so sidecars can be rerun.
inline std::string to_yaml(const json &j) {
    std::function<YAML::Node(const json &)> conv = [&](const json &x) -> YAML::Node {
        YAML::Node n;
        if (x.is_object()) {
            n = YAML::Node(YAML::NodeType::Map);
            for (auto it = x.begin(); it != x.end(); ++it) n[it.key()] = conv(it.value());
        } else if (x.is_array()) {
            n = YAML::Node(YAML::NodeType::Sequence);
            for (const auto &e : x) n.push_back(conv(e));
        } else if (x.is_string()) {
            n = x.get<std::string>();
        } else if (x.is_boolean()) {
            n = x.get<bool>();
        } else if (x.is_number_integer()) {
            n = x.get<long long>();
        } else {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.17g", x.get<double>());
            n = std::string(buf);
        }
        return n;
    };
    YAML::Emitter out;
    out << conv(j);
    return out.c_str();
}

/// git blob hash: sha1("blob <len>\0" + content).
inline std::string git_blob_hash(const std::string &content) {
    const std::string header = "blob " + std::to_string(content.size()) + '\0';
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX *ctx = EVP_MD_CTX_new();
    if (!ctx) throw Error("cannot allocate hash context");
    EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
    EVP_DigestUpdate(ctx, header.data(), header.size());
    EVP_DigestUpdate(ctx, content.data(), content.size());
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    static const char *hex = "0123456789abcdef";
    std::string s;
    for (unsigned i = 0; i < len; ++i) {
        s += hex[md[i] >> 4];
        s += hex[md[i] & 15];
    }
    return s;
}

// ---------------------------------------------------------------- evaluation

/// How a scenario is simulated: the joint state, or (C2 only) one state per
/// medium, exact because the two media never interact.
struct Plan {
    bool factorized = false;
    SiteLayout joint;
    std::vector<SiteLayout> parts; // factorized: site A then site B
    std::size_t evolved_dim = 0;   // largest state evolved at once
    std::size_t memory_bytes = 0;
};

inline Plan make_plan(const Scenario &s) {
    Plan p;
    p.joint = scenario_layout(s);
    const std::size_t joint_dim = p.joint.space.total_dim();
    p.factorized = s.topology == Topology::C2 &&
                   (s.c2_mode == C2Mode::Factorized || (s.c2_mode == C2Mode::Auto && joint_dim > s.factorize_above));
    const std::size_t work = static_cast<std::size_t>(s.prop.krylov_dim) + 4;
    if (p.factorized) {
        p.parts = {make_c2_site_layout("A", s.cutoffs), make_c2_site_layout("B", s.cutoffs)};
        p.evolved_dim = p.parts[0].space.total_dim();
        // Krylov workspace for one site plus the stored trajectory of site A.
        p.memory_bytes = p.evolved_dim * 16 * work + p.evolved_dim * 16 * s.prop.sample_times().size();
    } else {
        p.evolved_dim = joint_dim;
        p.memory_bytes = joint_dim * 16 * work;
    }
    return p;
}

inline void check_budget(const Plan &p, double budget_gib) {
    const double need = static_cast<double>(p.memory_bytes) / (1024.0 * 1024.0 * 1024.0);
    if (need > budget_gib) {
        char buf[200];
        std::snprintf(buf, sizeof buf, "estimated memory %.3f GiB (dim %zu) exceeds budget %.3f GiB", need, p.evolved_dim,
                      budget_gib);
        throw BudgetError(buf);
    }
}

/// Where a joint label lives in a factorized plan.
struct PartRef {
    std::size_t part;
    std::size_t index;
};

/// Evaluates the configured observables on either a joint state or a pair
/// of per-medium states.
class Evaluator {
  public:
    Evaluator(const Scenario &s, const Plan &plan) : s_(s), plan_(plan) {
        const dsl::SymbolTable table = symbol_table(plan.joint);
        for (const auto &o : s.observables) {
            Compiled c;
            if (o.kind == ObsKind::Expr) {
                const auto e = dsl::parse(expression_text(o));
                if (!plan.factorized) {
                    c.joint_op = std::make_shared<ExprOperator>(plan.joint, e);
                } else {
                    const TermSum t = dsl::lower_terms(e, plan.joint.space, table);
                    for (const auto &term : t.terms()) c.factor_terms.push_back(split_term(term));
                }
            }
            compiled_.push_back(std::move(c));
        }
    }

    std::size_t size() const { return s_.observables.size(); }

    double joint(std::size_t k, const StateVector &psi) const {
        const auto &o = s_.observables[k];
        const SpaceSpec &sp = plan_.joint.space;
        switch (o.kind) {
        case ObsKind::Occupation: return occupation(sp, psi, o.label);
        case ObsKind::Bs2: return bs2_output(sp, psi, o.phase, "idler_A", "idler_B", o.port_b);
        case ObsKind::MutualInfo: return mutual_information(sp, psi, o.group_a, o.group_b, s_.unit);
        case ObsKind::Expr: return compiled_[k].joint_op->expectation(psi).real();
        }
        return 0;
    }

    double factorized(std::size_t k, const std::vector<const StateVector *> &psi) const {
        const auto &o = s_.observables[k];
        switch (o.kind) {
        case ObsKind::Occupation: {
            const PartRef r = locate(o.label);
            return occupation(plan_.parts[r.part].space, *psi[r.part], o.label);
        }
        case ObsKind::Bs2: {
            const SpaceSpec &a = plan_.parts[0].space, &b = plan_.parts[1].space;
            // Independent media: <c_2A^dag c_2B> = <c_2A>^* <c_2B>.
            const cplx corr = std::conj(mode_mean(a, *psi[0], "idler_A")) * mode_mean(b, *psi[1], "idler_B");
            return bs2_from_moments(occupation(a, *psi[0], "idler_A"), occupation(b, *psi[1], "idler_B"), corr, o.phase, o.port_b);
        }
        case ObsKind::MutualInfo: {
            std::vector<std::string> all = o.group_a;
            all.insert(all.end(), o.group_b.begin(), o.group_b.end());
            std::optional<ReducedDensity> rho;
            for (std::size_t part = 0; part < plan_.parts.size(); ++part) {
                std::vector<std::string> mine;
                for (const auto &l : all)
                    if (locate(l).part == part) mine.push_back(l);
                if (mine.empty()) continue;
                ReducedDensity r = partial_trace(plan_.parts[part].space, *psi[part], mine);
                rho = rho ? kron(*rho, r) : std::move(r);
            }
            return mutual_information(*rho, o.group_a, o.group_b, s_.unit);
        }
        case ObsKind::Expr: {
            cplx v = 0;
            for (const auto &ft : compiled_[k].factor_terms) {
                cplx term = ft.coeff;
                for (std::size_t part = 0; part < ft.ops.size(); ++part)
                    if (ft.ops[part]) term *= psi[part]->dot(ft.ops[part]->apply(*psi[part])) / psi[part]->amplitudes().squaredNorm();
                v += term;
            }
            return v.real();
        }
        }
        return 0;
    }

  private:
    struct FactorTerm {
        cplx coeff;
        std::vector<std::shared_ptr<SparseOperator>> ops; // per part; null = identity
    };
    struct Compiled {
        std::shared_ptr<ExprOperator> joint_op;
        std::vector<FactorTerm> factor_terms;
    };

    PartRef locate(const std::string &label) const {
        for (std::size_t p = 0; p < plan_.parts.size(); ++p)
            if (const auto k = plan_.parts[p].space.find(label)) return {p, *k};
        throw Error("label '" + label + "' is not in any medium");
    }

    FactorTerm split_term(const ProductTerm &term) const {
        FactorTerm ft{term.coeff, std::vector<std::shared_ptr<SparseOperator>>(plan_.parts.size())};
        std::vector<std::vector<LocalFactor>> per(plan_.parts.size());
        for (const auto &f : term.factors) {
            const PartRef r = locate(plan_.joint.space[f.subsystem].label);
            per[r.part].push_back({r.index, f.matrix, f.name});
        }
        for (std::size_t p = 0; p < per.size(); ++p) {
            if (per[p].empty()) continue;
            TermSum t(plan_.parts[p].space);
            t.add(1.0, per[p]);
            ft.ops[p] = std::make_shared<SparseOperator>(t.to_sparse());
        }
        return ft;
    }

    const Scenario &s_;
    const Plan &plan_;
    std::vector<Compiled> compiled_;
};

// ---------------------------------------------------------------- running

struct TimeSeries {
    std::vector<double> times;
    std::vector<std::string> names;
    std::vector<std::vector<std::optional<double>>> values; // [observable][sample]
    json meta;

    const std::vector<std::optional<double>> &column(const std::string &name) const {
        for (std::size_t k = 0; k < names.size(); ++k)
            if (names[k] == name) return values[k];
        throw Error("no column '" + name + "'");
    }

    /// Sampled (t, value) pairs of a column.
    std::vector<std::pair<double, double>> points(const std::string &name) const {
        const auto &c = column(name);
        std::vector<std::pair<double, double>> p;
        for (std::size_t i = 0; i < c.size(); ++i)
            if (c[i]) p.emplace_back(times[i], *c[i]);
        return p;
    }
};

/// Called at each sample of a joint run with the current state.
using StateHook = std::function<void(std::size_t index, double t, const SiteLayout &, const StateVector &)>;

struct RunOptions {
    unsigned threads = 1;
    std::optional<double> mem_budget_gib; // overrides the scenario value
    StateHook hook;
};

inline std::string format_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline TimeSeries simulate(const Scenario &s, const RunOptions &opt = {}) {
    const auto wall0 = std::chrono::steady_clock::now();
    set_num_threads(opt.threads);
    const Plan plan = make_plan(s);
    check_budget(plan, opt.mem_budget_gib.value_or(s.mem_budget_gib));
    const Evaluator eval(s, plan);
    const cplx alpha = std::sqrt(s.alpha2);

    TimeSeries ts;
    for (const auto &o : s.observables) ts.names.push_back(o.name);
    const auto times = s.prop.sample_times();
    ts.values.assign(s.observables.size(), std::vector<std::optional<double>>(times.size()));

    auto record = [&](std::size_t i, auto &&value_of) {
        for (std::size_t k = 0; k < s.observables.size(); ++k) {
            if (i % static_cast<std::size_t>(s.observables[k].stride) != 0) continue;
            const double v = value_of(k);
            if (!std::isfinite(v))
                throw Error("observable '" + s.observables[k].name + "' is not finite at t=" + format_number(times[i]));
            ts.values[k][i] = v;
        }
    };

    json prop_meta;
    std::vector<double> norms, energies;
    if (!plan.factorized) {
        const KronOperator H = build_structured(plan.joint, s.params);
        const StateVector psi0 = initial_state(plan.joint, s.params, alpha, s.tail_bound);
        const Trajectory tr = evolve(H, psi0, s.prop, [&](std::size_t i, double t, const StateVector &psi) {
            record(i, [&](std::size_t k) { return eval.joint(k, psi); });
            if (opt.hook) opt.hook(i, t, plan.joint, psi);
        });
        ts.times = tr.times;
        norms = tr.norms;
        energies = tr.energies;
        prop_meta = {{"matvecs", tr.stats.matvecs}, {"steps", tr.stats.steps}, {"max_step_error", tr.stats.max_step_error}};
    } else {
        std::vector<StateVector> track_a;
        const SiteLayout &la = plan.parts[0], &lb = plan.parts[1];
        const KronOperator Ha = build_structured(la, s.params), Hb = build_structured(lb, s.params);
        const Trajectory ta = evolve(Ha, initial_state(la, s.params, alpha, s.tail_bound), s.prop,
                                     [&](std::size_t, double, const StateVector &psi) { track_a.push_back(psi); });
        const Trajectory tb = evolve(Hb, initial_state(lb, s.params, alpha, s.tail_bound), s.prop,
                                     [&](std::size_t i, double, const StateVector &psi) {
                                         const std::vector<const StateVector *> parts{&track_a[i], &psi};
                                         record(i, [&](std::size_t k) { return eval.factorized(k, parts); });
                                     });
        ts.times = tb.times;
        for (std::size_t i = 0; i < tb.times.size(); ++i) {
            norms.push_back(ta.norms[i] * tb.norms[i]);
            energies.push_back(ta.energies[i] + tb.energies[i]);
        }
        prop_meta = {{"matvecs", ta.stats.matvecs + tb.stats.matvecs},
                     {"steps", ta.stats.steps + tb.stats.steps},
                     {"max_step_error", std::max(ta.stats.max_step_error, tb.stats.max_step_error)}};
    }
    Trajectory summary;
    summary.norms = norms;
    summary.energies = energies;
    prop_meta["max_norm_drift"] = summary.max_norm_drift();
    prop_meta["max_relative_energy_drift"] = summary.max_relative_energy_drift();
    prop_meta["initial_energy"] = energies.front();

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    ts.meta = {{"scenario", s.name},
               {"resolved_config", resolved_config(s)},
               {"mode", plan.factorized ? "factorized" : "joint"},
               {"dimension", plan.joint.space.total_dim()},
               {"evolved_dimension", plan.evolved_dim},
               {"memory_estimate_bytes", plan.memory_bytes},
               {"threads", opt.threads},
               {"propagation", prop_meta},
               {"pump_tail_per_arm", poisson_tail(s.topology == Topology::SingleSite ? s.alpha2 : s.alpha2 / 2, s.cutoffs.pump)},
               {"wall_seconds", wall}};
    return ts;
}

inline std::string to_csv(const TimeSeries &ts) {
    std::string out = "t";
    for (const auto &n : ts.names) out += "," + n;
    out += "\n";
    for (std::size_t i = 0; i < ts.times.size(); ++i) {
        out += format_number(ts.times[i]);
        for (const auto &col : ts.values) {
            out += ",";
            if (col[i]) out += format_number(*col[i]);
        }
        out += "\n";
    }
    return out;
}

inline void write_text(const std::filesystem::path &p, const std::string &text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw Error("cannot write " + p.string());
    f << text;
    if (!f) throw Error("failed writing " + p.string());
}

/// Writes <out>/<name>.csv and <out>/<name>.meta.json; returns the CSV path.
inline std::filesystem::path write_outputs(const TimeSeries &ts, const std::filesystem::path &out, const std::string &name) {
    std::filesystem::create_directories(out);
    const std::string csv = to_csv(ts);
    json meta = ts.meta;
    meta["content_hash"] = {{"csv", git_blob_hash(csv)}, {"config", git_blob_hash(meta["resolved_config"].dump())}};
    meta["resolved_config_yaml"] = to_yaml(meta["resolved_config"]);
    const auto csv_path = out / (name + ".csv");
    write_text(csv_path, csv);
    write_text(out / (name + ".meta.json"), meta.dump(2) + "\n");
    return csv_path;
}

// ---------------------------------------------------------------- sweeps

/// max_t |a - b| / max(max_t |b|, floor) over samples present in both.
inline double relative_deviation(const std::vector<std::optional<double>> &a, const std::vector<std::optional<double>> &b,
                                 double floor = 1e-9) {
    if (a.size() != b.size()) throw Error("traces have different lengths");
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a[i] || !b[i]) continue;
        diff = std::max(diff, std::abs(*a[i] - *b[i]));
        scale = std::max(scale, std::abs(*b[i]));
    }
    return diff / std::max(scale, floor);
}

inline const std::vector<std::string> &sweep_axes() {
    static const std::vector<std::string> a = {"cutoff.pump", "cutoff.idler", "cutoff.signal", "cutoff.phonon",
                                               "nu", "phi", "alpha", "alpha2"};
    return a;
}

/// Copy of `base` with the axis set to `value`. "alpha" and "alpha2" both set
/// the mean pump photon number; "phi" sets the phase of every bs2 observable.
inline Scenario with_axis(const Scenario &base, const std::string &axis, double value) {
    Scenario s = base;
    auto cutoff = [&](int &c) {
        if (value != std::floor(value) || value < 1) throw ConfigError("cutoff sweep values must be integers >= 1");
        c = static_cast<int>(value);
    };
    if (axis == "cutoff.pump")
        cutoff(s.cutoffs.pump);
    else if (axis == "cutoff.idler")
        cutoff(s.cutoffs.idler);
    else if (axis == "cutoff.signal")
        cutoff(s.cutoffs.signal);
    else if (axis == "cutoff.phonon")
        cutoff(s.cutoffs.phonon);
    else if (axis == "nu") {
        s.params.matter.nu = value;
        for (auto &[k, m] : s.params.site_overrides) m.nu = value;
        s.params.validate();
    } else if (axis == "alpha" || axis == "alpha2") {
        if (!(value >= 0)) throw ConfigError("alpha sweep values must be >= 0");
        s.alpha2 = value;
    } else if (axis == "phi") {
        if (!(value >= 0 && value < 2 * std::numbers::pi)) throw ConfigError("phi values must lie in [0, 2pi)");
        bool any = false;
        for (auto &o : s.observables)
            if (o.kind == ObsKind::Bs2) {
                o.phase = value;
                any = true;
            }
        if (!any) throw ConfigError("phi sweep needs at least one bs2_output observable");
    } else {
        std::string list;
        for (const auto &a : sweep_axes()) list += (list.empty() ? "" : ", ") + a;
        throw ConfigError("unknown sweep axis '" + axis + "' (expected one of " + list + ")");
    }
    s.name = base.name + "__" + axis + "=" + format_number(value);
    return s;
}

struct SweepOptions {
    RunOptions run;
    unsigned jobs = 1;
    double threshold = 1e-3;
    double floor = 1e-9;
};

/// Runs one series per value (phi values share a single evolution, since the
/// phase only enters the readout) and compares successive values.
inline json sweep(const Scenario &base, const std::string &axis, const std::vector<double> &values,
                  const SweepOptions &opt, const std::filesystem::path &out) {
    if (values.size() < 1) throw ConfigError("sweep needs at least one value");
    std::vector<Scenario> points;
    for (double v : values) points.push_back(with_axis(base, axis, v));
    for (const auto &p : points) check_budget(make_plan(p), opt.run.mem_budget_gib.value_or(p.mem_budget_gib));

    std::vector<TimeSeries> series(points.size());
    if (axis == "phi") {
        // One evolution carrying a bs2 column per phase, split afterwards.
        Scenario merged = base;
        merged.observables.clear();
        std::vector<std::pair<std::size_t, std::size_t>> origin; // (point, observable)
        for (std::size_t p = 0; p < points.size(); ++p)
            for (std::size_t k = 0; k < points[p].observables.size(); ++k) {
                ObservableSpec o = points[p].observables[k];
                if (p > 0 && o.kind != ObsKind::Bs2) continue;
                o.name = o.name + "#" + std::to_string(p);
                merged.observables.push_back(o);
                origin.emplace_back(p, k);
            }
        const TimeSeries all = simulate(merged, opt.run);
        for (std::size_t p = 0; p < points.size(); ++p) {
            TimeSeries &t = series[p];
            t.times = all.times;
            t.meta = all.meta;
            t.meta["scenario"] = points[p].name;
            t.meta["resolved_config"] = resolved_config(points[p]);
            for (std::size_t k = 0; k < points[p].observables.size(); ++k) {
                const auto &o = points[p].observables[k];
                const std::size_t src_point = o.kind == ObsKind::Bs2 ? p : 0;
                for (std::size_t m = 0; m < origin.size(); ++m)
                    if (origin[m] == std::pair{src_point, k}) {
                        t.names.push_back(o.name);
                        t.values.push_back(all.values[m]);
                    }
            }
        }
    } else {
        const unsigned jobs = std::max(1u, std::min<unsigned>(opt.jobs, static_cast<unsigned>(points.size())));
        RunOptions ro = opt.run;
        if (jobs > 1) ro.threads = std::max(1u, opt.run.threads / jobs);
        std::atomic<std::size_t> next{0};
        std::vector<std::string> errors(points.size());
        auto worker = [&] {
            for (std::size_t p; (p = next++) < points.size();) {
                try {
                    series[p] = simulate(points[p], ro);
                } catch (const std::exception &e) {
                    errors[p] = e.what();
                }
            }
        };
        std::vector<std::thread> pool;
        for (unsigned j = 1; j < jobs; ++j) pool.emplace_back(worker);
        worker();
        for (auto &t : pool) t.join();
        for (std::size_t p = 0; p < points.size(); ++p)
            if (!errors[p].empty()) throw Error(points[p].name + ": " + errors[p]);
    }

    json report{{"scenario", base.name},
                {"axis", axis},
                {"values", values},
                {"threshold", opt.threshold},
                {"deviation", "max_t |x_next - x_prev| / max(max_t |x_prev|, " + format_number(opt.floor) + ")"}};
    json runs = json::array();
    for (std::size_t p = 0; p < points.size(); ++p) {
        const auto csv = write_outputs(series[p], out, points[p].name);
        runs.push_back({{"value", values[p]}, {"csv", csv.filename().string()}, {"wall_seconds", series[p].meta["wall_seconds"]}});
    }
    report["runs"] = runs;
    json comps = json::array();
    std::map<std::string, std::vector<double>> history;
    for (std::size_t p = 1; p < points.size(); ++p) {
        json dev = json::object();
        double worst = 0;
        for (std::size_t k = 0; k < series[p].names.size(); ++k) {
            const auto &name = series[p].names[k];
            const double d = relative_deviation(series[p].values[k], series[p - 1].column(name), opt.floor);
            dev[name] = d;
            history[name].push_back(d);
            worst = std::max(worst, d);
        }
        comps.push_back({{"from", values[p - 1]}, {"to", values[p]}, {"deviations", dev}, {"max_deviation", worst},
                         {"converged", worst < opt.threshold}});
    }
    report["comparisons"] = comps;
    json mono = json::object();
    bool all_mono = true;
    for (const auto &[name, h] : history) {
        bool m = true;
        for (std::size_t i = 1; i < h.size(); ++i) m = m && h[i] <= h[i - 1];
        mono[name] = m;
        all_mono = all_mono && m;
    }
    report["monotone_decreasing"] = mono;
    report["all_monotone_decreasing"] = all_mono;
    report["converged"] = !comps.empty() && comps.back()["converged"].get<bool>();
    std::filesystem::create_directories(out);
    write_text(out / "sweep_report.json", report.dump(2) + "\n");
    return report;
}

} // namespace mzsim::runner
