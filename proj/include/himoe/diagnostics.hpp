#pragma once
// Post-hoc routing statistics computed from serialized traces.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "himoe/config.hpp"
#include "himoe/errors.hpp"
#include "himoe/losses.hpp"
#include "himoe/trace.hpp"

namespace himoe {

/// Scene-route breakdown of one expert's assignments. Shares use the expert's
/// own assignment total as denominator; they are not comparable across experts
/// as parts of a whole.
struct ExpertRouteProfile {
    std::size_t expert = 0;
    std::vector<std::size_t> route_counts;
    std::size_t total = 0;  // attributed assignments
    bool present = false;   // false when the expert was never selected under a scene route
    std::size_t dominant_route = 0;
    double dominant_share = 0.0;

    bool operator==(const ExpertRouteProfile&) const = default;
};

/// Route an assignment of `expert` is attributed to: the selected route whose
/// group contains it, preferring the larger g and then the lower index.
inline std::optional<std::size_t> attribute_route(const TraceRecord& r, std::size_t expert, const MoEConfig& cfg) {
    std::optional<std::size_t> best;
    for (std::size_t route : r.routes) {
        if (route >= cfg.route_experts.size()) throw InputError("trace route index outside N_s");
        const auto& group = cfg.route_experts[route];
        if (std::find(group.begin(), group.end(), expert) == group.end()) continue;
        if (!best) {
            best = route;
            continue;
        }
        const double gb = *best < r.g.size() ? r.g[*best] : 0.0;
        const double gr = route < r.g.size() ? r.g[route] : 0.0;
        if (gr > gb || (gr == gb && route < *best)) best = route;
    }
    return best;
}

inline std::vector<ExpertRouteProfile> route_profile(const RoutingTrace& trace, const MoEConfig& cfg) {
    std::vector<ExpertRouteProfile> out(cfg.n_experts);
    for (std::size_t k = 0; k < cfg.n_experts; ++k) {
        out[k].expert = k;
        out[k].route_counts.assign(cfg.n_routes, 0);
    }
    for (const auto& r : trace.records)
        for (std::size_t k : r.experts) {
            if (k >= cfg.n_experts) throw InputError("trace expert index outside N_e");
            if (auto route = attribute_route(r, k, cfg)) {
                ++out[k].route_counts[*route];
                ++out[k].total;
            }
        }
    for (auto& p : out) {
        if (p.total == 0) continue;
        p.present = true;
        for (std::size_t s = 1; s < p.route_counts.size(); ++s)
            if (p.route_counts[s] > p.route_counts[p.dominant_route]) p.dominant_route = s;
        p.dominant_share = static_cast<double>(p.route_counts[p.dominant_route]) / static_cast<double>(p.total);
    }
    return out;
}

/// Entropy (nats) of the record's routing distribution restricted to its pool.
inline double record_entropy(const TraceRecord& r) {
    double mass = 0.0;
    for (std::size_t k : r.pool) mass += r.e_full.at(k);
    if (!(mass > 0.0)) return 0.0;
    double h = 0.0;
    for (std::size_t k : r.pool) {
        const double p = r.e_full[k] / mass;
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

/// Mean per-query routing entropy over the trace.
inline double routing_entropy(const RoutingTrace& trace) {
    if (trace.empty()) throw InputError("routing_entropy: empty trace");
    double acc = 0.0;
    for (const auto& r : trace.records) acc += record_entropy(r);
    return acc / static_cast<double>(trace.records.size());
}

/// Mean entropy per scene id, in ascending id order.
inline std::vector<std::pair<std::size_t, double>> entropy_series(const RoutingTrace& trace) {
    std::map<std::size_t, std::pair<double, std::size_t>> acc;
    for (const auto& r : trace.records) {
        auto& [sum, n] = acc[r.batch];
        sum += record_entropy(r);
        ++n;
    }
    std::vector<std::pair<std::size_t, double>> out;
    for (const auto& [b, sn] : acc) out.emplace_back(b, sn.first / static_cast<double>(sn.second));
    return out;
}

inline UtilizationStats utilization_histogram(const RoutingTrace& trace, std::size_t n_experts) {
    return utilization(trace, n_experts);
}

/// Per-expert, per-instance-type mean task loss plus route profiles.
struct SpecializationReport {
    std::vector<std::string> instance_types;
    std::vector<std::string> route_labels;
    std::vector<std::vector<std::optional<double>>> cells;  // [expert][type]; absent when no record
    std::vector<std::vector<std::size_t>> cell_counts;      // [expert][type]
    std::vector<ExpertRouteProfile> profiles;
    std::vector<std::optional<double>> average;             // unweighted mean over present cells

    bool operator==(const SpecializationReport&) const = default;
};

inline SpecializationReport specialization_report(const RoutingTrace& trace, const MoEConfig& cfg,
                                                  const std::vector<std::string>& type_names) {
    if (trace.empty()) throw InputError("specialization_report: no records");
    SpecializationReport rep;
    rep.instance_types = type_names;
    rep.route_labels = cfg.route_labels;
    const std::size_t nt = type_names.size();
    std::vector<std::vector<double>> sums(cfg.n_experts, std::vector<double>(nt, 0.0));
    rep.cell_counts.assign(cfg.n_experts, std::vector<std::size_t>(nt, 0));
    for (const auto& r : trace.records) {
        if (!r.instance_type || !r.loss) continue;
        const int t = *r.instance_type;
        if (t < 0 || static_cast<std::size_t>(t) >= nt) throw InputError("trace instance_type outside the type list");
        for (std::size_t k : r.experts) {
            if (k >= cfg.n_experts) throw InputError("trace expert index outside N_e");
            sums[k][static_cast<std::size_t>(t)] += *r.loss;
            ++rep.cell_counts[k][static_cast<std::size_t>(t)];
        }
    }
    rep.cells.assign(cfg.n_experts, std::vector<std::optional<double>>(nt));
    for (std::size_t k = 0; k < cfg.n_experts; ++k)
        for (std::size_t t = 0; t < nt; ++t)
            if (rep.cell_counts[k][t] > 0) rep.cells[k][t] = sums[k][t] / static_cast<double>(rep.cell_counts[k][t]);
    rep.average.assign(nt, std::nullopt);
    for (std::size_t t = 0; t < nt; ++t) {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t k = 0; k < cfg.n_experts; ++k)
            if (rep.cells[k][t]) {
                s += *rep.cells[k][t];
                ++n;
            }
        if (n > 0) rep.average[t] = s / static_cast<double>(n);
    }
    rep.profiles = route_profile(trace, cfg);
    return rep;
}

inline nlohmann::json to_json(const ExpertRouteProfile& p) {
    return {{"expert", p.expert},         {"route_counts", p.route_counts},
            {"total", p.total},           {"present", p.present},
            {"dominant_route", p.dominant_route}, {"dominant_share", p.dominant_share}};
}

inline ExpertRouteProfile profile_from_json(const nlohmann::json& j) {
    ExpertRouteProfile p;
    p.expert = j.at("expert").get<std::size_t>();
    p.route_counts = j.at("route_counts").get<std::vector<std::size_t>>();
    p.total = j.at("total").get<std::size_t>();
    p.present = j.at("present").get<bool>();
    p.dominant_route = j.at("dominant_route").get<std::size_t>();
    p.dominant_share = j.at("dominant_share").get<double>();
    return p;
}

namespace detail {
inline nlohmann::json optional_row(const std::vector<std::optional<double>>& row) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& c : row) j.push_back(c ? nlohmann::json(*c) : nlohmann::json(nullptr));
    return j;
}
inline std::vector<std::optional<double>> optional_row_from(const nlohmann::json& j) {
    std::vector<std::optional<double>> out;
    for (const auto& c : j) out.push_back(c.is_null() ? std::nullopt : std::optional<double>(c.get<double>()));
    return out;
}
}  // namespace detail

inline nlohmann::json to_json(const SpecializationReport& r) {
    nlohmann::json j;
    j["instance_types"] = r.instance_types;
    j["route_labels"] = r.route_labels;
    j["experts"] = nlohmann::json::array();
    for (std::size_t k = 0; k < r.cells.size(); ++k)
        j["experts"].push_back({{"expert", k},
                                {"mean_loss", detail::optional_row(r.cells[k])},
                                {"counts", r.cell_counts[k]},
                                {"profile", to_json(r.profiles[k])}});
    j["average"] = detail::optional_row(r.average);
    return j;
}

inline SpecializationReport report_from_json(const nlohmann::json& j) {
    SpecializationReport r;
    r.instance_types = j.at("instance_types").get<std::vector<std::string>>();
    r.route_labels = j.at("route_labels").get<std::vector<std::string>>();
    for (const auto& e : j.at("experts")) {
        r.cells.push_back(detail::optional_row_from(e.at("mean_loss")));
        r.cell_counts.push_back(e.at("counts").get<std::vector<std::size_t>>());
        r.profiles.push_back(profile_from_json(e.at("profile")));
    }
    r.average = detail::optional_row_from(j.at("average"));
    return r;
}

inline std::string format_double(double v) { return nlohmann::json(v).dump(); }

/// One row per expert x type cell.
inline void write_report_csv(std::ostream& os, const SpecializationReport& r) {
    os << "expert,instance_type,mean_loss,count,dominant_route,dominant_share\n";
    for (std::size_t k = 0; k < r.cells.size(); ++k) {
        const auto& p = r.profiles[k];
        for (std::size_t t = 0; t < r.instance_types.size(); ++t) {
            os << k << ',' << r.instance_types[t] << ',' << (r.cells[k][t] ? format_double(*r.cells[k][t]) : "")
               << ',' << r.cell_counts[k][t] << ',' << (p.present ? r.route_labels.at(p.dominant_route) : "") << ','
               << (p.present ? format_double(p.dominant_share) : "") << '\n';
        }
    }
    for (std::size_t t = 0; t < r.instance_types.size(); ++t)
        os << "avg," << r.instance_types[t] << ',' << (r.average[t] ? format_double(*r.average[t]) : "") << ",,,\n";
}

}  // namespace himoe
