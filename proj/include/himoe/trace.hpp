#pragma once
// Per-query routing records and their JSON-lines form.
//
// One line per routed query:
//   {"batch":0,"query":3,"routes":[0,2],"pool":[0,1,4,5],"experts":[1,4],
//    "weights":[0.6,0.4],"e_full":[...N_e...],"g":[...N_s...],
//    "scene_type":2,"instance_type":1,"loss":0.03}
// `scene_type`, `instance_type` and `loss` are optional.

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "himoe/errors.hpp"
#include "himoe/routing.hpp"

namespace himoe {

struct TraceRecord {
    std::size_t batch = 0;   // scene descriptor id
    std::size_t query = 0;
    std::vector<std::size_t> routes;
    std::vector<std::size_t> pool;
    std::vector<std::size_t> experts;
    std::vector<double> weights;
    std::vector<double> e_full;
    std::vector<double> g;
    std::optional<int> scene_type;
    std::optional<int> instance_type;
    std::optional<double> loss;

    bool operator==(const TraceRecord&) const = default;
};

struct RoutingTrace {
    std::vector<TraceRecord> records;

    bool empty() const { return records.empty(); }
    bool operator==(const RoutingTrace&) const = default;

    std::size_t n_experts() const { return records.empty() ? 0 : records.front().e_full.size(); }

    /// Number of times each expert appears in a selected set.
    std::vector<std::size_t> expert_counts() const {
        std::vector<std::size_t> counts(n_experts(), 0);
        for (const auto& r : records)
            for (std::size_t k : r.experts) {
                if (k >= counts.size()) counts.resize(k + 1, 0);
                ++counts[k];
            }
        return counts;
    }

    void append(const RoutingTrace& other) {
        records.insert(records.end(), other.records.begin(), other.records.end());
    }
};

/// Trace record for one routed query of a scene.
template <class T>
TraceRecord make_record(std::size_t batch, const BasicScenePool<T>& scene, const BasicRoutingAssignment<T>& a) {
    TraceRecord r;
    r.batch = batch;
    r.query = a.query_index;
    r.routes = scene.selected_routes;
    r.g = values(scene.g).std();
    r.experts = a.selected;
    r.weights = values(a.weights).std();
    r.e_full = values(a.e).std();
    r.pool = scene.expert_pool;
    return r;
}

inline nlohmann::json to_json(const TraceRecord& r) {
    nlohmann::json j;
    j["batch"] = r.batch;
    j["query"] = r.query;
    j["routes"] = r.routes;
    j["pool"] = r.pool;
    j["experts"] = r.experts;
    j["weights"] = r.weights;
    j["e_full"] = r.e_full;
    j["g"] = r.g;
    if (r.scene_type) j["scene_type"] = *r.scene_type;
    if (r.instance_type) j["instance_type"] = *r.instance_type;
    if (r.loss) j["loss"] = *r.loss;
    return j;
}

inline TraceRecord record_from_json(const nlohmann::json& j) {
    TraceRecord r;
    r.batch = j.at("batch").get<std::size_t>();
    r.query = j.at("query").get<std::size_t>();
    r.routes = j.at("routes").get<std::vector<std::size_t>>();
    r.pool = j.at("pool").get<std::vector<std::size_t>>();
    r.experts = j.at("experts").get<std::vector<std::size_t>>();
    r.weights = j.at("weights").get<std::vector<double>>();
    r.e_full = j.at("e_full").get<std::vector<double>>();
    r.g = j.value("g", std::vector<double>{});
    if (j.contains("scene_type")) r.scene_type = j["scene_type"].get<int>();
    if (j.contains("instance_type")) r.instance_type = j["instance_type"].get<int>();
    if (j.contains("loss")) r.loss = j["loss"].get<double>();
    if (r.experts.size() != r.weights.size()) throw InputError("experts and weights differ in length");
    for (std::size_t k : r.experts)
        if (k >= r.e_full.size()) throw InputError("expert index outside e_full");
    return r;
}

inline void write_trace(std::ostream& os, const RoutingTrace& t) {
    for (const auto& r : t.records) os << to_json(r).dump() << '\n';
}

/// Parses JSON lines; blank lines are skipped. Malformed lines raise
/// InputError naming the 1-based line number.
inline RoutingTrace read_trace(std::istream& is) {
    RoutingTrace t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            t.records.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw InputError("trace line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return t;
}

inline void save_trace(const std::string& path, const RoutingTrace& t) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_trace(os, t);
    if (!os) throw IoError("failed writing " + path);
}

inline RoutingTrace load_trace(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    return read_trace(is);
}

}  // namespace himoe
