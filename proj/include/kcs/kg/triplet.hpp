#pragma once

#include <compare>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kcs/core/error.hpp"

namespace kcs::kg {

struct KnowledgeTriplet {
    std::string head;
    std::string relation;
    std::string tail;

    auto operator<=>(const KnowledgeTriplet&) const = default;
};

using TripletSet = std::set<KnowledgeTriplet>;

/// Relational graph loaded from an edge list. Entities are identified by their
/// sense id (e.g. "map.n.01"); `surface` maps ids to the words used when the
/// triplet is verbalized.
class Graph {
public:
    Graph() = default;

    explicit Graph(std::vector<KnowledgeTriplet> edges, std::map<std::string, std::string> aliases = {})
        : aliases_(std::move(aliases)) {
        for (auto& e : edges) add_edge(std::move(e));
    }

    void add_edge(KnowledgeTriplet edge) {
        if (!edges_.insert(edge).second) return;
        nodes_.insert(edge.head);
        nodes_.insert(edge.tail);
        outgoing_[edge.head].push_back(edge);
        incoming_[edge.tail].push_back(edge);
    }

    void set_alias(const std::string& id, std::string surface) { aliases_[id] = std::move(surface); }

    bool contains(const std::string& node) const { return nodes_.contains(node); }
    const TripletSet& edges() const { return edges_; }
    const std::set<std::string>& nodes() const { return nodes_; }

    /// Edges whose head is `node` (walking towards parents).
    const std::vector<KnowledgeTriplet>& outgoing(const std::string& node) const {
        auto it = outgoing_.find(node);
        return it == outgoing_.end() ? empty_ : it->second;
    }
    /// Edges whose tail is `node` (walking towards children).
    const std::vector<KnowledgeTriplet>& incoming(const std::string& node) const {
        auto it = incoming_.find(node);
        return it == incoming_.end() ? empty_ : it->second;
    }

    /// Surface word for an entity; falls back to the lemma of a WordNet-style
    /// id ("map.n.01" -> "map") and then to the id itself.
    std::string surface(const std::string& id) const {
        if (auto it = aliases_.find(id); it != aliases_.end()) return it->second;
        return lemma_of(id);
    }

    static std::string lemma_of(const std::string& id) {
        // lemma.pos.NN
        const auto last = id.rfind('.');
        if (last == std::string::npos || last == 0) return id;
        const auto mid = id.rfind('.', last - 1);
        if (mid == std::string::npos || mid == 0) return id;
        const std::string pos = id.substr(mid + 1, last - mid - 1);
        const std::string num = id.substr(last + 1);
        const bool pos_ok = pos.size() == 1 && std::string("nvasr").find(pos[0]) != std::string::npos;
        const bool num_ok = !num.empty() && num.find_first_not_of("0123456789") == std::string::npos;
        if (!pos_ok || !num_ok) return id;
        std::string lemma = id.substr(0, mid);
        for (auto& c : lemma)
            if (c == '_') c = ' ';
        return lemma;
    }

private:
    TripletSet edges_;
    std::set<std::string> nodes_;
    std::map<std::string, std::vector<KnowledgeTriplet>> outgoing_;
    std::map<std::string, std::vector<KnowledgeTriplet>> incoming_;
    std::map<std::string, std::string> aliases_;
    inline static const std::vector<KnowledgeTriplet> empty_{};
};

namespace detail {
inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, '\t')) out.push_back(field);
    return out;
}

inline bool skip_line(const std::string& line) {
    return line.empty() || line.front() == '#';
}
}  // namespace detail

/// Edge list: one `head<TAB>relation<TAB>tail` per line; '#' starts a comment line.
inline std::vector<KnowledgeTriplet> read_triplets(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("missing_input", "cannot open triplet file " + path.string());
    std::vector<KnowledgeTriplet> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (detail::skip_line(line)) continue;
        auto f = detail::split_tabs(line);
        if (f.size() != 3)
            throw Error("bad_input", path.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
        out.push_back({f[0], f[1], f[2]});
    }
    return out;
}

inline void write_triplets(const std::filesystem::path& path, const TripletSet& triplets) {
    std::ofstream out(path);
    if (!out) throw Error("io", "cannot write " + path.string());
    for (const auto& t : triplets) out << t.head << '\t' << t.relation << '\t' << t.tail << '\n';
}

/// Alias file: `sense_id<TAB>surface form` per line.
inline std::map<std::string, std::string> read_aliases(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("missing_input", "cannot open alias file " + path.string());
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (detail::skip_line(line)) continue;
        auto f = detail::split_tabs(line);
        if (f.size() != 2)
            throw Error("bad_input", path.string() + ":" + std::to_string(lineno) + ": expected 2 tab-separated fields");
        out[f[0]] = f[1];
    }
    return out;
}

inline std::set<std::string> entities_of(const TripletSet& triplets) {
    std::set<std::string> out;
    for (const auto& t : triplets) {
        out.insert(t.head);
        out.insert(t.tail);
    }
    return out;
}

}  // namespace kcs::kg
