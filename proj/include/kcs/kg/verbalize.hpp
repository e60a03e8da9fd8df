#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcs/core/error.hpp"
#include "kcs/kg/pipeline.hpp"
#include "kcs/kg/triplet.hpp"
#include "kcs/text/tokenizer.hpp"

namespace kcs::kg {

using text::TokenId;

/// Relation-specific verbalization such as "a {h} is a kind of {t}". The tail
/// slot must be the last word; trailing punctuation is dropped.
struct Template {
    std::string relation;
    std::string id;
    std::string pattern;
};

struct PromptRecord {
    KnowledgeTriplet triplet;
    std::string template_id;
    std::vector<TokenId> tokens;  // <bos>, prefix..., tail
    int tail_position = 0;        // index of the tail token in `tokens`
    double base_tail_ppl = std::numeric_limits<double>::quiet_NaN();

    TokenId tail_token() const { return tokens.at(static_cast<std::size_t>(tail_position)); }
    /// Row whose next-token distribution predicts the tail.
    int predictor_position() const { return tail_position - 1; }

    bool operator==(const PromptRecord&) const = default;
};

namespace detail {
inline bool is_break(char c) {
    return std::isspace(static_cast<unsigned char>(c)) || std::string_view(".,;:!?\"()").find(c) != std::string_view::npos;
}

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
    for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
        s.replace(pos, from.size(), to);
    return s;
}
}  // namespace detail

/// Renders `triplet` with `tmpl`. Returns nullopt when the tail does not end
/// up as exactly one final token (e.g. "{t}s" turning the tail into an
/// out-of-vocabulary plural).
inline std::optional<PromptRecord> render(const KnowledgeTriplet& triplet, const Template& tmpl,
                                          const text::Vocabulary& vocab, const std::string& head_surface,
                                          const std::string& tail_surface) {
    const auto slot = tmpl.pattern.find("{t}");
    if (slot == std::string::npos || tmpl.pattern.find("{t}", slot + 3) != std::string::npos) return std::nullopt;
    std::string suffix = tmpl.pattern.substr(slot + 3);
    std::size_t glued = 0;
    while (glued < suffix.size() && !detail::is_break(suffix[glued])) ++glued;
    for (std::size_t i = glued; i < suffix.size(); ++i)
        if (!detail::is_break(suffix[i])) return std::nullopt;  // words after the tail

    const std::string prefix = detail::replace_all(tmpl.pattern.substr(0, slot), "{h}", head_surface);
    const auto tail_ids = vocab.encode(tail_surface + suffix.substr(0, glued));
    if (tail_ids.size() != 1) return std::nullopt;

    PromptRecord rec;
    rec.triplet = triplet;
    rec.template_id = tmpl.id;
    rec.tokens.push_back(text::Vocabulary::kBos);
    const auto prefix_ids = vocab.encode(prefix);
    rec.tokens.insert(rec.tokens.end(), prefix_ids.begin(), prefix_ids.end());
    rec.tail_position = static_cast<int>(rec.tokens.size());
    rec.tokens.push_back(tail_ids.front());
    return rec;
}

inline std::vector<Template> templates_for(const std::vector<Template>& all, const std::string& relation) {
    std::vector<Template> out;
    for (const auto& t : all)
        if (t.relation == relation) out.push_back(t);
    return out;
}

/// Scores candidate renderings; returns the tail perplexity of each.
using TailPplScorer = std::function<std::vector<double>(const std::vector<PromptRecord>&)>;

/// Picks, for each triplet, the rendering with the lowest tail perplexity
/// (ties: template order). Templates that do not render are skipped; a triplet
/// with no valid template raises.
inline std::vector<PromptRecord> verbalize_best(const std::vector<KnowledgeTriplet>& triplets,
                                                const std::vector<Template>& templates, const text::Vocabulary& vocab,
                                                const Graph& names, const TailPplScorer& scorer) {
    std::vector<PromptRecord> candidates;
    std::vector<std::size_t> owner;
    for (std::size_t i = 0; i < triplets.size(); ++i) {
        const auto& t = triplets[i];
        std::size_t valid = 0;
        for (const auto& tmpl : templates_for(templates, t.relation)) {
            if (auto rec = render(t, tmpl, vocab, names.surface(t.head), names.surface(t.tail))) {
                candidates.push_back(std::move(*rec));
                owner.push_back(i);
                ++valid;
            }
        }
        require(valid > 0, "no_valid_template",
                "no template renders (" + t.head + ", " + t.relation + ", " + t.tail + ") with a single-token tail");
    }
    const auto ppl = scorer(candidates);
    require(ppl.size() == candidates.size(), "scorer", "scorer returned the wrong number of values");

    std::vector<std::optional<PromptRecord>> best(triplets.size());
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        auto& slot = best[owner[c]];
        if (!slot || ppl[c] < slot->base_tail_ppl) {
            candidates[c].base_tail_ppl = ppl[c];
            slot = candidates[c];
        }
    }
    std::vector<PromptRecord> out;
    out.reserve(best.size());
    for (auto& b : best) out.push_back(std::move(*b));
    return out;
}

inline PromptRecord verbalize_best(const KnowledgeTriplet& triplet, const std::vector<Template>& templates,
                                   const text::Vocabulary& vocab, const Graph& names, const TailPplScorer& scorer) {
    return verbalize_best(std::vector<KnowledgeTriplet>{triplet}, templates, vocab, names, scorer).front();
}

/// Every valid rendering of every triplet (used to build a pretraining corpus).
inline std::vector<PromptRecord> render_all(const std::vector<KnowledgeTriplet>& triplets,
                                            const std::vector<Template>& templates, const text::Vocabulary& vocab,
                                            const Graph& names) {
    std::vector<PromptRecord> out;
    for (const auto& t : triplets)
        for (const auto& tmpl : templates_for(templates, t.relation))
            if (auto rec = render(t, tmpl, vocab, names.surface(t.head), names.surface(t.tail)))
                out.push_back(std::move(*rec));
    return out;
}

/// Drops records whose base tail perplexity exceeds the q-th percentile of the
/// pool.
inline std::vector<PromptRecord> filter_by_ppl(const std::vector<PromptRecord>& records, double q) {
    if (records.empty()) return {};
    std::vector<double> values;
    values.reserve(records.size());
    for (const auto& r : records) values.push_back(r.base_tail_ppl);
    const double limit = percentile(values, q);
    std::vector<PromptRecord> out;
    for (const auto& r : records)
        if (r.base_tail_ppl <= limit) out.push_back(r);
    return out;
}

/// Template file: `relation<TAB>template_id<TAB>pattern` per line.
inline std::vector<Template> read_templates(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("missing_input", "cannot open template file " + path.string());
    std::vector<Template> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (kg::detail::skip_line(line)) continue;
        auto f = kg::detail::split_tabs(line);
        if (f.size() != 3)
            throw Error("bad_input", path.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
        out.push_back({f[0], f[1], f[2]});
    }
    return out;
}

inline void write_templates(const std::filesystem::path& path, const std::vector<Template>& templates) {
    std::ofstream out(path);
    if (!out) throw Error("io", "cannot write " + path.string());
    for (const auto& t : templates) out << t.relation << '\t' << t.id << '\t' << t.pattern << '\n';
}

inline nlohmann::json to_json(const PromptRecord& r) {
    return {{"head", r.triplet.head},
            {"relation", r.triplet.relation},
            {"tail", r.triplet.tail},
            {"template_id", r.template_id},
            {"text_tokens", r.tokens},
            {"tail_position", r.tail_position},
            {"base_tail_ppl", r.base_tail_ppl}};
}

inline PromptRecord record_from_json(const nlohmann::json& j) {
    PromptRecord r;
    r.triplet = {j.at("head"), j.at("relation"), j.at("tail")};
    r.template_id = j.at("template_id");
    r.tokens = j.at("text_tokens").get<std::vector<TokenId>>();
    r.tail_position = j.at("tail_position");
    r.base_tail_ppl = j.at("base_tail_ppl").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                      : j.at("base_tail_ppl").get<double>();
    require(r.tail_position >= 1 && r.tail_position < static_cast<int>(r.tokens.size()), "bad_record",
            "tail_position out of range for record " + r.triplet.head);
    return r;
}

/// KG dataset file: one JSON record per line.
inline void write_records(const std::filesystem::path& path, const std::vector<PromptRecord>& records) {
    std::ofstream out(path);
    if (!out) throw Error("io", "cannot write " + path.string());
    for (const auto& r : records) out << to_json(r).dump() << '\n';
}

inline std::vector<PromptRecord> read_records(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("missing_input", "cannot open KG dataset " + path.string());
    std::vector<PromptRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw Error("bad_input", path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace kcs::kg
