#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcs/analysis/subnet.hpp"
#include "kcs/core/error.hpp"
#include "kcs/core/hash.hpp"
#include "kcs/mask/scope.hpp"
#include "kcs/model/layout.hpp"
#include "kcs/model/pretrain.hpp"
#include "kcs/objectives/losses.hpp"
#include "kcs/train/mask_trainer.hpp"

namespace kcs::cli {

enum class KeyType { String, Int, Double, OptDouble, Bool };

struct KeySpec {
    std::string name;
    KeyType type;
    std::string default_value;
    std::string help;
    bool semantic = true;  // part of the config hash
};

/// Every recognised configuration key. Values are written as text in the
/// config file and on the command line, and checked against the type here.
inline const std::vector<KeySpec>& schema() {
    static const std::vector<KeySpec> keys = {
        {"run_id", KeyType::String, "run", "name of the run directory under output_dir", false},
        {"output_dir", KeyType::String, "runs", "root directory for run outputs", false},
        {"seed", KeyType::Int, "0", "base seed for every random choice of the run"},

        {"graph_file", KeyType::String, "", "edge list: head<TAB>relation<TAB>tail"},
        {"alias_file", KeyType::String, "", "entity surfaces: id<TAB>surface"},
        {"template_file", KeyType::String, "", "templates: relation<TAB>id<TAB>pattern"},
        {"paraphrase_file", KeyType::String, "", "held-out paraphrase templates (same format)"},
        {"corpus_file", KeyType::String, "", "plain-text corpus for ControlLM"},
        {"model_ckpt", KeyType::String, "", "base model checkpoint (default: model.ckpt in data_dir)"},
        {"data_dir", KeyType::String, "", "run directory holding the datasets and model (default: this run)", false},

        {"target_seed_node", KeyType::String, "", "entity the TargetKG walk starts from"},
        {"walk_depth", KeyType::Int, "3", "hops up and down from the seed node"},
        {"tail_percentile", KeyType::Double, "75", "per-tail cap percentile for tail balancing"},
        {"control_val_fraction", KeyType::Double, "0.1", "share of ControlKG held out for validation"},
        {"control_ppl_percentile", KeyType::Double, "95", "drop control prompts above this base-PPL percentile"},
        {"chunk_len", KeyType::Int, "32", "ControlLM chunk length in tokens (at most max_seq_len)"},
        {"lm_eval_fraction", KeyType::Double, "0.1", "share of ControlLM chunks held out for evaluation"},

        {"n_layers", KeyType::Int, "4", "toy model depth"},
        {"d_model", KeyType::Int, "128", "toy model width"},
        {"n_heads", KeyType::Int, "4", "attention heads"},
        {"max_seq_len", KeyType::Int, "32", "longest sequence the model accepts"},
        {"vocab_min_count", KeyType::Int, "1", "minimum corpus count for a whole-word token"},
        {"pretrain_steps", KeyType::Int, "3000", "maximum pretraining steps"},
        {"pretrain_lr", KeyType::Double, "0.003", "pretraining learning rate"},
        {"pretrain_kg_batch", KeyType::Int, "64", "KG prompts per pretraining step"},
        {"pretrain_lm_batch", KeyType::Int, "8", "LM chunks per pretraining step"},
        {"memorization_ppl", KeyType::Double, "2.0", "tail PPL the base model must get below"},
        {"pretrain_stop_ppl", KeyType::Double, "1.05", "stop pretraining once every check group is at or below this"},

        {"granularity", KeyType::String, "weight", "weight or neuron"},
        {"layer_fraction", KeyType::Double, "0.5", "share of top blocks whose dense weights are masked"},
        {"init_prob", KeyType::Double, "0.45", "initial sigmoid(logit) of every unit"},
        {"tau", KeyType::Double, "1.0", "concrete temperature"},
        {"tau_end", KeyType::OptDouble, "none", "final temperature for linear annealing (none: constant)"},
        {"noise_mode", KeyType::String, "per_step", "per_step or per_example noise sampling"},

        {"lambda1", KeyType::Double, "1.5", "suppression weight"},
        {"lambda2", KeyType::Double, "1.0", "ControlKG maintenance weight"},
        {"lambda3", KeyType::Double, "1.0", "ControlLM maintenance weight"},
        {"lambda4", KeyType::OptDouble, "none", "constant sparsity weight (overrides start/end)"},
        {"lambda4_start", KeyType::Double, "2.0", "sparsity weight before the ramp"},
        {"lambda4_end", KeyType::Double, "3.0", "sparsity weight at the last step"},
        {"lambda4_ramp_fraction", KeyType::Double, "0.5", "share of training before the sparsity ramp"},
        {"lambda5", KeyType::Double, "0.0", "expression weight (used with with_expression)"},
        {"no_suppress", KeyType::Bool, "false", "drop the suppression term"},
        {"no_maintain_kg", KeyType::Bool, "false", "drop the ControlKG maintenance term"},
        {"no_maintain_lm", KeyType::Bool, "false", "drop the ControlLM maintenance term"},
        {"with_expression", KeyType::Bool, "false", "add the expression term on the subnetwork"},

        {"total_steps", KeyType::Int, "2000", "mask training steps"},
        {"lr", KeyType::Double, "0.2", "peak learning rate for the mask logits"},
        {"warmup_fraction", KeyType::Double, "0.1", "share of training spent in linear warmup"},
        {"warmup_start_lr", KeyType::Double, "1e-10", "learning rate at step 0"},
        {"weight_decay", KeyType::Double, "0.0", "decoupled weight decay on the logits"},
        {"control_kg_batch", KeyType::Int, "64", "ControlKG prompts per step"},
        {"control_lm_batch", KeyType::Int, "4", "ControlLM chunks per step"},
        {"eval_every", KeyType::Int, "100", "steps between checkpoint evaluations"},
        {"checkpoint_start_fraction", KeyType::Double, "0.5", "no checkpoints before this share of training"},
        {"selection_table", KeyType::String, "35,5,1;40,7,2;40,10,3;50,15,4",
         "rows of target floor, ControlKG ceiling, ControlLM ceiling"},

        {"baseline_seeds", KeyType::Int, "3", "random baselines per mask"},
        {"compose_masks", KeyType::String, "", "comma-separated mask files to compose"},
        {"compose_mode", KeyType::String, "union", "union, intersection or floral"},
        {"sweep_direction", KeyType::String, "expand", "expand or contract"},
        {"sweep_interval", KeyType::Double, "0.5", "sweep step in percent of maskable units"},
        {"sweep_points", KeyType::Int, "4", "points per sweep seed"},
        {"sweep_seeds", KeyType::Int, "5", "seeds per sweep"},
    };
    return keys;
}

inline const KeySpec* find_key(const std::string& name) {
    for (const auto& k : schema())
        if (k.name == name) return &k;
    return nullptr;
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::optional<long> parse_int(const std::string& s) {
    long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::optional<double> parse_double(const std::string& s) {
    if (s.empty()) return std::nullopt;
    std::size_t used = 0;
    try {
        const double v = std::stod(s, &used);
        if (used != s.size() || !std::isfinite(v)) return std::nullopt;
        return v;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

}  // namespace detail

/// Flat `key = value` experiment configuration. Values are normalised on
/// entry, so the canonical text (and its hash) does not depend on spelling
/// such as "1e-1" versus "0.1".
class ExperimentConfig {
public:
    ExperimentConfig() {
        for (const auto& k : schema()) set(k.name, k.default_value);
    }

    static ExperimentConfig parse(const std::string& text, const std::string& source = "config") {
        ExperimentConfig cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw Error("bad_config", source + ":" + std::to_string(lineno) + ": expected 'key = value'");
            const auto key = detail::trim(line.substr(0, eq));
            try {
                cfg.set(key, detail::trim(line.substr(eq + 1)));
            } catch (const Error& e) {
                throw Error(e.code(), source + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
        return cfg;
    }

    static ExperimentConfig load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw Error("missing_input", "cannot open config file " + path.string());
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse(buf.str(), path.string());
    }

    /// Sets `key` from text, checking its type. Unknown keys are rejected.
    void set(const std::string& key, const std::string& value) {
        const auto* spec = find_key(key);
        if (spec == nullptr) throw Error("bad_config", "unknown config key '" + key + "'");
        const auto bad = [&](const char* what) {
            return Error("bad_config", "config key '" + key + "' expects " + what + ", got '" + value + "'");
        };
        switch (spec->type) {
            case KeyType::String:
                values_[key] = value;
                break;
            case KeyType::Int: {
                const auto v = detail::parse_int(value);
                if (!v) throw bad("an integer");
                values_[key] = std::to_string(*v);
                break;
            }
            case KeyType::Double: {
                const auto v = detail::parse_double(value);
                if (!v) throw bad("a finite number");
                values_[key] = detail::format_double(*v);
                break;
            }
            case KeyType::OptDouble: {
                if (value.empty() || value == "none") {
                    values_[key] = "none";
                    break;
                }
                const auto v = detail::parse_double(value);
                if (!v) throw bad("a finite number or 'none'");
                values_[key] = detail::format_double(*v);
                break;
            }
            case KeyType::Bool:
                if (value == "true" || value == "1" || value == "yes")
                    values_[key] = "true";
                else if (value == "false" || value == "0" || value == "no")
                    values_[key] = "false";
                else
                    throw bad("true or false");
                break;
        }
    }

    const std::string& str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw Error("bad_config", "unknown config key '" + key + "'");
        return it->second;
    }
    long integer(const std::string& key) const { return *detail::parse_int(str(key)); }
    double real(const std::string& key) const { return *detail::parse_double(str(key)); }
    std::optional<double> optional_real(const std::string& key) const {
        const auto& s = str(key);
        if (s == "none") return std::nullopt;
        return detail::parse_double(s);
    }
    bool flag(const std::string& key) const { return str(key) == "true"; }

    /// Range checks; the error names the first offending key in schema order.
    void validate() const {
        auto check = [](bool ok, const std::string& key, const std::string& why) {
            if (!ok) throw Error("bad_config", "config key '" + key + "': " + why);
        };
        auto positive = [&](const std::string& k) { check(integer(k) > 0, k, "must be positive"); };
        auto fraction = [&](const std::string& k, bool open_low) {
            const double v = real(k);
            check(open_low ? (v > 0.0 && v <= 1.0) : (v >= 0.0 && v <= 1.0), k,
                  open_low ? "must be in (0, 1]" : "must be in [0, 1]");
        };
        auto percentile = [&](const std::string& k) { check(real(k) >= 0.0 && real(k) <= 100.0, k, "must be in [0, 100]"); };
        auto nonneg = [&](const std::string& k) { check(real(k) >= 0.0, k, "must be >= 0"); };
        auto parses = [&](const std::string& k, auto&& parse) {
            try {
                parse(str(k));
            } catch (const Error& e) {
                throw Error("bad_config", "config key '" + k + "': " + e.what());
            }
        };

        check(!str("run_id").empty() && str("run_id").find('/') == std::string::npos, "run_id",
              "must be a non-empty name without '/'");
        positive("walk_depth");
        percentile("tail_percentile");
        check(real("control_val_fraction") >= 0.0 && real("control_val_fraction") < 1.0, "control_val_fraction",
              "must be in [0, 1)");
        percentile("control_ppl_percentile");
        check(integer("chunk_len") >= 2, "chunk_len", "must be >= 2");
        check(real("lm_eval_fraction") > 0.0 && real("lm_eval_fraction") < 1.0, "lm_eval_fraction",
              "must be in (0, 1)");
        check(integer("n_layers") >= 2, "n_layers", "must be >= 2");
        positive("d_model");
        positive("n_heads");
        check(integer("d_model") % integer("n_heads") == 0, "n_heads", "must divide d_model");
        check(integer("max_seq_len") >= 2, "max_seq_len", "must be >= 2");
        check(integer("chunk_len") <= integer("max_seq_len"), "chunk_len", "must not exceed max_seq_len");
        positive("vocab_min_count");
        check(integer("pretrain_steps") >= 0, "pretrain_steps", "must be >= 0");
        check(real("pretrain_lr") > 0.0, "pretrain_lr", "must be positive");
        positive("pretrain_kg_batch");
        positive("pretrain_lm_batch");
        check(real("memorization_ppl") > 1.0, "memorization_ppl", "must be > 1");
        check(real("pretrain_stop_ppl") >= 1.0, "pretrain_stop_ppl", "must be >= 1");
        parses("granularity", [](const std::string& v) { mask::parse_granularity(v); });
        fraction("layer_fraction", true);
        check(real("init_prob") > 0.0 && real("init_prob") < 1.0, "init_prob", "must be in (0, 1)");
        check(real("tau") > 0.0, "tau", "must be positive");
        if (auto t = optional_real("tau_end")) check(*t > 0.0, "tau_end", "must be positive");
        parses("noise_mode", [](const std::string& v) { train::parse_noise_mode(v); });
        for (const char* k : {"lambda1", "lambda2", "lambda3", "lambda4_start", "lambda4_end", "lambda5"}) nonneg(k);
        if (auto l = optional_real("lambda4")) check(*l >= 0.0, "lambda4", "must be >= 0");
        fraction("lambda4_ramp_fraction", false);
        positive("total_steps");
        check(real("lr") > 0.0, "lr", "must be positive");
        fraction("warmup_fraction", false);
        nonneg("warmup_start_lr");
        nonneg("weight_decay");
        positive("control_kg_batch");
        positive("control_lm_batch");
        positive("eval_every");
        fraction("checkpoint_start_fraction", false);
        selection_table();
        positive("baseline_seeds");
        parses("compose_mode", [](const std::string& v) { analysis::parse_compose_mode(v); });
        parses("sweep_direction", [](const std::string& v) { analysis::parse_sweep_direction(v); });
        check(real("sweep_interval") > 0.0, "sweep_interval", "must be positive");
        check(integer("sweep_points") >= 0, "sweep_points", "must be >= 0");
        positive("sweep_seeds");
    }

    /// Semantic keys as sorted `key = value` lines.
    std::string canonical() const {
        std::string out;
        for (const auto& [k, v] : values_)
            if (find_key(k)->semantic) out += k + " = " + v + "\n";
        return out;
    }
    std::string hash() const { return sha256_hex(canonical()); }

    /// Full text (including location keys) in schema order, suitable for
    /// writing back to a config file.
    std::string text() const {
        std::string out;
        for (const auto& k : schema()) out += k.name + " = " + values_.at(k.name) + "\n";
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : values_) j[k] = v;
        return j;
    }

    // Typed views for the library modules.

    model::ModelSpec model_spec(int vocab_size) const {
        model::ModelSpec s;
        s.n_layers = static_cast<int>(integer("n_layers"));
        s.d_model = static_cast<int>(integer("d_model"));
        s.n_heads = static_cast<int>(integer("n_heads"));
        s.vocab_size = vocab_size;
        s.max_seq_len = static_cast<int>(integer("max_seq_len"));
        return s;
    }

    model::PretrainConfig pretrain_config() const {
        model::PretrainConfig p;
        p.max_steps = integer("pretrain_steps");
        p.lr = real("pretrain_lr");
        p.kg_batch = static_cast<std::size_t>(integer("pretrain_kg_batch"));
        p.lm_batch = static_cast<std::size_t>(integer("pretrain_lm_batch"));
        p.seed = static_cast<std::uint64_t>(integer("seed"));
        p.memorization_ppl = real("memorization_ppl");
        p.stop_ppl = real("pretrain_stop_ppl");
        return p;
    }

    mask::MaskScope mask_scope() const { return {real("layer_fraction")}; }
    mask::Granularity granularity() const { return mask::parse_granularity(str("granularity")); }

    objectives::LossWeights loss_weights() const {
        objectives::LossWeights w;
        w.lambda1 = real("lambda1");
        w.lambda2 = real("lambda2");
        w.lambda3 = real("lambda3");
        w.lambda4_start = real("lambda4_start");
        w.lambda4_end = real("lambda4_end");
        if (auto l4 = optional_real("lambda4")) w.lambda4_start = w.lambda4_end = *l4;
        w.lambda4_ramp_fraction = real("lambda4_ramp_fraction");
        w.lambda5 = real("lambda5");
        return w;
    }

    objectives::Ablation ablation() const {
        return {flag("no_suppress"), flag("no_maintain_kg"), flag("no_maintain_lm"), flag("with_expression")};
    }

    train::TrainConfig train_config() const {
        train::TrainConfig t;
        t.total_steps = integer("total_steps");
        t.lr = real("lr");
        t.warmup_fraction = real("warmup_fraction");
        t.warmup_start_lr = real("warmup_start_lr");
        t.weight_decay = real("weight_decay");
        t.control_kg_batch = static_cast<std::size_t>(integer("control_kg_batch"));
        t.control_lm_batch = static_cast<std::size_t>(integer("control_lm_batch"));
        t.eval_every = integer("eval_every");
        t.checkpoint_start_fraction = real("checkpoint_start_fraction");
        t.seed = static_cast<std::uint64_t>(integer("seed"));
        t.noise_mode = train::parse_noise_mode(str("noise_mode"));
        return t;
    }

    train::SelectionTable selection_table() const {
        train::SelectionTable table;
        table.rows.clear();
        std::istringstream rows(str("selection_table"));
        std::string row;
        while (std::getline(rows, row, ';')) {
            std::istringstream cells(row);
            std::string cell;
            std::vector<double> v;
            while (std::getline(cells, cell, ',')) {
                const auto d = detail::parse_double(detail::trim(cell));
                if (!d) throw Error("bad_config", "config key 'selection_table': bad number '" + cell + "'");
                v.push_back(*d);
            }
            if (v.size() != 3)
                throw Error("bad_config", "config key 'selection_table': each row needs floor,ceiling,ceiling");
            table.rows.push_back({v[0], v[1], v[2]});
        }
        if (table.rows.empty()) throw Error("bad_config", "config key 'selection_table': no rows");
        return table;
    }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace kcs::cli
