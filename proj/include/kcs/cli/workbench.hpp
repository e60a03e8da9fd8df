#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kcs/analysis/output.hpp"
#include "kcs/analysis/subnet.hpp"
#include "kcs/cli/config.hpp"
#include "kcs/core/error.hpp"
#include "kcs/core/hash.hpp"
#include "kcs/eval/evaluator.hpp"
#include "kcs/kg/pipeline.hpp"
#include "kcs/kg/triplet.hpp"
#include "kcs/kg/verbalize.hpp"
#include "kcs/mask/binary_mask.hpp"
#include "kcs/mask/mask_io.hpp"
#include "kcs/model/handle.hpp"
#include "kcs/model/pretrain.hpp"
#include "kcs/train/mask_trainer.hpp"

namespace kcs::cli {

namespace fs = std::filesystem;

// Artifact names inside a run directory.
inline constexpr const char* kTargetTriplets = "target_kg.tsv";
inline constexpr const char* kControlTrainTriplets = "control_kg.train.tsv";
inline constexpr const char* kControlValTriplets = "control_kg.val.tsv";
inline constexpr const char* kModelFile = "model.ckpt";
inline constexpr const char* kChunkFile = "lm_chunks.json";
inline constexpr const char* kTargetRecords = "target.jsonl";
inline constexpr const char* kControlTrainRecords = "control.train.jsonl";
inline constexpr const char* kControlValRecords = "control.val.jsonl";
inline constexpr const char* kSelectedMask = "mask.bin";
inline constexpr const char* kSelectedReport = "report.json";

/// One command invocation writing into output_dir/run_id. Outputs are
/// write-once; inputs and outputs are hashed into manifest.{command}.json.
class RunContext {
public:
    RunContext(ExperimentConfig cfg, std::string command, std::string tag = "")
        : cfg_(std::move(cfg)), command_(std::move(command)), tag_(std::move(tag)) {
        cfg_.validate();
        dir_ = fs::path(cfg_.str("output_dir")) / cfg_.str("run_id");
        fs::create_directories(dir_);
        manifest_path_ = dir_ / ("manifest." + command_ + (tag_.empty() ? "" : "." + tag_) + ".json");
        if (fs::exists(manifest_path_))
            throw Error("exists", manifest_path_.string() + " already exists; outputs are write-once");
    }

    const ExperimentConfig& config() const { return cfg_; }
    const fs::path& dir() const { return dir_; }
    const std::string& command() const { return command_; }

    fs::path data_dir() const {
        const auto& d = cfg_.str("data_dir");
        return d.empty() ? dir_ : fs::path(d);
    }

    /// An existing input file; recorded with its hash.
    fs::path input(const fs::path& path) {
        if (!fs::is_regular_file(path)) throw Error("missing_input", "missing input artifact " + path.string());
        inputs_[path.string()] = sha256_file(path);
        return path;
    }
    /// A pipeline artifact read from the data directory.
    fs::path artifact_in(const std::string& name) { return input(data_dir() / name); }
    /// An input file named by a config key, which must be set.
    fs::path keyed_input(const std::string& key) {
        const auto& p = cfg_.str(key);
        if (p.empty()) throw Error("bad_config", "config key '" + key + "' is required by " + command_);
        return input(p);
    }

    /// Reserves an output path under the run directory. Refuses to overwrite.
    fs::path output(const fs::path& relative) {
        const auto path = dir_ / relative;
        if (fs::exists(path)) throw Error("exists", path.string() + " already exists; outputs are write-once");
        fs::create_directories(path.parent_path());
        outputs_.push_back(relative);
        return path;
    }
    void require_absent(const fs::path& relative) const {
        if (fs::exists(dir_ / relative))
            throw Error("exists", (dir_ / relative).string() + " already exists; outputs are write-once");
    }

    void write_json(const fs::path& relative, const nlohmann::json& j) {
        std::ofstream out(output(relative));
        out << j.dump(2) << '\n';
        if (!out) throw Error("io", "cannot write " + (dir_ / relative).string());
    }

    nlohmann::json& details() { return details_; }
    std::vector<std::uint64_t>& seeds() { return seeds_; }

    nlohmann::json finish() {
        nlohmann::json m;
        m["command"] = command_;
        if (!tag_.empty()) m["name"] = tag_;
        m["config"] = cfg_.to_json();
        m["config_hash"] = cfg_.hash();
        m["seed"] = cfg_.integer("seed");
        m["seeds"] = seeds_;
        m["inputs"] = inputs_;
        nlohmann::json arts = nlohmann::json::object();
        for (const auto& rel : outputs_) arts[rel.generic_string()] = sha256_file(dir_ / rel);
        m["artifacts"] = arts;
        m["details"] = details_;
        std::ofstream out(manifest_path_);
        out << m.dump(2) << '\n';
        if (!out) throw Error("io", "cannot write " + manifest_path_.string());
        return m;
    }

private:
    ExperimentConfig cfg_;
    std::string command_;
    std::string tag_;
    fs::path dir_;
    fs::path manifest_path_;
    std::map<std::string, std::string> inputs_;
    std::vector<fs::path> outputs_;
    std::vector<std::uint64_t> seeds_;
    nlohmann::json details_ = nlohmann::json::object();
};

namespace detail {

inline std::vector<kg::KnowledgeTriplet> as_vector(const kg::TripletSet& s) { return {s.begin(), s.end()}; }

inline kg::TripletSet read_triplet_set(const fs::path& p) {
    auto v = kg::read_triplets(p);
    return {v.begin(), v.end()};
}

inline std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("missing_input", "cannot open " + p.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline nlohmann::json read_json(const fs::path& p) {
    try {
        return nlohmann::json::parse(read_text(p));
    } catch (const nlohmann::json::exception& e) {
        throw Error("bad_input", p.string() + ": " + e.what());
    }
}

inline kg::Graph load_graph(RunContext& run) {
    auto edges = kg::read_triplets(run.keyed_input("graph_file"));
    std::map<std::string, std::string> aliases;
    if (!run.config().str("alias_file").empty()) aliases = kg::read_aliases(run.keyed_input("alias_file"));
    return kg::Graph(std::move(edges), std::move(aliases));
}

inline std::vector<kg::Template> load_templates(RunContext& run, const std::string& key) {
    auto t = kg::read_templates(run.keyed_input(key));
    require(!t.empty(), "bad_input", "config key '" + key + "' names a file with no templates");
    return t;
}

inline model::ModelHandle load_model(RunContext& run) {
    const auto& p = run.config().str("model_ckpt");
    return model::load_checkpoint<float>(p.empty() ? run.artifact_in(kModelFile) : run.input(p));
}

inline nlohmann::json chunks_to_json(const kg::LMChunkSet& s) {
    return s.chunks;
}

inline std::pair<kg::LMChunkSet, kg::LMChunkSet> load_chunks(const fs::path& p) {
    const auto j = read_json(p);
    kg::LMChunkSet train{j.at("train").get<std::vector<std::vector<text::TokenId>>>(), j.at("chunk_len")};
    kg::LMChunkSet eval{j.at("eval").get<std::vector<std::vector<text::TokenId>>>(), j.at("chunk_len")};
    return {std::move(train), std::move(eval)};
}

inline train::MaskDatasets load_datasets(RunContext& run) {
    train::MaskDatasets d;
    d.target = kg::read_records(run.artifact_in(kTargetRecords));
    d.control = kg::read_records(run.artifact_in(kControlTrainRecords));
    d.control_eval = kg::read_records(run.artifact_in(kControlValRecords));
    std::tie(d.lm, d.lm_eval) = load_chunks(run.artifact_in(kChunkFile));
    return d;
}

/// The evaluation sets a mask run reports on (the same ones its checkpoints
/// are scored with).
inline std::vector<eval::EvalSet> report_sets(const train::MaskDatasets& d) {
    return eval::standard_sets(d.target, d.control_eval.empty() ? d.control : d.control_eval,
                               d.lm_eval.chunks.empty() ? d.lm : d.lm_eval);
}

inline eval::CriteriaReport evaluate(const eval::EvalContext<float>& ctx, const mask::BinaryMask& m,
                                     const ExperimentConfig& cfg, std::uint64_t seed) {
    auto r = ctx.evaluate(m);
    r.config_hash = cfg.hash();
    r.seed = seed;
    return r;
}

inline void write_mask_and_report(RunContext& run, const fs::path& mask_rel, const fs::path& report_rel,
                                  const mask::BinaryMask& m, const eval::CriteriaReport& r) {
    mask::write_mask(run.output(mask_rel), m);
    run.write_json(report_rel, r.to_json());
}

inline std::uint64_t seed_of(const ExperimentConfig& cfg) { return static_cast<std::uint64_t>(cfg.integer("seed")); }

/// Seeds used when a command needs several: seed, seed + 1, ...
inline std::vector<std::uint64_t> seed_list(const ExperimentConfig& cfg, long n) {
    std::vector<std::uint64_t> out;
    for (long i = 0; i < n; ++i) out.push_back(seed_of(cfg) + static_cast<std::uint64_t>(i));
    return out;
}

inline std::string label_of(const fs::path& mask_path) {
    auto stem = mask_path.stem().string();
    const auto parent = mask_path.parent_path().filename().string();
    return parent.empty() ? stem : parent + "-" + stem;
}

}  // namespace detail

/// sample-kg: random walk from the seed node, many-to-one filter, tail balancing.
inline nlohmann::json cmd_sample_kg(RunContext& run) {
    const auto& cfg = run.config();
    run.require_absent(kTargetTriplets);
    const auto graph = detail::load_graph(run);
    const auto& seed_node = cfg.str("target_seed_node");
    if (seed_node.empty()) throw Error("bad_config", "config key 'target_seed_node' is required by sample-kg");
    const auto walked = kg::sample_target_kg(graph, seed_node, static_cast<int>(cfg.integer("walk_depth")));
    const auto filtered = kg::filter_many_to_one(walked);
    const auto target = kg::balance_tail_frequency(filtered, cfg.real("tail_percentile"));
    require(!target.empty(), "empty_split", "TargetKG is empty after filtering");
    kg::write_triplets(run.output(kTargetTriplets), target);
    run.details() = {{"walked", walked.size()}, {"after_many_to_one", filtered.size()}, {"target", target.size()}};
    return run.finish();
}

/// build-control: entity-disjoint ControlKG with a seeded validation split.
inline nlohmann::json cmd_build_control(RunContext& run) {
    const auto& cfg = run.config();
    run.require_absent(kControlTrainTriplets);
    const auto graph = detail::load_graph(run);
    const auto target = detail::read_triplet_set(run.artifact_in(kTargetTriplets));
    const auto control = kg::build_control_kg(graph.edges(), {target}, cfg.real("control_val_fraction"),
                                              detail::seed_of(cfg));
    kg::write_triplets(run.output(kControlTrainTriplets), control.train);
    kg::write_triplets(run.output(kControlValTriplets), control.val);
    run.seeds() = {detail::seed_of(cfg)};
    run.details() = {{"train", control.train.size()}, {"val", control.val.size()}};
    return run.finish();
}

/// train-lm: builds the vocabulary, chunks the corpus and pretrains the toy
/// model on every verbalization of the graph plus the LM chunks.
inline nlohmann::json cmd_train_lm(RunContext& run, std::ostream& log = std::clog) {
    const auto& cfg = run.config();
    run.require_absent(kModelFile);
    const auto graph = detail::load_graph(run);
    auto templates = detail::load_templates(run, "template_file");
    std::vector<kg::Template> paraphrases;
    if (!cfg.str("paraphrase_file").empty()) paraphrases = detail::load_templates(run, "paraphrase_file");
    const auto corpus_path = run.keyed_input("corpus_file");
    const auto corpus = detail::read_text(corpus_path);
    const auto target = detail::read_triplet_set(run.artifact_in(kTargetTriplets));
    auto control = detail::read_triplet_set(run.artifact_in(kControlTrainTriplets));
    const auto control_val = detail::read_triplet_set(run.artifact_in(kControlValTriplets));
    control.insert(control_val.begin(), control_val.end());

    std::vector<std::string> texts{corpus};
    for (const auto& t : templates) texts.push_back(t.pattern);
    for (const auto& t : paraphrases) texts.push_back(t.pattern);
    std::vector<std::string> surfaces;
    for (const auto& n : graph.nodes()) surfaces.push_back(graph.surface(n));
    auto vocab = text::Vocabulary::build(texts, surfaces, static_cast<int>(cfg.integer("vocab_min_count")));

    auto all_templates = templates;
    all_templates.insert(all_templates.end(), paraphrases.begin(), paraphrases.end());
    const auto kg_corpus = kg::render_all(detail::as_vector(graph.edges()), all_templates, vocab, graph);
    const auto target_check = kg::render_all(detail::as_vector(target), templates, vocab, graph);
    const auto control_check = kg::render_all(detail::as_vector(control), templates, vocab, graph);
    require(!target_check.empty() && !control_check.empty(), "no_valid_template",
            "no template renders the TargetKG or ControlKG with single-token tails");

    const auto chunks = kg::chunk_control_lm(vocab.encode(corpus), static_cast<int>(cfg.integer("chunk_len")));
    const auto [lm_train, lm_eval] = kg::split_lm_chunks(chunks, cfg.real("lm_eval_fraction"));

    const auto spec = cfg.model_spec(vocab.size());
    spec.validate();
    auto model = model::ModelHandle::random(spec, vocab, detail::seed_of(cfg));
    const auto pcfg = cfg.pretrain_config();
    const auto result = model::pretrain_toy(
        model, kg_corpus, lm_train, pcfg, {target_check, control_check},
        [&](long step, double loss, const std::vector<double>& ppl) {
            if (step % 500 != 0 && !std::isnan(loss)) return;
            log << "[train-lm] step " << step;
            if (!std::isnan(loss)) log << " loss " << loss;
            if (ppl.size() == 2) log << " target_ppl " << ppl[0] << " control_ppl " << ppl[1];
            log << '\n';
        });
    const double lm_ppl = eval::lm_perplexity(model.view(), lm_eval);

    model.metadata()["config_hash"] = cfg.hash();
    model.metadata()["corpus_sha256"] = sha256_file(corpus_path);
    model.metadata()["graph_sha256"] = sha256_file(cfg.str("graph_file"));
    model.metadata()["lm_eval_ppl"] = lm_ppl;
    model::save_checkpoint(model, run.output(kModelFile));
    run.write_json(kChunkFile, {{"chunk_len", chunks.chunk_len},
                                {"train", detail::chunks_to_json(lm_train)},
                                {"eval", detail::chunks_to_json(lm_eval)}});
    run.write_json("pretrain.json", {{"steps", result.steps},
                                     {"target_tail_ppl", result.group_ppl.at(0)},
                                     {"control_tail_ppl", result.group_ppl.at(1)},
                                     {"lm_eval_ppl", lm_ppl},
                                     {"vocab_size", vocab.size()},
                                     {"kg_corpus_prompts", kg_corpus.size()},
                                     {"lm_chunks", chunks.chunks.size()}});
    run.seeds() = {detail::seed_of(cfg)};
    run.details() = {{"steps", result.steps}, {"group_ppl", result.group_ppl}, {"lm_eval_ppl", lm_ppl}};
    return run.finish();
}

/// verbalize: best template per triplet under the base model; ControlKG
/// prompts above the configured PPL percentile are dropped.
inline nlohmann::json cmd_verbalize(RunContext& run) {
    const auto& cfg = run.config();
    run.require_absent(kTargetRecords);
    const auto model = detail::load_model(run);
    const auto graph = detail::load_graph(run);
    const auto templates = detail::load_templates(run, "template_file");
    const auto target = detail::read_triplet_set(run.artifact_in(kTargetTriplets));
    const auto control = detail::read_triplet_set(run.artifact_in(kControlTrainTriplets));
    const auto control_val = detail::read_triplet_set(run.artifact_in(kControlValTriplets));

    const auto view = model.view();
    const kg::TailPplScorer scorer = [&](const std::vector<kg::PromptRecord>& recs) {
        std::vector<double> out;
        for (const auto& s : eval::score_tails(view, std::span<const kg::PromptRecord>(recs)))
            out.push_back(std::exp(-s.logprob));
        return out;
    };
    const double q = cfg.real("control_ppl_percentile");
    const auto t = kg::verbalize_best(detail::as_vector(target), templates, model.vocab(), graph, scorer);
    const auto c = kg::filter_by_ppl(
        kg::verbalize_best(detail::as_vector(control), templates, model.vocab(), graph, scorer), q);
    const auto cv = control_val.empty() ? std::vector<kg::PromptRecord>{}
                                        : kg::filter_by_ppl(kg::verbalize_best(detail::as_vector(control_val),
                                                                               templates, model.vocab(), graph, scorer),
                                                            q);
    kg::write_records(run.output(kTargetRecords), t);
    kg::write_records(run.output(kControlTrainRecords), c);
    kg::write_records(run.output(kControlValRecords), cv);
    run.details() = {{"target", t.size()}, {"control_train", c.size()}, {"control_val", cv.size()}};
    return run.finish();
}

/// train-mask: learns the mask, writes every checkpoint and the selected one.
inline nlohmann::json cmd_train_mask(RunContext& run, std::ostream& log = std::clog) {
    const auto& cfg = run.config();
    run.require_absent("checkpoints");
    run.require_absent(kSelectedMask);
    const auto model = detail::load_model(run);
    const auto data = detail::load_datasets(run);
    const auto table = cfg.selection_table();
    const auto tcfg = cfg.train_config();

    auto state = mask::init_mask(model, cfg.mask_scope(), cfg.real("init_prob"), cfg.granularity(), cfg.real("tau"),
                                 detail::seed_of(cfg));
    state.tau_end = cfg.optional_real("tau_end").value_or(state.tau);

    std::ofstream step_log(run.output("train_log.jsonl"));
    const auto on_step = [&](const train::StepLog& s) {
        const auto& l = s.losses;
        step_log << nlohmann::json{{"step", s.step},           {"lr", s.lr},
                                   {"total", s.total},         {"suppress", l.suppress},
                                   {"maintain_kg", l.maintain_kg}, {"maintain_lm", l.maintain_lm},
                                   {"sparsity", l.sparsity},   {"expression", l.expression}}
                        .dump()
                 << '\n';
        if ((s.step + 1) % 100 == 0)
            log << "[train-mask] step " << s.step + 1 << " loss " << s.total << " suppress " << l.suppress
                << " sparsity_loss " << l.sparsity << '\n';
    };
    const auto on_checkpoint = [&](const train::CheckpointRecord& r) {
        const fs::path dir = fs::path("checkpoints") / std::to_string(r.step);
        detail::write_mask_and_report(run, dir / "mask.bin", dir / "report.json", r.mask, r.report);
        log << "[train-mask] checkpoint " << r.step << " sparsity " << r.report.sparsity << " dPPL target "
            << r.report.delta_ppl(eval::kTargetKG) << " control " << r.report.delta_ppl(eval::kControlKG) << " lm "
            << r.report.delta_ppl(eval::kControlLM) << '\n';
    };
    const nlohmann::json meta = {{"config_hash", cfg.hash()}};
    const auto records =
        train::train_mask(model, data, state, cfg.loss_weights(), cfg.ablation(), tcfg, on_step, on_checkpoint, meta);
    step_log.close();

    const auto sel = train::select_checkpoint(records, table);
    const auto& best = records[sel.index];
    detail::write_mask_and_report(run, kSelectedMask, kSelectedReport, best.mask, best.report);
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : table.rows) rows.push_back({r.target_floor, r.control_kg_ceiling, r.control_lm_ceiling});
    const nlohmann::json selection = {{"step", best.step},
                                      {"row", sel.row ? nlohmann::json(*sel.row) : nlohmann::json(nullptr)},
                                      {"fallback", !sel.row.has_value()},
                                      {"table", rows},
                                      {"checkpoints", records.size()}};
    run.write_json("selection.json", selection);
    run.seeds() = {detail::seed_of(cfg)};
    run.details() = {{"selection", selection}, {"train", tcfg.to_json()}};
    return run.finish();
}

/// eval: CriteriaReport of a mask (default: the selected one), plus paraphrase
/// metrics when a paraphrase file is configured.
inline nlohmann::json cmd_eval(RunContext& run, const std::string& mask_path, const std::string& name) {
    const auto& cfg = run.config();
    const fs::path rel = fs::path("eval") / (name + ".report.json");
    run.require_absent(rel);
    const auto model = detail::load_model(run);
    const auto data = detail::load_datasets(run);
    const auto m = mask::read_mask(mask_path.empty() ? run.artifact_in(kSelectedMask) : run.input(mask_path));
    eval::EvalContext<float> ctx(model.params(), m.scope().first_layer(model.spec().n_layers),
                                 detail::report_sets(data));
    const auto report = detail::evaluate(ctx, m, cfg, detail::seed_of(cfg));
    run.write_json(rel, report.to_json());

    if (!cfg.str("paraphrase_file").empty()) {
        const auto graph = detail::load_graph(run);
        const auto paraphrases = detail::load_templates(run, "paraphrase_file");
        std::map<std::string, std::vector<kg::KnowledgeTriplet>> sets;
        for (const auto& r : data.target) sets[eval::kTargetKG].push_back(r.triplet);
        for (const auto& r : data.control_eval.empty() ? data.control : data.control_eval)
            sets[eval::kControlKG].push_back(r.triplet);
        const auto para = eval::paraphrase_eval(model, m, sets, paraphrases, graph);
        run.write_json(fs::path("eval") / (name + ".paraphrase.json"), para.to_json());
    }
    run.seeds() = {detail::seed_of(cfg)};
    run.details() = {{"mask", m.metadata()}, {"name", name}};
    return run.finish();
}

/// baseline: random masks with the per-module counts of a reference mask.
inline nlohmann::json cmd_baseline(RunContext& run, const std::string& match_path, const std::string& name) {
    const auto& cfg = run.config();
    const fs::path dir = fs::path("baseline") / name;
    run.require_absent(dir);
    const auto model = detail::load_model(run);
    const auto data = detail::load_datasets(run);
    const auto ref = mask::read_mask(match_path.empty() ? run.artifact_in(kSelectedMask) : run.input(match_path));
    eval::EvalContext<float> ctx(model.params(), ref.scope().first_layer(model.spec().n_layers),
                                 detail::report_sets(data));
    const auto seeds = detail::seed_list(cfg, cfg.integer("baseline_seeds"));

    std::map<std::string, double> mean;
    nlohmann::json per_seed = nlohmann::json::array();
    for (auto seed : seeds) {
        const auto rnd = mask::random_mask_like(ref, seed);
        for (std::size_t m = 0; m < ref.modules().size(); ++m)
            require(rnd.set_units(m) == ref.set_units(m), "baseline_mismatch",
                    "random mask count differs at " + ref.modules()[m].path);
        const auto report = detail::evaluate(ctx, rnd, cfg, seed);
        const fs::path sd = dir / std::to_string(seed);
        detail::write_mask_and_report(run, sd / "mask.bin", sd / "report.json", rnd, report);
        for (const auto& [ds, metrics] : report.datasets) mean[ds] += metrics.delta_ppl / static_cast<double>(seeds.size());
        per_seed.push_back({{"seed", seed}, {"sparsity", report.sparsity}});
    }
    nlohmann::json summary = {{"reference", ref.metadata()},
                              {"reference_sparsity", 100.0 * ref.sparsity()},
                              {"seeds", seeds},
                              {"mean_delta_ppl", mean},
                              {"per_seed", per_seed}};
    run.write_json(dir / "summary.json", summary);
    run.seeds() = seeds;
    run.details() = {{"name", name}, {"mean_delta_ppl", mean}};
    return run.finish();
}

/// compose: union, intersection or floral composition of aligned masks.
inline nlohmann::json cmd_compose(RunContext& run, const std::vector<std::string>& mask_paths, const std::string& name) {
    const auto& cfg = run.config();
    const fs::path base = fs::path("compose") / name;
    run.require_absent(base.string() + ".mask.bin");
    require(!mask_paths.empty(), "bad_config", "config key 'compose_masks' lists no masks");
    const auto model = detail::load_model(run);
    const auto data = detail::load_datasets(run);
    analysis::CompositionSpec spec;
    spec.mode = analysis::parse_compose_mode(cfg.str("compose_mode"));
    for (const auto& p : mask_paths) spec.masks.push_back(mask::read_mask(run.input(p)));
    const auto composed = analysis::compose(spec);
    eval::EvalContext<float> ctx(model.params(), composed.scope().first_layer(model.spec().n_layers),
                                 detail::report_sets(data));
    const auto report = detail::evaluate(ctx, composed, cfg, detail::seed_of(cfg));
    detail::write_mask_and_report(run, base.string() + ".mask.bin", base.string() + ".report.json", composed, report);

    nlohmann::json sources = nlohmann::json::array();
    for (std::size_t i = 0; i < spec.masks.size(); ++i)
        sources.push_back({{"path", mask_paths[i]},
                           {"report", detail::evaluate(ctx, spec.masks[i], cfg, detail::seed_of(cfg)).to_json()}});
    run.write_json(base.string() + ".sources.json", sources);
    run.details() = {{"mode", cfg.str("compose_mode")}, {"masks", mask_paths}, {"sparsity", report.sparsity}};
    return run.finish();
}

/// analyze: density maps of each mask and Jaccard overlaps between them.
inline nlohmann::json cmd_analyze(RunContext& run, const std::vector<std::string>& mask_paths, const std::string& name) {
    const auto& cfg = run.config();
    require(!mask_paths.empty(), "bad_config", "analyze needs at least one mask");
    const auto& id = cfg.str("run_id");
    const fs::path dir = "analysis";
    const auto stem = [&](const std::string& analysis) { return (dir / (id + "." + analysis)).string(); };
    run.require_absent(stem("density_" + name + "-0") + ".csv");

    std::vector<mask::BinaryMask> masks;
    std::vector<std::string> labels;
    for (const auto& p : mask_paths) {
        masks.push_back(mask::read_mask(run.input(p)));
        labels.push_back(detail::label_of(p));
    }
    const int heads = static_cast<int>(cfg.integer("n_heads"));
    nlohmann::json densities = nlohmann::json::array();
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const auto map = analysis::density_map(masks[i], heads);
        const auto base = stem("density_" + name + "-" + std::to_string(i));
        analysis::write_density_csv(run.output(base + ".csv"), map);
        analysis::write_density_svg(run.output(base + ".svg"), map);
        densities.push_back({{"mask", mask_paths[i]}, {"weighted_density", map.weighted_density()}});
    }
    nlohmann::json out = {{"densities", densities}};
    if (masks.size() >= 2) {
        std::vector<std::vector<double>> matrix(masks.size(), std::vector<double>(masks.size()));
        std::map<std::string, std::map<std::string, double>> per_module;
        for (std::size_t i = 0; i < masks.size(); ++i)
            for (std::size_t j = 0; j < masks.size(); ++j) {
                matrix[i][j] = analysis::jaccard(masks[i], masks[j]);
                if (i < j)
                    per_module[std::to_string(i) + "-" + std::to_string(j)] =
                        analysis::jaccard_per_module(masks[i], masks[j]);
            }
        analysis::write_jaccard_csv(run.output(stem("jaccard_" + name) + ".csv"), labels, matrix);
        analysis::write_module_jaccard_csv(run.output(stem("jaccard_modules_" + name) + ".csv"), per_module);
        out["jaccard"] = matrix;
    }
    out["labels"] = labels;
    run.write_json(stem("summary_" + name) + ".json", out);
    run.details() = out;
    return run.finish();
}

/// sweep: expand or contract a mask at random and compare against matched
/// random baselines at each point.
inline nlohmann::json cmd_sweep(RunContext& run, const std::string& mask_path, const std::string& name) {
    const auto& cfg = run.config();
    const auto base = (fs::path("analysis") / (cfg.str("run_id") + ".sweep_" + name)).string();
    run.require_absent(base + ".csv");
    const auto model = detail::load_model(run);
    const auto data = detail::load_datasets(run);
    const auto m = mask::read_mask(mask_path.empty() ? run.artifact_in(kSelectedMask) : run.input(mask_path));
    eval::EvalContext<float> ctx(model.params(), m.scope().first_layer(model.spec().n_layers),
                                 detail::report_sets(data));
    const auto seeds = detail::seed_list(cfg, cfg.integer("sweep_seeds"));
    const auto result = analysis::sensitivity_sweep(ctx, m, analysis::parse_sweep_direction(cfg.str("sweep_direction")),
                                                    cfg.real("sweep_interval"),
                                                    static_cast<int>(cfg.integer("sweep_points")), seeds, true);
    analysis::write_sweep_csv(run.output(base + ".csv"), result);
    analysis::write_sweep_svg(run.output(base + ".svg"), result);
    nlohmann::json points = nlohmann::json::array();
    for (const auto& p : result.points)
        points.push_back({{"seed", p.seed},
                          {"point", p.point},
                          {"requested_percent", p.requested_percent},
                          {"changed_units", p.changed_units},
                          {"report", p.report.to_json()},
                          {"baseline", p.baseline ? p.baseline->to_json() : nlohmann::json(nullptr)}});
    const auto reference = detail::evaluate(ctx, m, cfg, detail::seed_of(cfg));
    run.write_json(base + ".json", {{"direction", cfg.str("sweep_direction")},
                                    {"reference", reference.to_json()},
                                    {"points", points},
                                    {"warnings", result.warnings}});
    for (const auto& w : result.warnings) std::clog << "[sweep] warning: " << w << '\n';
    run.seeds() = seeds;
    run.details() = {{"points", result.points.size()}, {"warnings", result.warnings}};
    return run.finish();
}

/// report: gathers the run's reports into one markdown summary.
inline nlohmann::json cmd_report(RunContext& run) {
    const auto& cfg = run.config();
    const auto& id = cfg.str("run_id");
    const fs::path md_rel = id + ".report.md";
    run.require_absent(md_rel);
    const auto dir = run.dir();

    std::ostringstream md;
    nlohmann::json summary = nlohmann::json::object();
    const auto table = [&](const eval::CriteriaReport& r) {
        md << "| dataset | base PPL | remaining PPL | dPPL | dRank | dLogProb |\n|---|---|---|---|---|---|\n";
        for (const auto& [ds, m] : r.datasets) {
            md << "| " << ds << " | " << m.base_ppl << " | " << m.remaining_ppl << " | " << m.delta_ppl << " | ";
            md << (m.delta_rank ? std::to_string(*m.delta_rank) : "") << " | "
               << (m.delta_logprob ? std::to_string(*m.delta_logprob) : "") << " |\n";
        }
        md << '\n';
    };

    md << "# Run " << id << "\n\nconfig hash `" << cfg.hash() << "`\n\n";
    if (fs::exists(dir / "pretrain.json")) {
        const auto p = detail::read_json(run.input(dir / "pretrain.json"));
        summary["pretrain"] = p;
        md << "## Base model\n\n" << "pretraining steps " << p.at("steps") << ", TargetKG tail PPL "
           << p.at("target_tail_ppl") << ", ControlKG tail PPL " << p.at("control_tail_ppl") << ", held-out LM PPL "
           << p.at("lm_eval_ppl") << "\n\n";
    }
    if (fs::exists(dir / kSelectedReport)) {
        const auto r = eval::CriteriaReport::from_json(detail::read_json(run.input(dir / kSelectedReport)));
        summary["selected"] = r.to_json();
        md << "## Selected mask\n\nsparsity " << r.sparsity << "%";
        if (fs::exists(dir / "selection.json")) {
            const auto s = detail::read_json(run.input(dir / "selection.json"));
            summary["selection"] = s;
            md << ", step " << s.at("step")
               << (s.at("row").is_null() ? ", no selection row passed (last checkpoint)"
                                         : ", selection row " + std::to_string(s.at("row").get<int>() + 1));
        }
        md << "\n\n";
        table(r);
    }
    if (fs::is_directory(dir / "baseline")) {
        md << "## Random baselines\n\n| name | reference sparsity | TargetKG dPPL | ControlKG dPPL | ControlLM dPPL |\n"
              "|---|---|---|---|---|\n";
        std::vector<fs::path> names;
        for (const auto& e : fs::directory_iterator(dir / "baseline")) names.push_back(e.path());
        std::sort(names.begin(), names.end());
        for (const auto& p : names) {
            if (!fs::exists(p / "summary.json")) continue;
            const auto s = detail::read_json(run.input(p / "summary.json"));
            summary["baselines"][p.filename().string()] = s;
            const auto& mean = s.at("mean_delta_ppl");
            md << "| " << p.filename().string() << " | " << s.at("reference_sparsity") << " | "
               << mean.value(eval::kTargetKG, 0.0) << " | " << mean.value(eval::kControlKG, 0.0) << " | "
               << mean.value(eval::kControlLM, 0.0) << " |\n";
        }
        md << '\n';
    }
    if (fs::is_directory(dir / "eval")) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir / "eval")) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& p : files) {
            const auto fname = p.filename().string();
            if (fname.ends_with(".report.json")) {
                const auto r = eval::CriteriaReport::from_json(detail::read_json(run.input(p)));
                const auto n = fname.substr(0, fname.size() - std::string(".report.json").size());
                summary["eval"][n] = r.to_json();
                md << "## Evaluation " << n << "\n\nsparsity " << r.sparsity << "%\n\n";
                table(r);
            } else if (fname.ends_with(".paraphrase.json")) {
                const auto j = detail::read_json(run.input(p));
                const auto n = fname.substr(0, fname.size() - std::string(".paraphrase.json").size());
                summary["paraphrase"][n] = j;
                md << "## Paraphrases " << n << "\n\n| dataset | dPPL over all paraphrase prompts |\n|---|---|\n";
                if (j.contains("aggregate"))
                    for (const auto& [ds, m] : j.at("aggregate").items())
                        md << "| " << ds << " | " << m.at("delta_ppl") << " |\n";
                md << '\n';
            }
        }
    }
    std::ofstream out(run.output(md_rel));
    out << md.str();
    out.close();
    run.write_json(id + ".summary.json", summary);
    return run.finish();
}

}  // namespace kcs::cli
