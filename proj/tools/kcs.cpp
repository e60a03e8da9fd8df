#include <algorithm>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kcs/cli/config.hpp"
#include "kcs/cli/workbench.hpp"

namespace {

int fail(const std::string& command, const std::string& code, const std::string& message, int status) {
    std::cerr << nlohmann::json{{"error", {{"code", code}, {"message", message}, {"command", command}}}}.dump() << '\n';
    return status;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    for (char c : s) {
        if (c == ',') {
            if (!item.empty()) out.push_back(item);
            item.clear();
        } else {
            item.push_back(c);
        }
    }
    if (!item.empty()) out.push_back(item);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace kcs;
    CLI::App app{"Knowledge-critical subnetwork workbench"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    app.add_option("--config", config_path, "flat key = value config file");
    std::map<std::string, std::string> overrides;
    std::map<std::string, CLI::Option*> key_options;
    auto* group = app.add_option_group("Config keys", "override any config key");
    for (const auto& k : cli::schema()) {
        std::string flags = "--" + k.name;
        if (k.name.find('_') != std::string::npos) {
            std::string dashed = k.name;
            std::replace(dashed.begin(), dashed.end(), '_', '-');
            flags += ",--" + dashed;
        }
        key_options[k.name] = group->add_option(flags, overrides[k.name], k.help + " [" + k.default_value + "]");
    }
    std::vector<std::string> sets;
    app.add_option("--set", sets, "override as key=value (repeatable)");

    std::string mask_path, name = "main";
    std::vector<std::string> masks;
    std::map<std::string, CLI::App*> sub;
    auto add = [&](const std::string& cmd, const std::string& help) { return sub[cmd] = app.add_subcommand(cmd, help); };

    add("sample-kg", "sample TargetKG by a random walk from target_seed_node");
    add("build-control", "build the entity-disjoint ControlKG");
    add("train-lm", "build the vocabulary and pretrain the toy model");
    add("verbalize", "render TargetKG and ControlKG prompts with the best template");
    add("train-mask", "learn a knowledge-critical mask and select a checkpoint");
    auto* ev = add("eval", "evaluate a mask (default: the selected mask)");
    ev->add_option("--mask", mask_path, "mask file");
    ev->add_option("--name", name, "name of the evaluation outputs");
    auto* bl = add("baseline", "random masks matching a mask's per-module counts");
    bl->add_option("--match", mask_path, "reference mask (default: the selected mask)");
    bl->add_option("--name", name, "name of the baseline outputs");
    auto* seeds_opt = bl->add_option("--seeds", overrides["baseline_seeds"], "number of random seeds");
    auto* co = add("compose", "compose masks (union, intersection, floral)");
    co->add_option("--masks", masks, "mask files (default: compose_masks)")->delimiter(',');
    auto* mode_opt = co->add_option("--mode", overrides["compose_mode"], "union, intersection or floral");
    co->add_option("--name", name, "name of the composed mask");
    auto* an = add("analyze", "density maps and Jaccard overlaps of masks");
    an->add_option("--masks", masks, "mask files (default: the selected mask)")->delimiter(',');
    an->add_option("--name", name, "name of the analysis outputs");
    auto* sw = add("sweep", "expand or contract a mask at random");
    sw->add_option("--mask", mask_path, "mask file (default: the selected mask)");
    sw->add_option("--name", name, "name of the sweep outputs");
    add("report", "summarize the run in markdown");

    std::string command = "kcs";
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(command, "usage", e.what(), 2);
    }
    for (const auto& [cmd, s] : sub)
        if (s->parsed()) command = cmd;

    try {
        auto cfg = config_path.empty() ? cli::ExperimentConfig{} : cli::ExperimentConfig::load(config_path);
        for (const auto& [key, opt] : key_options)
            if (opt->count() > 0) cfg.set(key, overrides[key]);
        if (seeds_opt->count() > 0) cfg.set("baseline_seeds", overrides["baseline_seeds"]);
        if (mode_opt->count() > 0) cfg.set("compose_mode", overrides["compose_mode"]);
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw Error("bad_config", "--set expects key=value, got '" + kv + "'");
            cfg.set(cli::detail::trim(kv.substr(0, eq)), cli::detail::trim(kv.substr(eq + 1)));
        }
        cfg.validate();

        const bool named = command == "eval" || command == "baseline" || command == "compose" || command == "analyze" ||
                           command == "sweep";
        cli::RunContext run(cfg, command, named ? name : "");
        nlohmann::json manifest;
        if (command == "sample-kg") manifest = cli::cmd_sample_kg(run);
        else if (command == "build-control") manifest = cli::cmd_build_control(run);
        else if (command == "train-lm") manifest = cli::cmd_train_lm(run);
        else if (command == "verbalize") manifest = cli::cmd_verbalize(run);
        else if (command == "train-mask") manifest = cli::cmd_train_mask(run);
        else if (command == "eval") manifest = cli::cmd_eval(run, mask_path, name);
        else if (command == "baseline") manifest = cli::cmd_baseline(run, mask_path, name);
        else if (command == "compose")
            manifest = cli::cmd_compose(run, masks.empty() ? split_list(cfg.str("compose_masks")) : masks, name);
        else if (command == "analyze")
            manifest = cli::cmd_analyze(
                run, masks.empty() ? std::vector<std::string>{(run.data_dir() / cli::kSelectedMask).string()} : masks,
                name);
        else if (command == "sweep") manifest = cli::cmd_sweep(run, mask_path, name);
        else if (command == "report") manifest = cli::cmd_report(run);

        std::cout << nlohmann::json{{"status", "ok"},
                                    {"command", command},
                                    {"run_dir", run.dir().string()},
                                    {"artifacts", manifest.at("artifacts")}}
                         .dump(2)
                  << '\n';
        return 0;
    } catch (const Error& e) {
        return fail(command, e.code(), e.what(), e.code() == "bad_config" ? 2 : 1);
    } catch (const std::exception& e) {
        return fail(command, "internal", e.what(), 1);
    }
}
