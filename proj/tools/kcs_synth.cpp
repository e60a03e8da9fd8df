#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "kcs/cli/config.hpp"
#include "kcs/core/error.hpp"
#include "kcs/kg/triplet.hpp"
#include "kcs/kg/verbalize.hpp"
#include "kcs/synth/world.hpp"

// Writes a synthetic world (graph, aliases, templates, paraphrases, corpus)
// and a starter config pointing at it.
int main(int argc, char** argv) {
    using namespace kcs;
    CLI::App app{"Generate a synthetic knowledge graph and corpus"};
    std::string out_dir = "world";
    synth::SynthConfig sc;
    int tree = 0;
    app.add_option("-o,--out", out_dir, "output directory");
    app.add_option("--seed", sc.seed, "generator seed");
    app.add_option("--trees", sc.n_trees, "number of IsA trees");
    app.add_option("--sentences", sc.corpus_sentences, "corpus sentences");
    app.add_option("--target-tree", tree, "tree whose root seeds the TargetKG walk");
    CLI11_PARSE(app, argc, argv);

    try {
        const auto world = synth::make_world(sc);
        require(tree >= 0 && tree < static_cast<int>(world.roots.size()), "bad_config", "--target-tree out of range");
        const std::filesystem::path dir(out_dir);
        std::filesystem::create_directories(dir);
        kg::write_triplets(dir / "graph.tsv", kg::TripletSet(world.edges.begin(), world.edges.end()));
        {
            std::ofstream a(dir / "aliases.tsv");
            for (const auto& [id, s] : world.aliases) a << id << '\t' << s << '\n';
        }
        kg::write_templates(dir / "templates.tsv", world.templates);
        kg::write_templates(dir / "paraphrases.tsv", world.paraphrases);
        {
            std::ofstream c(dir / "corpus.txt");
            c << world.corpus << '\n';
        }
        cli::ExperimentConfig cfg;
        const auto abs = std::filesystem::absolute(dir);
        cfg.set("graph_file", (abs / "graph.tsv").string());
        cfg.set("alias_file", (abs / "aliases.tsv").string());
        cfg.set("template_file", (abs / "templates.tsv").string());
        cfg.set("paraphrase_file", (abs / "paraphrases.tsv").string());
        cfg.set("corpus_file", (abs / "corpus.txt").string());
        cfg.set("target_seed_node", world.roots[static_cast<std::size_t>(tree)]);
        std::ofstream conf(dir / "kcs.conf");
        conf << "# generated by kcs_synth\n" << cfg.text();
        std::cout << "wrote " << world.edges.size() << " edges to " << dir.string() << "; config at "
                  << (dir / "kcs.conf").string() << '\n';
    } catch (const Error& e) {
        std::cerr << "error [" << e.code() << "]: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
