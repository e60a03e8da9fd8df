#pragma once

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kcs/core/rng.hpp"
#include "kcs/kg/triplet.hpp"
#include "kcs/kg/verbalize.hpp"

namespace kcs::synth {

/// Shape of a synthetic world: a forest of IsA trees over invented words, a
/// HasProperty relation on the first level below each root, and a small
/// English-like corpus for language modeling.
struct SynthConfig {
    std::uint64_t seed = 7;
    int n_trees = 6;
    std::vector<int> branching{3, 3, 2};  // children per node at each depth
    int n_properties = 8;
    int corpus_sentences = 3000;
};

struct SyntheticWorld {
    std::vector<kg::KnowledgeTriplet> edges;
    std::map<std::string, std::string> aliases;
    std::vector<kg::Template> templates;
    std::vector<kg::Template> paraphrases;
    std::string corpus;
    std::vector<std::string> roots;  // sense ids of the tree roots
};

namespace detail {

inline std::string invent_word(Rng& rng, std::set<std::string>& used) {
    static constexpr std::string_view kOnset = "bdfgklmnprstvz";
    static constexpr std::string_view kVowel = "aeiou";
    for (;;) {
        const int syllables = 2 + static_cast<int>(rng.below(2));
        std::string w;
        for (int s = 0; s < syllables; ++s) {
            w.push_back(kOnset[rng.below(kOnset.size())]);
            w.push_back(kVowel[rng.below(kVowel.size())]);
        }
        if (rng.below(3) == 0) w.push_back(kOnset[rng.below(kOnset.size())]);
        if (used.insert(w).second) return w;
    }
}

}  // namespace detail

inline SyntheticWorld make_world(const SynthConfig& cfg) {
    Rng rng(cfg.seed);
    SyntheticWorld world;
    std::set<std::string> used{"a", "is", "of", "the", "kind", "type", "every", "one", "most", "things", "are",
                               "usually", "all", "some"};

    auto new_entity = [&](char pos) {
        const auto w = detail::invent_word(rng, used);
        const std::string id = w + "." + pos + ".01";
        world.aliases[id] = w;
        return id;
    };

    std::vector<std::string> properties;
    for (int p = 0; p < cfg.n_properties; ++p) properties.push_back(new_entity('a'));

    for (int t = 0; t < cfg.n_trees; ++t) {
        const auto root = new_entity('n');
        world.roots.push_back(root);
        std::vector<std::string> level{root};
        for (std::size_t depth = 0; depth < cfg.branching.size(); ++depth) {
            std::vector<std::string> next;
            for (const auto& parent : level) {
                for (int c = 0; c < cfg.branching[depth]; ++c) {
                    const auto child = new_entity('n');
                    world.edges.push_back({child, "IsA", parent});
                    if (depth == 0)
                        world.edges.push_back({child, "HasProperty", properties[rng.below(properties.size())]});
                    next.push_back(child);
                }
            }
            level = std::move(next);
        }
    }

    world.templates = {
        {"IsA", "isa_kind", "a {h} is a kind of {t}"},
        {"IsA", "isa_type", "{h} is a type of {t}"},
        {"IsA", "isa_plural", "most {h}s are {t}s"},  // renders an out-of-vocabulary tail; always skipped
        {"HasProperty", "prop_usually", "a {h} is usually {t}"},
        {"HasProperty", "prop_things", "{h} things are {t}"},
    };
    world.paraphrases = {
        {"IsA", "isa_every", "every {h} is a {t}"},
        {"IsA", "isa_one_kind", "the {h} is one kind of {t}"},
        {"HasProperty", "prop_most", "most {h} are {t}"},
    };

    // general-language corpus over ordinary words
    const std::vector<std::string> nouns{"cat",  "dog",  "house", "tree",  "river", "stone", "bird", "man",
                                         "woman", "child", "car", "road",  "city",  "field", "boat", "hill"};
    const std::vector<std::string> adjs{"big", "small", "old", "new", "red", "green", "quiet", "bright"};
    const std::vector<std::string> verbs{"sees", "likes", "finds", "makes", "takes", "follows", "holds"};
    const std::vector<std::string> preps{"near", "under", "behind", "beside"};
    const std::vector<std::string> cats{"animal", "place", "thing", "person"};
    auto pick = [&](const std::vector<std::string>& v) -> const std::string& { return v[rng.below(v.size())]; };

    std::ostringstream text;
    for (int s = 0; s < cfg.corpus_sentences; ++s) {
        switch (rng.below(5)) {
            case 0:
                text << "the " << pick(adjs) << ' ' << pick(nouns) << ' ' << pick(verbs) << " the " << pick(nouns);
                break;
            case 1:
                text << "a " << pick(nouns) << ' ' << pick(verbs) << " a " << pick(adjs) << ' ' << pick(nouns) << ' '
                     << pick(preps) << " the " << pick(nouns);
                break;
            case 2:
                text << "a " << pick(nouns) << " is a kind of " << pick(cats);
                break;
            case 3:
                text << "the " << pick(nouns) << " is usually " << pick(adjs);
                break;
            default:
                text << "some " << pick(nouns) << " things are " << pick(adjs) << " and " << pick(adjs);
        }
        text << " . ";
    }
    world.corpus = text.str();
    return world;
}

}  // namespace kcs::synth
