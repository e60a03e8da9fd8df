#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kcs/core/error.hpp"

namespace kcs::text {

using TokenId = int;

/// Splits text into lowercase words, with punctuation as separate pieces.
inline std::vector<std::string> split_words(std::string_view text) {
    static constexpr std::string_view kPunct = ".,;:!?\"()";
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            flush();
        } else if (kPunct.find(raw) != std::string_view::npos) {
            flush();
            out.emplace_back(1, raw);
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

/// Whole-word vocabulary with a character fallback: a word missing from the
/// vocabulary is spelled as its first character followed by "##c" pieces, so
/// every entity seen while building the vocabulary is exactly one token and
/// anything else is several.
class Vocabulary {
public:
    static constexpr TokenId kBos = 0;
    static constexpr TokenId kUnk = 1;

    Vocabulary() { reset_specials(); }

    /// Builds from a word list; words are ordered by descending count, then
    /// lexicographically, which fixes token ids for a given corpus.
    static Vocabulary build(const std::vector<std::string>& texts, const std::vector<std::string>& required_words = {},
                            int min_count = 1) {
        std::map<std::string, long> counts;
        for (const auto& t : texts)
            for (auto& w : split_words(t)) ++counts[w];
        for (const auto& w : required_words)
            for (auto& piece : split_words(w)) counts[piece] += min_count;

        std::vector<std::pair<std::string, long>> ordered(counts.begin(), counts.end());
        std::stable_sort(ordered.begin(), ordered.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });

        Vocabulary v;
        for (const auto& [w, c] : ordered)
            if (c >= min_count) v.add(w);
        for (char c = 'a'; c <= 'z'; ++c) {
            v.add(std::string(1, c));
            v.add(std::string("##") + c);
        }
        for (char c = '0'; c <= '9'; ++c) {
            v.add(std::string(1, c));
            v.add(std::string("##") + c);
        }
        return v;
    }

    static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
        Vocabulary v;
        v.tokens_.clear();
        v.index_.clear();
        for (const auto& t : tokens) v.add(t);
        require(v.size() >= 2 && v.tokens_[kBos] == "<bos>" && v.tokens_[kUnk] == "<unk>", "bad_vocab",
                "vocabulary must start with <bos>, <unk>");
        return v;
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    const std::string& decode(TokenId id) const {
        require(id >= 0 && id < size(), "bad_token", "token id out of range: " + std::to_string(id));
        return tokens_[static_cast<std::size_t>(id)];
    }

    bool contains(const std::string& word) const { return index_.contains(word); }

    TokenId id_of(const std::string& piece) const {
        auto it = index_.find(piece);
        return it == index_.end() ? kUnk : it->second;
    }

    void encode_word(const std::string& word, std::vector<TokenId>& out) const {
        if (auto it = index_.find(word); it != index_.end()) {
            out.push_back(it->second);
            return;
        }
        for (std::size_t i = 0; i < word.size(); ++i) {
            const std::string piece = i == 0 ? std::string(1, word[i]) : std::string("##") + word[i];
            out.push_back(id_of(piece));
        }
    }

    std::vector<TokenId> encode(std::string_view text) const {
        std::vector<TokenId> out;
        for (const auto& w : split_words(text)) encode_word(w, out);
        return out;
    }

    /// True when `text` encodes to exactly one token.
    bool is_single_token(std::string_view text) const { return encode(text).size() == 1; }

private:
    void reset_specials() {
        tokens_.clear();
        index_.clear();
        add("<bos>");
        add("<unk>");
    }

    void add(const std::string& tok) {
        if (index_.contains(tok)) return;
        index_.emplace(tok, static_cast<TokenId>(tokens_.size()));
        tokens_.push_back(tok);
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

}  // namespace kcs::text
