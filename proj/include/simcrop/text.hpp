#pragma once

// Report side of the pipeline: section split, sentence segmentation,
// whitespace/punctuation tokenization against a closed vocabulary, and
// token masking for masked report modeling.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "simcrop/error.hpp"
#include "simcrop/rng.hpp"
#include "simcrop/volume.hpp"

namespace simcrop {

using TokenId = std::uint32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
inline constexpr std::size_t kNumSpecial = 5;

inline const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> s{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    return s;
}

class Vocab {
public:
    Vocab() : Vocab(std::vector<std::string>{}) {}

    /// Specials are prepended; duplicates among `words` are rejected.
    explicit Vocab(const std::vector<std::string>& words) {
        for (const auto& s : special_tokens()) insert(s);
        for (const auto& w : words) insert(w);
    }

    /// One token per line, line number = id; the first five lines must be the specials.
    static Vocab load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw FormatError(FormatErrc::io, "cannot open vocab " + path);
        std::vector<std::string> lines;
        for (std::string line; std::getline(f, line);) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            lines.push_back(line);
        }
        if (lines.size() < kNumSpecial ||
            !std::equal(special_tokens().begin(), special_tokens().end(), lines.begin()))
            throw FormatError(FormatErrc::corrupt, path + ": first lines must be the special tokens");
        return Vocab(std::vector<std::string>(lines.begin() + kNumSpecial, lines.end()));
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw FormatError(FormatErrc::io, "cannot write vocab " + path);
        for (const auto& t : tokens_) f << t << '\n';
    }

    std::size_t size() const { return tokens_.size(); }
    bool contains(std::string_view tok) const { return ids_.count(std::string(tok)) != 0; }
    TokenId id(std::string_view tok) const {
        auto it = ids_.find(std::string(tok));
        return it == ids_.end() ? kUnk : it->second;
    }
    const std::string& token(TokenId id) const {
        if (id >= tokens_.size()) throw ValueError("vocab: id " + std::to_string(id) + " out of range");
        return tokens_[id];
    }
    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    void insert(const std::string& t) {
        if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos)
            throw ValueError("vocab: invalid token '" + t + "'");
        if (!ids_.emplace(t, static_cast<TokenId>(tokens_.size())).second)
            throw ValueError("vocab: duplicate token '" + t + "'");
        tokens_.push_back(t);
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

inline std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

} // namespace detail

struct ReportSections {
    std::string findings;
    std::string impression;
};

/// Split on case-insensitive "FINDINGS:" / "IMPRESSION:" headers.
inline ReportSections split_report(std::string_view text) {
    const std::string low = detail::lower(text);
    const auto f = low.find("findings:");
    if (f == std::string::npos) throw ValueError("split_report: missing FINDINGS: header");
    const std::size_t body = f + std::string_view("findings:").size();
    const auto imp = low.find("impression:", body);
    ReportSections out;
    if (imp == std::string::npos) {
        out.findings = std::string(detail::trim(text.substr(body)));
    } else {
        out.findings = std::string(detail::trim(text.substr(body, imp - body)));
        out.impression =
            std::string(detail::trim(text.substr(imp + std::string_view("impression:").size())));
    }
    return out;
}

/// Split at '.', '!' or '?' followed by whitespace or end of text. A period
/// between two digits never splits. Sentences keep their terminator and are
/// trimmed; empty fragments are dropped.
inline std::vector<std::string> split_sentences(std::string_view text) {
    const auto is_digit = [](char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; };
    const auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
    std::vector<std::string> out;
    std::size_t start = 0;
    auto emit = [&](std::size_t end) {
        auto s = detail::trim(text.substr(start, end - start));
        if (!s.empty()) out.emplace_back(s);
        start = end;
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c != '.' && c != '!' && c != '?') continue;
        if (c == '.' && i > 0 && i + 1 < text.size() && is_digit(text[i - 1]) && is_digit(text[i + 1]))
            continue;
        if (i + 1 == text.size() || is_space(text[i + 1])) emit(i + 1);
    }
    emit(text.size());
    return out;
}

/// Lowercased word and punctuation pieces of `text`.
inline std::vector<std::string> word_pieces(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            flush();
        } else if (c < 0x80 && std::ispunct(c)) {
            flush();
            out.emplace_back(1, ch);
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

inline std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab, bool with_specials) {
    std::vector<TokenId> ids;
    if (with_specials) ids.push_back(kCls);
    for (const auto& p : word_pieces(text)) ids.push_back(vocab.id(p));
    if (with_specials) ids.push_back(kSep);
    return ids;
}

/// Space-joined tokens with no space before punctuation; specials and [PAD] dropped.
inline std::string detokenize(const std::vector<TokenId>& ids, const Vocab& vocab) {
    std::string out;
    for (TokenId id : ids) {
        if (id == kPad || id == kCls || id == kSep) continue;
        const std::string& t = vocab.token(id);
        const bool punct = t.size() == 1 && std::ispunct(static_cast<unsigned char>(t[0]));
        if (!out.empty() && !punct) out.push_back(' ');
        out += t;
    }
    return out;
}

enum class MaskMode {
    plain,  ///< every masked position becomes [MASK]
    bert,   ///< 80% [MASK], 10% random non-special token, 10% unchanged
};

struct MaskedTokens {
    std::vector<TokenId> input_ids;
    MaskPlan plan;                  ///< over token positions
    std::vector<TokenId> target_ids;  ///< original id at masked positions, [PAD] elsewhere
};

inline bool is_special(TokenId id) { return id == kCls || id == kSep || id == kPad; }

/// Mask round(gamma * n_maskable) positions; [CLS], [SEP] and [PAD] are never masked.
inline MaskedTokens mask_tokens(const std::vector<TokenId>& tokens, double gamma, Rng& rng,
                                MaskMode mode = MaskMode::plain, std::size_t vocab_size = 0) {
    if (!(gamma >= 0.0 && gamma <= 1.0))
        throw ValueError("mask_tokens: gamma must lie in [0, 1], got " + std::to_string(gamma));
    std::vector<std::size_t> maskable;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (!is_special(tokens[i])) maskable.push_back(i);
    const MaskPlan local = sample_mask(maskable.size(), gamma, rng);

    MaskedTokens out;
    out.input_ids = tokens;
    out.target_ids.assign(tokens.size(), kPad);
    out.plan.n_total = tokens.size();
    out.plan.ratio = gamma;
    for (std::size_t j : local.masked_idx) out.plan.masked_idx.push_back(maskable[j]);
    std::vector<bool> is_masked(tokens.size(), false);
    for (std::size_t p : out.plan.masked_idx) is_masked[p] = true;
    for (std::size_t p = 0; p < tokens.size(); ++p)
        if (!is_masked[p]) out.plan.unmasked_idx.push_back(p);

    for (std::size_t p : out.plan.masked_idx) {
        out.target_ids[p] = tokens[p];
        if (mode == MaskMode::plain) {
            out.input_ids[p] = kMask;
            continue;
        }
        const double u = rng.uniform();
        if (u < 0.8) {
            out.input_ids[p] = kMask;
        } else if (u < 0.9 && vocab_size > kNumSpecial) {
            out.input_ids[p] = static_cast<TokenId>(
                kNumSpecial + rng.below(static_cast<std::uint32_t>(vocab_size - kNumSpecial)));
        }
    }
    return out;
}

/// Tokenized report ready for the model.
struct ReportBundle {
    std::string findings_text;
    std::string impression_text;
    std::vector<TokenId> tokens;                 ///< [CLS] findings impression [SEP]
    std::vector<std::string> sentence_text;      ///< findings sentences
    std::vector<std::vector<TokenId>> sentences; ///< each wrapped in [CLS] … [SEP]
    MaskedTokens masked;
};

inline ReportBundle make_report_bundle(std::string_view report, const Vocab& vocab, double gamma,
                                       Rng& rng, MaskMode mode = MaskMode::plain) {
    ReportBundle b;
    auto sections = split_report(report);
    b.findings_text = std::move(sections.findings);
    b.impression_text = std::move(sections.impression);
    std::string body = b.findings_text;
    if (!b.impression_text.empty()) body += " " + b.impression_text;
    b.tokens = tokenize(body, vocab, true);
    b.sentence_text = split_sentences(b.findings_text);
    for (const auto& s : b.sentence_text) b.sentences.push_back(tokenize(s, vocab, true));
    b.masked = mask_tokens(b.tokens, gamma, rng, mode, vocab.size());
    return b;
}

} // namespace simcrop
