#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mre/error.hpp"

namespace mre {

inline constexpr std::string_view kHeadOpen = "[E1]";
inline constexpr std::string_view kHeadClose = "[/E1]";
inline constexpr std::string_view kTailOpen = "[E2]";
inline constexpr std::string_view kTailClose = "[/E2]";
inline constexpr std::string_view kCls = "[CLS]";

inline constexpr std::size_t kDefaultMaxLength = 128;

inline bool is_reserved_token(std::string_view tok) {
    return tok == kHeadOpen || tok == kHeadClose || tok == kTailOpen || tok == kTailClose ||
           tok == kCls;
}

// Half-open token interval [begin, end).
struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t length() const noexcept { return end - begin; }
    bool overlaps(const Span& o) const noexcept { return begin < o.end && o.begin < end; }
    bool operator==(const Span&) const = default;
};

struct RelationInstance {
    std::string id;
    std::vector<std::string> tokens;
    Span head;
    Span tail;
    std::string image_id;
    std::string relation;

    bool operator==(const RelationInstance&) const = default;
};

// Ordered relation labels; the position of a label is its class index.
class LabelVocabulary {
public:
    LabelVocabulary() = default;
    explicit LabelVocabulary(std::vector<std::string> labels) {
        for (auto& l : labels) add(l);
    }

    // Returns the index of `label`, inserting it at the end if new.
    std::size_t add(const std::string& label) {
        auto [it, inserted] = index_.try_emplace(label, labels_.size());
        if (inserted) labels_.push_back(label);
        return it->second;
    }

    bool contains(const std::string& label) const { return index_.count(label) != 0; }

    std::size_t index_of(const std::string& label) const {
        auto it = index_.find(label);
        if (it == index_.end()) throw ValidationError("unknown relation label '" + label + "'");
        return it->second;
    }

    const std::string& label(std::size_t i) const { return labels_.at(i); }
    const std::vector<std::string>& labels() const noexcept { return labels_; }
    std::size_t size() const noexcept { return labels_.size(); }
    bool empty() const noexcept { return labels_.empty(); }

    bool operator==(const LabelVocabulary& o) const { return labels_ == o.labels_; }

    // One label per line; line order defines the index.
    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw ConfigError("cannot write label vocabulary " + path.string());
        for (const auto& l : labels_) out << l << '\n';
    }

    static LabelVocabulary load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot read label vocabulary " + path.string());
        LabelVocabulary v;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (v.contains(line)) throw ValidationError("duplicate label '" + line + "' in " + path.string());
            v.add(line);
        }
        return v;
    }

private:
    std::vector<std::string> labels_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

// Sentence with the four entity markers spliced in (length M + 4).
struct MarkedSequence {
    std::vector<std::string> tokens;
    std::size_t e1_pos = 0;
    std::size_t e2_pos = 0;
};

// Throws ValidationError if `inst` breaks a structural invariant.
inline void validate_instance(const RelationInstance& inst, std::size_t max_length = kDefaultMaxLength) {
    const std::size_t m = inst.tokens.size();
    auto where = [&] { return inst.id.empty() ? std::string() : " (instance " + inst.id + ")"; };
    auto check_span = [&](const Span& s, const char* name) {
        if (!(s.begin < s.end && s.end <= m))
            throw ValidationError(std::string(name) + " span [" + std::to_string(s.begin) + "," +
                                  std::to_string(s.end) + ") invalid for " + std::to_string(m) +
                                  " tokens" + where());
    };
    check_span(inst.head, "head");
    check_span(inst.tail, "tail");
    if (inst.head.overlaps(inst.tail)) throw ValidationError("head and tail spans overlap" + where());
    for (const auto& t : inst.tokens)
        if (is_reserved_token(t)) throw ValidationError("reserved token '" + t + "' in input text" + where());
    if (m + 4 > max_length)
        throw ValidationError("marked sequence length " + std::to_string(m + 4) + " exceeds max length " +
                              std::to_string(max_length) + where());
    if (inst.relation.empty()) throw ValidationError("empty relation label" + where());
}

// Marker identity follows the entity role: [E1]/[/E1] always wrap the head
// span and [E2]/[/E2] the tail span, whichever comes first in the sentence.
inline MarkedSequence insert_entity_markers(const RelationInstance& inst) {
    const std::size_t m = inst.tokens.size();
    if (!(inst.head.begin < inst.head.end && inst.head.end <= m && inst.tail.begin < inst.tail.end &&
          inst.tail.end <= m && !inst.head.overlaps(inst.tail)))
        throw ValidationError("invalid entity spans");
    MarkedSequence out;
    out.tokens.reserve(m + 4);
    for (std::size_t i = 0; i <= m; ++i) {
        if (i == inst.head.end) out.tokens.emplace_back(kHeadClose);
        if (i == inst.tail.end) out.tokens.emplace_back(kTailClose);
        if (i == m) break;
        if (i == inst.head.begin) {
            out.e1_pos = out.tokens.size();
            out.tokens.emplace_back(kHeadOpen);
        }
        if (i == inst.tail.begin) {
            out.e2_pos = out.tokens.size();
            out.tokens.emplace_back(kTailOpen);
        }
        out.tokens.push_back(inst.tokens[i]);
    }
    return out;
}

inline std::vector<std::string> strip_entity_markers(const MarkedSequence& seq) {
    std::vector<std::string> out;
    out.reserve(seq.tokens.size());
    for (const auto& t : seq.tokens)
        if (t != kHeadOpen && t != kHeadClose && t != kTailOpen && t != kTailClose) out.push_back(t);
    return out;
}

// ---- JSON-lines (MNRE release shape) ----------------------------------------

inline nlohmann::json to_json(const RelationInstance& inst) {
    nlohmann::json j;
    j["id"] = inst.id;
    j["token"] = inst.tokens;
    auto entity = [&](const Span& s) {
        std::string name;
        for (std::size_t i = s.begin; i < s.end && i < inst.tokens.size(); ++i) {
            if (i > s.begin) name += ' ';
            name += inst.tokens[i];
        }
        return nlohmann::json{{"name", name}, {"pos", {s.begin, s.end}}};
    };
    j["h"] = entity(inst.head);
    j["t"] = entity(inst.tail);
    j["img_id"] = inst.image_id;
    j["relation"] = inst.relation;
    return j;
}

inline std::string serialize_instance(const RelationInstance& inst) { return to_json(inst).dump(); }

namespace detail {
inline Span parse_span(const nlohmann::json& ent, const char* key) {
    if (!ent.is_object() || !ent.contains("pos"))
        throw std::runtime_error(std::string("'") + key + "' must be an object with 'pos'");
    const auto& pos = ent.at("pos");
    if (!pos.is_array() || pos.size() != 2 || !pos[0].is_number_integer() || !pos[1].is_number_integer())
        throw std::runtime_error(std::string("'") + key + ".pos' must be [start, end)");
    const auto b = pos[0].get<long long>();
    const auto e = pos[1].get<long long>();
    if (b < 0 || e < 0) throw std::runtime_error(std::string("'") + key + ".pos' is negative");
    return {static_cast<std::size_t>(b), static_cast<std::size_t>(e)};
}
} // namespace detail

// Parses one line. Structural problems raise ParseError with `line_no`;
// invariant violations raise ValidationError.
inline RelationInstance parse_instance(std::string_view line, std::size_t line_no = 0,
                                       const std::string& fallback_id = {},
                                       std::size_t max_length = kDefaultMaxLength) {
    RelationInstance inst;
    try {
        const auto j = nlohmann::json::parse(line);
        if (!j.is_object()) throw std::runtime_error("expected a JSON object");
        inst.tokens = j.at("token").get<std::vector<std::string>>();
        inst.head = detail::parse_span(j.at("h"), "h");
        inst.tail = detail::parse_span(j.at("t"), "t");
        inst.image_id = j.at("img_id").get<std::string>();
        inst.relation = j.at("relation").get<std::string>();
        inst.id = j.contains("id") ? j.at("id").get<std::string>() : fallback_id;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(e.what(), line_no);
    } catch (const std::runtime_error& e) {
        throw ParseError(e.what(), line_no);
    }
    try {
        validate_instance(inst, max_length);
    } catch (const ValidationError& e) {
        throw ValidationError(line_no ? "line " + std::to_string(line_no) + ": " + e.what() : e.what());
    }
    return inst;
}

// Reads a JSON-lines file. Blank lines are skipped; ids default to
// "<stem>-<line>".
inline std::vector<RelationInstance> parse_dataset(const std::filesystem::path& path,
                                                   std::size_t max_length = kDefaultMaxLength) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open dataset " + path.string());
    std::vector<RelationInstance> out;
    std::string line;
    std::size_t line_no = 0;
    const std::string stem = path.stem().string();
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        out.push_back(parse_instance(line, line_no, stem + "-" + std::to_string(line_no), max_length));
    }
    return out;
}

inline void write_dataset(const std::filesystem::path& path, const std::vector<RelationInstance>& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write dataset " + path.string());
    for (const auto& inst : data) out << serialize_instance(inst) << '\n';
}

// Vocabulary from the training split, in first-occurrence order.
inline LabelVocabulary build_vocabulary(const std::vector<RelationInstance>& train) {
    LabelVocabulary v;
    for (const auto& inst : train) v.add(inst.relation);
    return v;
}

// Every dev/test label must already be in the training vocabulary.
inline void check_labels(const std::vector<RelationInstance>& split, const LabelVocabulary& vocab,
                         const std::string& split_name) {
    for (const auto& inst : split)
        if (!vocab.contains(inst.relation))
            throw ValidationError("unknown label '" + inst.relation + "' in " + split_name + " split (instance " +
                                  inst.id + ")");
}

struct Dataset {
    std::vector<RelationInstance> train;
    std::vector<RelationInstance> dev;
    std::vector<RelationInstance> test;
    LabelVocabulary labels;
};

inline Dataset load_splits(const std::filesystem::path& train, const std::filesystem::path& dev,
                           const std::filesystem::path& test, std::size_t max_length = kDefaultMaxLength) {
    Dataset d;
    d.train = parse_dataset(train, max_length);
    d.labels = build_vocabulary(d.train);
    if (!dev.empty()) {
        d.dev = parse_dataset(dev, max_length);
        check_labels(d.dev, d.labels, "dev");
    }
    if (!test.empty()) {
        d.test = parse_dataset(test, max_length);
        check_labels(d.test, d.labels, "test");
    }
    return d;
}

} // namespace mre
