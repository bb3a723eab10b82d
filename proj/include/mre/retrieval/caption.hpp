#pragma once

// Caption extraction from crawled pages. Given a page and the URL of an
// image found on it, the caption is the nearest caption-like element, in
// priority order: a <figcaption> of the enclosing <figure> (or a sibling
// <figcaption>), then the image's alt text, then its title attribute.

#include <cctype>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mre::retrieval {

namespace html {

struct Node {
    std::string tag;  // empty for text nodes
    std::map<std::string, std::string> attrs;
    std::string text;
    int parent = -1;
    std::vector<int> children;
};

inline std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

inline std::string decode_entities(std::string_view s) {
    static const std::map<std::string, std::string, std::less<>> kNamed = {
        {"amp", "&"}, {"lt", "<"}, {"gt", ">"}, {"quot", "\""}, {"apos", "'"}, {"nbsp", " "}};
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] != '&') {
            out.push_back(s[i]);
            continue;
        }
        const auto semi = s.find(';', i);
        if (semi == std::string_view::npos || semi - i > 10) {
            out.push_back('&');
            continue;
        }
        const auto name = s.substr(i + 1, semi - i - 1);
        if (!name.empty() && name[0] == '#') {
            unsigned long cp = 0;
            try {
                cp = (name.size() > 1 && (name[1] == 'x' || name[1] == 'X'))
                         ? std::stoul(std::string(name.substr(2)), nullptr, 16)
                         : std::stoul(std::string(name.substr(1)));
            } catch (...) {
                out.push_back('&');
                continue;
            }
            // UTF-8 encode
            if (cp < 0x80) {
                out.push_back(static_cast<char>(cp));
            } else if (cp < 0x800) {
                out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
                out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
            } else if (cp < 0x10000) {
                out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
                out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
                out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
            } else {
                out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
                out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
                out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
                out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
            }
            i = semi;
        } else if (auto it = kNamed.find(name); it != kNamed.end()) {
            out += it->second;
            i = semi;
        } else {
            out.push_back('&');
        }
    }
    return out;
}

inline std::string collapse_space(std::string_view s) {
    std::string out;
    bool space = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            space = !out.empty();
        } else {
            if (space) out.push_back(' ');
            space = false;
            out.push_back(c);
        }
    }
    return out;
}

inline bool is_void(std::string_view tag) {
    static constexpr std::string_view kVoid[] = {"area", "base", "br", "col", "embed", "hr", "img",
                                                 "input", "link", "meta", "source", "track", "wbr"};
    for (auto v : kVoid)
        if (tag == v) return true;
    return false;
}

// Tolerant tree builder; node 0 is the document root.
class Document {
public:
    explicit Document(std::string_view src) {
        nodes_.push_back(Node{"#document", {}, {}, -1, {}});
        parse(src);
    }

    const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return nodes_.size(); }

    std::string text_of(int i) const {
        std::string acc;
        collect_text(i, acc);
        return collapse_space(decode_entities(acc));
    }

private:
    void collect_text(int i, std::string& acc) const {
        const auto& n = node(i);
        if (n.tag.empty()) {
            acc += n.text;
            acc.push_back(' ');
            return;
        }
        for (int c : n.children) collect_text(c, acc);
    }

    int add(Node n, int parent) {
        n.parent = parent;
        nodes_.push_back(std::move(n));
        const int id = static_cast<int>(nodes_.size() - 1);
        nodes_[static_cast<std::size_t>(parent)].children.push_back(id);
        return id;
    }

    void parse(std::string_view s) {
        std::vector<int> stack{0};
        std::size_t i = 0;
        while (i < s.size()) {
            if (s[i] != '<') {
                const auto next = s.find('<', i);
                const auto end = next == std::string_view::npos ? s.size() : next;
                add(Node{"", {}, std::string(s.substr(i, end - i)), -1, {}}, stack.back());
                i = end;
                continue;
            }
            if (s.substr(i, 4) == "<!--") {
                const auto end = s.find("-->", i + 4);
                i = end == std::string_view::npos ? s.size() : end + 3;
                continue;
            }
            if (i + 1 < s.size() && (s[i + 1] == '!' || s[i + 1] == '?')) {
                const auto end = s.find('>', i);
                i = end == std::string_view::npos ? s.size() : end + 1;
                continue;
            }
            const bool closing = i + 1 < s.size() && s[i + 1] == '/';
            std::size_t j = i + (closing ? 2 : 1);
            const std::size_t name_start = j;
            while (j < s.size() && (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '-')) ++j;
            if (j == name_start) {  // stray '<'
                add(Node{"", {}, "<", -1, {}}, stack.back());
                ++i;
                continue;
            }
            const std::string tag = lower(s.substr(name_start, j - name_start));
            Node n{tag, {}, {}, -1, {}};
            bool self_closing = false;
            // attributes
            while (j < s.size() && s[j] != '>') {
                if (std::isspace(static_cast<unsigned char>(s[j]))) {
                    ++j;
                    continue;
                }
                if (s[j] == '/') {
                    self_closing = true;
                    ++j;
                    continue;
                }
                const std::size_t an = j;
                while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j])) && s[j] != '=' &&
                       s[j] != '>' && s[j] != '/')
                    ++j;
                std::string name = lower(s.substr(an, j - an));
                std::string value;
                while (j < s.size() && std::isspace(static_cast<unsigned char>(s[j]))) ++j;
                if (j < s.size() && s[j] == '=') {
                    ++j;
                    while (j < s.size() && std::isspace(static_cast<unsigned char>(s[j]))) ++j;
                    if (j < s.size() && (s[j] == '"' || s[j] == '\'')) {
                        const char q = s[j];
                        const auto end = s.find(q, j + 1);
                        const auto stop = end == std::string_view::npos ? s.size() : end;
                        value = std::string(s.substr(j + 1, stop - j - 1));
                        j = stop == s.size() ? stop : stop + 1;
                    } else {
                        const std::size_t vs = j;
                        while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j])) && s[j] != '>') ++j;
                        value = std::string(s.substr(vs, j - vs));
                    }
                }
                if (!name.empty() && !closing) n.attrs.emplace(std::move(name), decode_entities(value));
            }
            i = j < s.size() ? j + 1 : s.size();
            if (closing) {
                for (std::size_t k = stack.size(); k-- > 1;) {
                    if (nodes_[static_cast<std::size_t>(stack[k])].tag == tag) {
                        stack.resize(k);
                        break;
                    }
                }
                continue;
            }
            const int id = add(std::move(n), stack.back());
            if (tag == "script" || tag == "style") {
                const auto end = lower(s.substr(i)).find("</" + tag);
                i = end == std::string::npos ? s.size() : i + end;
                continue;
            }
            if (!self_closing && !is_void(tag)) stack.push_back(id);
        }
    }

    std::vector<Node> nodes_;
};

} // namespace html

// Scheme-insensitive URL comparison; a relative `src` matches when it is a
// path suffix of `target`.
inline bool url_matches(std::string_view src, std::string_view target) {
    auto strip = [](std::string_view u) {
        while (!u.empty() && std::isspace(static_cast<unsigned char>(u.front()))) u.remove_prefix(1);
        while (!u.empty() && std::isspace(static_cast<unsigned char>(u.back()))) u.remove_suffix(1);
        if (auto p = u.find("://"); p != std::string_view::npos && p < 10) u.remove_prefix(p + 3);
        else if (u.substr(0, 2) == "//") u.remove_prefix(2);
        return u;
    };
    const auto a = strip(src);
    const auto b = strip(target);
    if (a.empty()) return false;
    if (a == b) return true;
    const bool relative = src.find("://") == std::string_view::npos && src.substr(0, 2) != "//";
    if (relative && b.size() > a.size() && b.substr(b.size() - a.size()) == a) {
        const char before = b[b.size() - a.size() - 1];
        return a.front() == '/' || before == '/';
    }
    return false;
}

inline std::optional<std::string> extract_caption(std::string_view page_html, std::string_view image_url) {
    const html::Document doc(page_html);

    auto matches = [&](const html::Node& n) {
        if (n.tag != "img") return false;
        for (const char* key : {"src", "data-src"}) {
            auto it = n.attrs.find(key);
            if (it != n.attrs.end() && url_matches(it->second, image_url)) return true;
        }
        if (auto it = n.attrs.find("srcset"); it != n.attrs.end()) {
            std::string_view set = it->second;
            while (!set.empty()) {
                const auto comma = set.find(',');
                auto item = set.substr(0, comma);
                while (!item.empty() && std::isspace(static_cast<unsigned char>(item.front()))) item.remove_prefix(1);
                if (url_matches(item.substr(0, item.find(' ')), image_url)) return true;
                if (comma == std::string_view::npos) break;
                set.remove_prefix(comma + 1);
            }
        }
        return false;
    };

    auto find_figcaption = [&](auto&& self, int i) -> std::optional<int> {
        for (int c : doc.node(i).children) {
            const auto& cn = doc.node(c);
            if (cn.tag == "figcaption") return c;
            if (!cn.tag.empty() && cn.tag != "figure")
                if (auto r = self(self, c)) return r;
        }
        return std::nullopt;
    };

    auto non_empty_text = [&](int i) -> std::optional<std::string> {
        auto t = doc.text_of(i);
        if (t.empty()) return std::nullopt;
        return t;
    };

    for (std::size_t i = 1; i < doc.size(); ++i) {
        const auto& img = doc.node(static_cast<int>(i));
        if (!matches(img)) continue;

        // enclosing <figure>
        for (int p = img.parent; p > 0; p = doc.node(p).parent) {
            if (doc.node(p).tag == "figure") {
                if (auto fc = find_figcaption(find_figcaption, p))
                    if (auto t = non_empty_text(*fc)) return t;
                break;
            }
        }
        // sibling <figcaption> of the image or of its direct parent
        for (int anchor : {static_cast<int>(i), img.parent}) {
            if (anchor <= 0) continue;
            const int parent = doc.node(anchor).parent;
            if (parent < 0) continue;
            for (int c : doc.node(parent).children)
                if (doc.node(c).tag == "figcaption")
                    if (auto t = non_empty_text(c)) return t;
        }
        for (const char* key : {"alt", "title"}) {
            if (auto it = img.attrs.find(key); it != img.attrs.end()) {
                auto t = html::collapse_space(it->second);
                if (!t.empty()) return t;
            }
        }
    }
    return std::nullopt;
}

} // namespace mre::retrieval
