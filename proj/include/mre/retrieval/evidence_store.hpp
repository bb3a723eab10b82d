#pragma once

// On-disk evidence store:
//
//   <root>/manifest.json          instance_id -> bundle descriptor (no timestamps)
//   <root>/images/<sha256>.bin    content-addressed image bytes
//   <root>/text/<instance>.json   entities/captions/images with provenance

#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mre/digest.hpp"
#include "mre/retrieval/backend.hpp"

namespace mre::retrieval {

struct EvidenceItem {
    std::string text;
    std::string page_url;   // captions only
    std::string image_url;  // captions only
    Provenance provenance;
    bool operator==(const EvidenceItem&) const = default;
};

// Textual evidence for one retrieval source: the whole image ("image") or
// one object crop ("obj1", "obj2", ...).
struct SourceEvidence {
    std::string source;
    std::string source_id;
    std::vector<EvidenceItem> entities;
    std::vector<EvidenceItem> captions;
    bool missing = false;
    std::string error;
    bool operator==(const SourceEvidence&) const = default;

    bool is_object() const { return source != "image"; }
};

struct RetrievedImage {
    std::string digest;
    std::string url;
    Provenance provenance;
    bool operator==(const RetrievedImage&) const = default;
};

struct ObjectRecord {
    DetectedObject object;
    std::string digest;  // stored crop
    bool operator==(const ObjectRecord&) const = default;
};

struct EvidenceBundle {
    std::string instance_id;
    std::string image_id;
    std::string image_digest;  // empty if the post image could not be read
    std::vector<ObjectRecord> objects;
    std::vector<SourceEvidence> sources;
    std::vector<RetrievedImage> images;
    std::vector<std::string> errors;
    std::size_t k = 0;
    std::size_t m = 0;

    bool complete() const { return errors.empty(); }
    bool operator==(const EvidenceBundle&) const = default;
};

namespace detail {

inline nlohmann::json provenance_json(const Provenance& p) {
    nlohmann::json j{{"url", p.source_url}};
    if (!p.fixture.empty()) j["fixture"] = p.fixture;
    if (!p.retrieved_at.empty()) j["retrieved_at"] = p.retrieved_at;
    return j;
}

inline Provenance provenance_from(const nlohmann::json& j) {
    return {j.value("url", std::string()), j.value("retrieved_at", std::string()), j.value("fixture", std::string())};
}

inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
    static std::atomic<unsigned> counter{0};
    const auto tmp = path.string() + ".tmp" + std::to_string(counter++);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot write " + tmp, "evidence_retrieval");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + path.string(), "evidence_retrieval");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// File-name-safe form of an instance id.
inline std::string safe_name(const std::string& id) {
    std::string out;
    bool changed = id.empty();
    for (char c : id) {
        if (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') {
            out.push_back(c);
        } else {
            out.push_back('_');
            changed = true;
        }
    }
    if (changed || out.front() == '.') out += "-" + sha256_hex(id).substr(0, 8);
    return out;
}

} // namespace detail

class EvidenceStore {
public:
    // Opens (creating directories as needed) without validating existing
    // content; use `open` for a validated read.
    static EvidenceStore create(const std::filesystem::path& root) {
        std::filesystem::create_directories(root / "images");
        std::filesystem::create_directories(root / "text");
        EvidenceStore s(root);
        if (std::filesystem::exists(s.manifest_path())) s.load_manifest();
        return s;
    }

    // Opens an existing store and validates every manifest reference.
    static EvidenceStore open(const std::filesystem::path& root) {
        if (!std::filesystem::exists(root / "manifest.json"))
            throw ValidationError("no evidence store manifest at " + root.string(), "evidence_retrieval");
        EvidenceStore s(root);
        s.load_manifest();
        s.validate();
        return s;
    }

    EvidenceStore(EvidenceStore&& o) noexcept : root_(std::move(o.root_)), manifest_(std::move(o.manifest_)) {}

    const std::filesystem::path& root() const noexcept { return root_; }
    std::filesystem::path manifest_path() const { return root_ / "manifest.json"; }
    std::filesystem::path image_path(const std::string& digest) const { return root_ / "images" / (digest + ".bin"); }

    bool contains(const std::string& instance_id) const {
        std::lock_guard lock(mu_);
        return manifest_.count(instance_id) != 0;
    }

    std::optional<nlohmann::json> entry(const std::string& instance_id) const {
        std::lock_guard lock(mu_);
        auto it = manifest_.find(instance_id);
        if (it == manifest_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return manifest_.size();
    }

    std::vector<std::string> instance_ids() const {
        std::lock_guard lock(mu_);
        std::vector<std::string> out;
        for (const auto& [id, _] : manifest_) out.push_back(id);
        return out;
    }

    // Stores bytes under their digest; identical bytes share one file.
    std::string put_image(const std::string& bytes) const {
        const auto digest = sha256_hex(bytes);
        const auto path = image_path(digest);
        if (!std::filesystem::exists(path)) detail::write_atomic(path, bytes);
        return digest;
    }

    std::string read_image(const std::string& digest) const { return detail::read_file(image_path(digest)); }

    // Writes the bundle's text file and records its descriptor. Serialised
    // through the store's single writer lock.
    void put_bundle(const EvidenceBundle& b) {
        const auto text_rel = "text/" + detail::safe_name(b.instance_id) + ".json";
        nlohmann::json text;
        text["instance_id"] = b.instance_id;
        text["sources"] = nlohmann::json::array();
        for (const auto& s : b.sources) {
            nlohmann::json js{{"source", s.source}, {"source_id", s.source_id}, {"missing", s.missing}};
            if (!s.error.empty()) js["error"] = s.error;
            js["entities"] = nlohmann::json::array();
            for (const auto& e : s.entities)
                js["entities"].push_back({{"text", e.text}, {"provenance", detail::provenance_json(e.provenance)}});
            js["captions"] = nlohmann::json::array();
            for (const auto& c : s.captions)
                js["captions"].push_back({{"text", c.text},
                                          {"page_url", c.page_url},
                                          {"image_url", c.image_url},
                                          {"provenance", detail::provenance_json(c.provenance)}});
            text["sources"].push_back(std::move(js));
        }
        text["images"] = nlohmann::json::array();
        for (const auto& im : b.images)
            text["images"].push_back(
                {{"digest", im.digest}, {"url", im.url}, {"provenance", detail::provenance_json(im.provenance)}});

        nlohmann::json desc;
        desc["image_id"] = b.image_id;
        desc["image_digest"] = b.image_digest;
        desc["objects"] = nlohmann::json::array();
        for (const auto& o : b.objects) {
            const auto& bb = o.object.bbox;
            desc["objects"].push_back({{"crop_id", o.object.crop_id},
                                       {"bbox", {bb.x, bb.y, bb.w, bb.h}},
                                       {"salience", o.object.salience},
                                       {"digest", o.digest}});
        }
        desc["images"] = nlohmann::json::array();
        for (const auto& im : b.images) desc["images"].push_back({{"digest", im.digest}, {"url", im.url}});
        desc["text"] = text_rel;
        desc["k"] = b.k;
        desc["m"] = b.m;
        desc["status"] = b.complete() ? "complete" : "partial";
        desc["errors"] = b.errors;

        std::lock_guard lock(mu_);
        detail::write_atomic(root_ / text_rel, text.dump(2) + "\n");
        manifest_[b.instance_id] = std::move(desc);
    }

    EvidenceBundle load_bundle(const std::string& instance_id) const {
        const auto desc_opt = entry(instance_id);
        if (!desc_opt) throw ValidationError("no evidence bundle for instance " + instance_id, "evidence_retrieval");
        const auto& desc = *desc_opt;
        EvidenceBundle b;
        b.instance_id = instance_id;
        b.image_id = desc.at("image_id").get<std::string>();
        b.image_digest = desc.at("image_digest").get<std::string>();
        b.k = desc.at("k").get<std::size_t>();
        b.m = desc.at("m").get<std::size_t>();
        b.errors = desc.at("errors").get<std::vector<std::string>>();
        for (const auto& o : desc.at("objects")) {
            const auto& bb = o.at("bbox");
            b.objects.push_back({{{bb[0].get<std::size_t>(), bb[1].get<std::size_t>(), bb[2].get<std::size_t>(),
                                   bb[3].get<std::size_t>()},
                                  o.at("salience").get<double>(),
                                  o.at("crop_id").get<std::string>()},
                                 o.at("digest").get<std::string>()});
        }
        const auto text = nlohmann::json::parse(detail::read_file(root_ / desc.at("text").get<std::string>()));
        for (const auto& js : text.at("sources")) {
            SourceEvidence s;
            s.source = js.at("source").get<std::string>();
            s.source_id = js.at("source_id").get<std::string>();
            s.missing = js.at("missing").get<bool>();
            s.error = js.value("error", std::string());
            for (const auto& e : js.at("entities"))
                s.entities.push_back({e.at("text").get<std::string>(), "", "", detail::provenance_from(e.at("provenance"))});
            for (const auto& c : js.at("captions"))
                s.captions.push_back({c.at("text").get<std::string>(), c.at("page_url").get<std::string>(),
                                      c.at("image_url").get<std::string>(), detail::provenance_from(c.at("provenance"))});
            b.sources.push_back(std::move(s));
        }
        for (const auto& im : text.at("images"))
            b.images.push_back({im.at("digest").get<std::string>(), im.at("url").get<std::string>(),
                                detail::provenance_from(im.at("provenance"))});
        return b;
    }

    // Canonical manifest bytes: keys sorted, two-space indent.
    std::string manifest_bytes() const {
        nlohmann::json j;
        j["version"] = 1;
        j["instances"] = nlohmann::json::object();
        std::lock_guard lock(mu_);
        for (const auto& [id, desc] : manifest_) j["instances"][id] = desc;
        return j.dump(2) + "\n";
    }

    void save_manifest() const { detail::write_atomic(manifest_path(), manifest_bytes()); }

    // Every referenced file must exist and every image file's content must
    // hash to its name.
    void validate() const {
        std::lock_guard lock(mu_);
        auto check_image = [&](const std::string& id, const std::string& digest) {
            const auto p = image_path(digest);
            if (!std::filesystem::exists(p))
                throw ValidationError("instance " + id + " references missing image file " + p.string(),
                                      "evidence_retrieval");
            if (sha256_hex(detail::read_file(p)) != digest)
                throw ValidationError("image file " + p.string() + " does not match its digest", "evidence_retrieval");
        };
        for (const auto& [id, desc] : manifest_) {
            if (const auto d = desc.at("image_digest").get<std::string>(); !d.empty()) check_image(id, d);
            for (const auto& o : desc.at("objects")) check_image(id, o.at("digest").get<std::string>());
            for (const auto& im : desc.at("images")) check_image(id, im.at("digest").get<std::string>());
            const auto text = root_ / desc.at("text").get<std::string>();
            if (!std::filesystem::exists(text))
                throw ValidationError("instance " + id + " references missing text file " + text.string(),
                                      "evidence_retrieval");
        }
    }

private:
    explicit EvidenceStore(std::filesystem::path root) : root_(std::move(root)) {}

    void load_manifest() {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(detail::read_file(manifest_path()));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("malformed manifest " + manifest_path().string() + ": " + e.what(),
                                  "evidence_retrieval");
        }
        for (auto& [id, desc] : j.at("instances").items()) manifest_[id] = desc;
    }

    std::filesystem::path root_;
    std::map<std::string, nlohmann::json> manifest_;
    mutable std::mutex mu_;
};

} // namespace mre::retrieval
