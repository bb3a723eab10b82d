#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <thread>

#include "mre/data_model.hpp"
#include "mre/log.hpp"
#include "mre/retrieval/backend.hpp"
#include "mre/retrieval/caption.hpp"
#include "mre/retrieval/evidence_store.hpp"

namespace mre::retrieval {

struct RetrievalConfig {
    std::size_t k = 10;  // evidence items per source / retrieved images
    std::size_t m = 3;   // object crops per image
    std::size_t workers = 1;
    double rate = 0.0;  // backend calls per second, 0 = unlimited
    std::chrono::milliseconds page_timeout{10000};
    RetryPolicy retry;
};

struct TextualEvidence {
    std::vector<SourceEvidence> sources;  // "image" first, then objects in salience order
};

inline std::string crop_id_for(const std::string& image_id, std::size_t rank) {
    return image_id + "#obj" + std::to_string(rank + 1);
}

class Retriever {
public:
    Retriever(Backend& backend, RetrievalConfig cfg) : backend_(backend), cfg_(std::move(cfg)), limiter_(cfg_.rate) {}

    const RetrievalConfig& config() const noexcept { return cfg_; }

    // Top-m objects by descending salience; ties broken by (x, y) ascending.
    // Boxes outside the image are dropped.
    std::vector<DetectedObject> detect_objects(const ImageQuery& image, std::size_t m) {
        const Image img = decode_image(image.bytes);
        if (m == 0) return {};
        auto candidates = call([&] { return backend_.ground_objects(image); });
        std::erase_if(candidates, [&](const CandidateBox& c) { return !box_within(c.bbox, img); });
        std::sort(candidates.begin(), candidates.end(), [](const CandidateBox& a, const CandidateBox& b) {
            if (a.salience != b.salience) return a.salience > b.salience;
            if (a.bbox.x != b.bbox.x) return a.bbox.x < b.bbox.x;
            return a.bbox.y < b.bbox.y;
        });
        if (candidates.size() > m) candidates.resize(m);
        std::vector<DetectedObject> out;
        for (std::size_t i = 0; i < candidates.size(); ++i)
            out.push_back({candidates[i].bbox, std::clamp(candidates[i].salience, 0.0, 1.0), crop_id_for(image.id, i)});
        return out;
    }

    // Entities and captions for the whole image and each object crop.
    // Sources whose lookup fails after retries are marked missing.
    TextualEvidence retrieve_textual_evidence(const ImageQuery& image, const std::vector<DetectedObject>& objects,
                                              std::size_t k) {
        TextualEvidence out;
        out.sources.push_back(textual_for_source("image", image, k));
        if (!objects.empty()) {
            const Image img = decode_image(image.bytes);
            for (std::size_t i = 0; i < objects.size(); ++i) {
                ImageQuery crop{objects[i].crop_id, encode_image(crop_image(img, objects[i].bbox))};
                out.sources.push_back(textual_for_source("obj" + std::to_string(i + 1), crop, k));
            }
        }
        return out;
    }

    // Up to k images for the sentence, stored via `store` and returned in
    // backend rank order. Failed downloads are skipped, not substituted.
    std::vector<RetrievedImage> retrieve_visual_evidence(std::string_view text, std::size_t k,
                                                         const EvidenceStore& store,
                                                         std::vector<std::string>* errors = nullptr) {
        if (text.empty()) throw ValidationError("visual evidence query text is empty", "evidence_retrieval");
        if (k == 0) return {};
        const auto urls = call([&] { return backend_.image_search(text, k); });
        std::vector<RetrievedImage> out;
        for (std::size_t i = 0; i < urls.size() && i < k; ++i) {
            try {
                const auto bytes = call([&] { return backend_.fetch(urls[i], cfg_.page_timeout); });
                out.push_back({store.put_image(bytes), urls[i], backend_.provenance_for(urls[i])});
            } catch (const RetrievalError& e) {
                log::warn("evidence_retrieval", "skipping image " + urls[i] + ": " + e.what());
                if (errors) errors->push_back("image " + urls[i] + ": " + e.what());
            }
        }
        return out;
    }

    // Full bundle for one instance. Failures are recorded in bundle.errors.
    EvidenceBundle retrieve_bundle(const RelationInstance& inst, const std::filesystem::path& image_dir,
                                   const EvidenceStore& store) {
        EvidenceBundle b;
        b.instance_id = inst.id;
        b.image_id = inst.image_id;
        b.k = cfg_.k;
        b.m = cfg_.m;

        std::optional<ImageQuery> post;
        try {
            post = ImageQuery{inst.image_id, detail::read_file(image_dir / inst.image_id)};
            b.image_digest = store.put_image(post->bytes);
        } catch (const Error& e) {
            b.errors.push_back(std::string("post image: ") + e.what());
        }

        if (post) {
            std::vector<DetectedObject> objects;
            try {
                objects = detect_objects(*post, cfg_.m);
                const Image img = decode_image(post->bytes);
                for (const auto& o : objects)
                    b.objects.push_back({o, store.put_image(encode_image(crop_image(img, o.bbox)))});
            } catch (const Error& e) {
                b.errors.push_back(std::string("object detection: ") + e.what());
                objects.clear();
                b.objects.clear();
            }
            try {
                auto tev = retrieve_textual_evidence(*post, objects, cfg_.k);
                for (const auto& s : tev.sources)
                    if (s.missing) b.errors.push_back("textual evidence " + s.source + ": " + s.error);
                b.sources = std::move(tev.sources);
            } catch (const Error& e) {
                b.errors.push_back(std::string("textual evidence: ") + e.what());
            }
        }

        std::string sentence;
        for (const auto& t : inst.tokens) sentence += (sentence.empty() ? "" : " ") + t;
        try {
            b.images = retrieve_visual_evidence(sentence, cfg_.k, store, &b.errors);
        } catch (const Error& e) {
            b.errors.push_back(std::string("visual evidence: ") + e.what());
        }
        return b;
    }

private:
    template <typename Fn>
    auto call(Fn&& fn) -> decltype(fn()) {
        return with_retries(cfg_.retry, [&] {
            limiter_.acquire();
            return fn();
        });
    }

    SourceEvidence textual_for_source(std::string source, const ImageQuery& q, std::size_t k) {
        SourceEvidence s{std::move(source), q.id, {}, {}, false, {}};
        if (k == 0) return s;
        WebDetection wd;
        try {
            wd = call([&] { return backend_.reverse_image_lookup(q, k); });
        } catch (const RetrievalError& e) {
            s.missing = true;
            s.error = e.what();
            return s;
        }
        for (const auto& e : wd.entities) {
            if (s.entities.size() >= k) break;
            s.entities.push_back({e, "", "", backend_.provenance_for("reverse-image-lookup:" + q.id)});
        }
        // Crawl matching pages for a caption adjacent to the matched image.
        for (const auto& m : wd.matches) {
            if (s.captions.size() >= k) break;
            std::string page;
            try {
                page = call([&] { return backend_.fetch(m.page_url, cfg_.page_timeout); });
            } catch (const RetrievalError& e) {
                log::warn("evidence_retrieval", "caption page skipped: " + m.page_url + ": " + e.what());
                continue;
            }
            if (auto cap = extract_caption(page, m.image_url))
                s.captions.push_back({*cap, m.page_url, m.image_url, backend_.provenance_for(m.page_url)});
        }
        return s;
    }

    Backend& backend_;
    RetrievalConfig cfg_;
    RateLimiter limiter_;
};

struct BuildStats {
    std::size_t retrieved = 0;
    std::size_t skipped = 0;
    std::size_t partial = 0;
};

// Retrieves a bundle for every instance not already cached with the same
// k and m, using up to cfg.workers threads, then rewrites the manifest.
inline BuildStats build_evidence_store(const std::vector<RelationInstance>& dataset,
                                       const std::filesystem::path& image_dir, EvidenceStore& store,
                                       Retriever& retriever) {
    const auto& cfg = retriever.config();
    std::vector<const RelationInstance*> todo;
    BuildStats stats;
    for (const auto& inst : dataset) {
        const auto e = store.entry(inst.id);
        if (e && e->at("k").get<std::size_t>() == cfg.k && e->at("m").get<std::size_t>() == cfg.m) {
            ++stats.skipped;
            continue;
        }
        todo.push_back(&inst);
    }

    std::atomic<std::size_t> next{0}, partial{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < todo.size(); i = next++) {
            auto b = retriever.retrieve_bundle(*todo[i], image_dir, store);
            if (!b.complete()) {
                ++partial;
                log::warn("evidence_retrieval", "instance " + b.instance_id + " retrieved with " +
                                                    std::to_string(b.errors.size()) + " error(s)");
            }
            store.put_bundle(b);
        }
    };
    const std::size_t n_workers = std::max<std::size_t>(1, std::min(cfg.workers, todo.size()));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    }
    stats.retrieved = todo.size();
    stats.partial = partial.load();
    store.save_manifest();
    return stats;
}

} // namespace mre::retrieval
