#pragma once

// Training, evaluation and experiment drivers.
//
// Instances are prepared once per dataset (token ids or feature matrices,
// visual rows with source tags, every stored evidence item). Ablation flags
// and evidence counts act later, when a prepared instance is assembled into
// a fusion input, so one preparation serves every row of an ablation table.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mre/data_model.hpp"
#include "mre/encoders.hpp"
#include "mre/fusion/model.hpp"
#include "mre/log.hpp"
#include "mre/metrics.hpp"
#include "mre/optim.hpp"
#include "mre/retrieval/evidence_store.hpp"
#include "mre/rng.hpp"
#include "mre/xmrf.hpp"

namespace mre::training {

using fusion::VisualSource;
using json = nlohmann::json;

class TrainingError : public Error {
public:
    explicit TrainingError(const std::string& what) : Error("training_eval", what) {}
};

// ---- configuration -------------------------------------------------------------

enum class Scale { toy, paper };

inline std::string to_string(Scale s) { return s == Scale::toy ? "toy" : "paper"; }

inline Scale parse_scale(const std::string& s) {
    if (s == "toy") return Scale::toy;
    if (s == "paper") return Scale::paper;
    throw ConfigError("scale must be 'toy' or 'paper', got '" + s + "'");
}

// Each flag removes one component.
struct Ablation {
    bool object_evidence = false;  // textual evidence retrieved for object crops
    bool image_evidence = false;   // textual evidence retrieved for the whole image
    bool visual_evidence = false;  // retrieved images
    bool selection = false;        // cross-modal selection stack
    bool consistency = false;      // consistency reweighting (uniform mean instead)
    bool operator==(const Ablation&) const = default;
};

// Everything that determines how an instance becomes logits.
struct ModelConfig {
    Scale scale = Scale::toy;
    fusion::FusionDims dims = fusion::FusionDims::toy(0);  // labels come from the vocabulary
    double temp_text = 0.0;
    double temp_vis = 0.0;
    Ablation ablate;
    std::size_t k_text = 10;   // per source and kind (entities, captions)
    std::size_t k_image = 10;  // retrieved images
    encoders::TextEncoderConfig text_encoder;
    std::uint64_t feature_seed = 7;  // toy image projection

    fusion::FusionConfig fusion() const {
        fusion::FusionConfig f;
        f.dims = dims;
        f.selection = !ablate.selection;
        f.consistency = !ablate.consistency;
        f.temp_text = temp_text;
        f.temp_vis = temp_vis;
        return f;
    }
};

struct TrainConfig {
    ModelConfig model;
    double learning_rate = 3e-5;
    double warmup = 0.06;
    std::size_t batch_size = 16;
    std::size_t epochs = 10;
    std::size_t max_steps = 0;  // 0: epochs × ceil(n / batch_size)
    std::uint64_t seed = 1;
    optim::AdamConfig adam;
    bool select_best_dev = true;
    std::size_t workers = 1;

    void validate() const {
        if (!(warmup >= 0.0 && warmup < 1.0)) throw ConfigError("warmup fraction must lie in [0, 1)");
        if (batch_size < 1) throw ConfigError("batch size must be at least 1");
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
        if (epochs == 0 && max_steps == 0) throw ConfigError("either epochs or max_steps must be positive");
        if (model.scale == Scale::toy && model.dims.d_text != model.text_encoder.d_text)
            throw ConfigError("text encoder width " + std::to_string(model.text_encoder.d_text) +
                              " differs from d_text " + std::to_string(model.dims.d_text));
    }
};

namespace detail {

// Rejects keys outside `allowed` so typos in config files do not pass silently.
inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception&) {
        throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
    }
}

} // namespace detail

inline json to_json(const Ablation& a) {
    return {{"object_evidence", a.object_evidence},
            {"image_evidence", a.image_evidence},
            {"visual_evidence", a.visual_evidence},
            {"selection", a.selection},
            {"consistency", a.consistency}};
}

inline Ablation ablation_from_json(const json& j) {
    detail::check_keys(j, {"object_evidence", "image_evidence", "visual_evidence", "selection", "consistency"},
                       "ablate");
    Ablation a;
    detail::read(j, "object_evidence", a.object_evidence, "ablate");
    detail::read(j, "image_evidence", a.image_evidence, "ablate");
    detail::read(j, "visual_evidence", a.visual_evidence, "ablate");
    detail::read(j, "selection", a.selection, "ablate");
    detail::read(j, "consistency", a.consistency, "ablate");
    return a;
}

inline json to_json(const ModelConfig& m) {
    const auto& d = m.dims;
    return {{"scale", to_string(m.scale)},
            {"dims",
             {{"d_text", d.d_text},
              {"d_vis", d.d_vis},
              {"heads_text", d.heads_text},
              {"heads_vis", d.heads_vis},
              {"layers", d.layers},
              {"hidden", d.hidden}}},
            {"temp_text", m.temp_text},
            {"temp_vis", m.temp_vis},
            {"ablate", to_json(m.ablate)},
            {"k_text", m.k_text},
            {"k_image", m.k_image},
            {"text_encoder",
             {{"buckets", m.text_encoder.buckets},
              {"max_length", m.text_encoder.max_length},
              {"hash_seed", m.text_encoder.hash_seed}}},
            {"feature_seed", m.feature_seed}};
}

// Missing keys keep their defaults. Selecting scale "paper" switches the
// default dims to 768/2048 before explicit dims are applied.
inline ModelConfig model_config_from_json(const json& j) {
    const std::string w = "model";
    detail::check_keys(j,
                       {"scale", "dims", "temp_text", "temp_vis", "ablate", "k_text", "k_image", "text_encoder",
                        "feature_seed"},
                       w);
    ModelConfig m;
    if (j.contains("scale")) {
        std::string s;
        detail::read(j, "scale", s, w);
        m.scale = parse_scale(s);
        if (m.scale == Scale::paper) m.dims = fusion::FusionDims::paper(0);
    }
    if (j.contains("dims")) {
        const auto& d = j.at("dims");
        detail::check_keys(d, {"d_text", "d_vis", "heads_text", "heads_vis", "layers", "hidden"}, "model.dims");
        detail::read(d, "d_text", m.dims.d_text, "model.dims");
        detail::read(d, "d_vis", m.dims.d_vis, "model.dims");
        detail::read(d, "heads_text", m.dims.heads_text, "model.dims");
        detail::read(d, "heads_vis", m.dims.heads_vis, "model.dims");
        detail::read(d, "layers", m.dims.layers, "model.dims");
        detail::read(d, "hidden", m.dims.hidden, "model.dims");
    }
    m.text_encoder.d_text = m.dims.d_text;
    detail::read(j, "temp_text", m.temp_text, w);
    detail::read(j, "temp_vis", m.temp_vis, w);
    if (j.contains("ablate")) m.ablate = ablation_from_json(j.at("ablate"));
    detail::read(j, "k_text", m.k_text, w);
    detail::read(j, "k_image", m.k_image, w);
    if (j.contains("text_encoder")) {
        const auto& t = j.at("text_encoder");
        detail::check_keys(t, {"buckets", "max_length", "hash_seed"}, "model.text_encoder");
        detail::read(t, "buckets", m.text_encoder.buckets, "model.text_encoder");
        detail::read(t, "max_length", m.text_encoder.max_length, "model.text_encoder");
        detail::read(t, "hash_seed", m.text_encoder.hash_seed, "model.text_encoder");
    }
    detail::read(j, "feature_seed", m.feature_seed, w);
    return m;
}

inline json to_json(const TrainConfig& c) {
    return {{"model", to_json(c.model)},
            {"learning_rate", c.learning_rate},
            {"warmup", c.warmup},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"max_steps", c.max_steps},
            {"seed", c.seed},
            {"adam",
             {{"beta1", c.adam.beta1},
              {"beta2", c.adam.beta2},
              {"eps", c.adam.eps},
              {"weight_decay", c.adam.weight_decay},
              {"max_grad_norm", c.adam.max_grad_norm}}},
            {"select_best_dev", c.select_best_dev},
            {"workers", c.workers}};
}

inline TrainConfig train_config_from_json(const json& j) {
    const std::string w = "train";
    detail::check_keys(j,
                       {"model", "learning_rate", "warmup", "batch_size", "epochs", "max_steps", "seed", "adam",
                        "select_best_dev", "workers"},
                       w);
    TrainConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    detail::read(j, "learning_rate", c.learning_rate, w);
    detail::read(j, "warmup", c.warmup, w);
    detail::read(j, "batch_size", c.batch_size, w);
    detail::read(j, "epochs", c.epochs, w);
    detail::read(j, "max_steps", c.max_steps, w);
    detail::read(j, "seed", c.seed, w);
    if (j.contains("adam")) {
        const auto& a = j.at("adam");
        detail::check_keys(a, {"beta1", "beta2", "eps", "weight_decay", "max_grad_norm"}, "train.adam");
        detail::read(a, "beta1", c.adam.beta1, "train.adam");
        detail::read(a, "beta2", c.adam.beta2, "train.adam");
        detail::read(a, "eps", c.adam.eps, "train.adam");
        detail::read(a, "weight_decay", c.adam.weight_decay, "train.adam");
        detail::read(a, "max_grad_norm", c.adam.max_grad_norm, "train.adam");
    }
    detail::read(j, "select_best_dev", c.select_best_dev, w);
    detail::read(j, "workers", c.workers, w);
    return c;
}

// ---- parallel helper -----------------------------------------------------------

// Runs fn(0..n-1) on up to `workers` threads; the first exception wins.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    if (workers <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex mu;
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < std::min(workers, n); ++w)
            pool.emplace_back([&] {
                for (std::size_t i; (i = next++) < n;) {
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(mu);
                        if (!err) err = std::current_exception();
                        next = n;
                    }
                }
            });
    }
    if (err) std::rethrow_exception(err);
}

// ---- prepared instances --------------------------------------------------------

// A text sequence in encoder-ready form: token ids (toy scale) or a feature
// matrix (paper scale).
struct PreparedText {
    std::vector<std::size_t> ids;
    Matrix<double> x;
    std::size_t e1 = 0, e2 = 0, cls = 0;
};

enum class EvidenceKind { entity, caption };

struct PreparedEvidenceText {
    PreparedText text;
    std::string source;  // "image", "obj1", ...
    bool from_object = false;
    EvidenceKind kind = EvidenceKind::entity;
    std::size_t index = 0;  // rank within (source, kind)
};

struct PreparedVisual {
    std::vector<double> x;
    VisualSource source = VisualSource::retrieved;
    std::size_t index = 0;  // rank among rows of the same source
};

struct PreparedInstance {
    std::string id;
    std::size_t label = 0;
    PreparedText content;
    std::vector<PreparedEvidenceText> texts;
    std::vector<PreparedVisual> visual;
};

// Precomputed matrices for paper-scale runs.
struct FeatureFiles {
    std::optional<xmrf::File> text;
    std::optional<xmrf::File> image;
};

struct PrepareOptions {
    const retrieval::EvidenceStore* store = nullptr;  // null: no evidence
    std::filesystem::path image_dir;                  // post images when a bundle is missing
    const FeatureFiles* features = nullptr;           // required at paper scale
};

namespace detail {

inline PreparedText toy_text(const std::vector<std::string>& tokens, const encoders::TextEncoderConfig& cfg) {
    if (tokens.size() > cfg.max_length)
        throw ValidationError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max length " +
                                  std::to_string(cfg.max_length),
                              "encoders");
    PreparedText t;
    for (const auto& tok : tokens) t.ids.push_back(encoders::token_id(tok, cfg));
    return t;
}

inline PreparedText feature_text(const xmrf::File& f, const std::string& key, std::size_t d_text) {
    auto feat = encoders::load_text_features<double>(f, key, d_text);
    PreparedText t;
    t.x = std::move(feat.x);
    t.e1 = feat.e1;
    t.e2 = feat.e2;
    t.cls = feat.cls;
    return t;
}

} // namespace detail

// Turns one split into prepared instances. Every stored evidence item is
// kept; `assemble` applies ablations and counts.
inline std::vector<PreparedInstance> prepare(const std::vector<RelationInstance>& split, const LabelVocabulary& labels,
                                             const ModelConfig& cfg, const PrepareOptions& opt) {
    const bool toy = cfg.scale == Scale::toy;
    if (!toy && (!opt.features || !opt.features->text || !opt.features->image))
        throw ConfigError("paper scale needs text and image feature files", "training_eval");
    const encoders::ToyImageEncoder image_encoder(toy ? cfg.dims.d_vis : 0, cfg.feature_seed);

    auto visual_row = [&](const std::string& bytes_or_digest, bool is_bytes, const std::string& what) {
        if (toy) {
            const std::string bytes = is_bytes ? bytes_or_digest : opt.store->read_image(bytes_or_digest);
            return image_encoder.encode<double>(bytes, what);
        }
        const std::string digest = is_bytes ? sha256_hex(bytes_or_digest) : bytes_or_digest;
        return encoders::load_image_feature<double>(*opt.features->image, encoders::image_key(digest), cfg.dims.d_vis);
    };

    std::vector<PreparedInstance> out;
    out.reserve(split.size());
    for (const auto& inst : split) {
        PreparedInstance p;
        p.id = inst.id;
        p.label = labels.index_of(inst.relation);
        if (toy) {
            const auto marked = insert_entity_markers(inst);
            p.content = detail::toy_text(marked.tokens, cfg.text_encoder);
            p.content.e1 = marked.e1_pos;
            p.content.e2 = marked.e2_pos;
        } else {
            p.content = detail::feature_text(*opt.features->text, encoders::content_key(inst.id), cfg.dims.d_text);
        }

        if (opt.store && opt.store->contains(inst.id)) {
            const auto b = opt.store->load_bundle(inst.id);
            if (!b.image_digest.empty())
                p.visual.push_back({visual_row(b.image_digest, false, "post image " + inst.image_id),
                                    VisualSource::content_image, 0});
            for (std::size_t i = 0; i < b.objects.size(); ++i)
                p.visual.push_back({visual_row(b.objects[i].digest, false, "object crop " + b.objects[i].object.crop_id),
                                    VisualSource::content_object, i});
            for (std::size_t i = 0; i < b.images.size(); ++i)
                p.visual.push_back({visual_row(b.images[i].digest, false, "retrieved image " + b.images[i].url),
                                    VisualSource::retrieved, i});
            for (const auto& s : b.sources) {
                auto add = [&](const std::vector<retrieval::EvidenceItem>& items, EvidenceKind kind) {
                    const char* kname = kind == EvidenceKind::entity ? "entity" : "caption";
                    for (std::size_t i = 0; i < items.size(); ++i) {
                        PreparedEvidenceText e;
                        e.source = s.source;
                        e.from_object = s.is_object();
                        e.kind = kind;
                        e.index = i;
                        if (toy) {
                            e.text = detail::toy_text(encoders::ToyTextEncoder<double>::evidence_tokens(
                                                          items[i].text, cfg.text_encoder.max_length),
                                                      cfg.text_encoder);
                        } else {
                            e.text = detail::feature_text(*opt.features->text,
                                                          encoders::evidence_key(inst.id, s.source, kname, i),
                                                          cfg.dims.d_text);
                        }
                        p.texts.push_back(std::move(e));
                    }
                };
                add(s.entities, EvidenceKind::entity);
                add(s.captions, EvidenceKind::caption);
            }
        } else if (!opt.image_dir.empty() && std::filesystem::exists(opt.image_dir / inst.image_id)) {
            p.visual.push_back({visual_row(retrieval::detail::read_file(opt.image_dir / inst.image_id), true,
                                           "post image " + inst.image_id),
                                VisualSource::content_image, 0});
        }
        out.push_back(std::move(p));
    }
    return out;
}

// Indices of the evidence that survives the ablation flags and count caps.
struct EvidenceSelection {
    std::vector<std::size_t> texts;
    std::vector<std::size_t> visual;
};

inline EvidenceSelection select_evidence(const PreparedInstance& p, const ModelConfig& cfg) {
    EvidenceSelection s;
    for (std::size_t i = 0; i < p.texts.size(); ++i) {
        const auto& t = p.texts[i];
        if (t.from_object ? cfg.ablate.object_evidence : cfg.ablate.image_evidence) continue;
        if (t.index >= cfg.k_text) continue;
        s.texts.push_back(i);
    }
    for (std::size_t i = 0; i < p.visual.size(); ++i) {
        const auto& v = p.visual[i];
        if (v.source == VisualSource::retrieved && (cfg.ablate.visual_evidence || v.index >= cfg.k_image)) continue;
        s.visual.push_back(i);
    }
    return s;
}

// ---- model ---------------------------------------------------------------------

struct Model {
    ModelConfig config;
    LabelVocabulary labels;
    fusion::FusionParams<double> fusion;
    encoders::ToyTextEncoder<double> text;  // toy scale only

    static Model init(ModelConfig cfg, const LabelVocabulary& labels, std::uint64_t seed) {
        cfg.dims.labels = labels.size();
        cfg.dims.validate();
        cfg.text_encoder.d_text = cfg.dims.d_text;
        Model m;
        m.config = cfg;
        m.labels = labels;
        m.fusion = fusion::FusionParams<double>::init(cfg.dims, seed);
        if (cfg.scale == Scale::toy) m.text = encoders::ToyTextEncoder<double>(cfg.text_encoder, seed);
        return m;
    }

    Model zeros_like() const {
        Model z;
        z.config = config;
        z.labels = labels;
        z.fusion = fusion::FusionParams<double>::zeros(config.dims);
        if (config.scale == Scale::toy) z.text = encoders::ToyTextEncoder<double>::zeros_like(text);
        return z;
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        fusion.visit(fn);
        if (config.scale == Scale::toy) text.visit(fn);
    }
    template <typename Fn>
    void visit(Fn&& fn) const {
        fusion.visit(fn);
        if (config.scale == Scale::toy) text.visit(fn);
    }

    std::vector<std::pair<std::string, Matrix<double>*>> tensors() {
        std::vector<std::pair<std::string, Matrix<double>*>> out;
        visit([&](const std::string& n, Matrix<double>& m) { out.emplace_back(n, &m); });
        return out;
    }

    void add(const Model& o) {
        std::vector<const Matrix<double>*> src;
        o.visit([&](const std::string&, const Matrix<double>& m) { src.push_back(&m); });
        std::size_t i = 0;
        visit([&](const std::string&, Matrix<double>& m) { m += *src[i++]; });
    }

    void scale(double s) {
        visit([&](const std::string&, Matrix<double>& m) {
            for (auto& v : m.data()) v *= s;
        });
    }

    // Rounds every tensor through float32, the checkpoint precision.
    void round_to_float() {
        visit([](const std::string&, Matrix<double>& m) {
            for (auto& v : m.data()) v = static_cast<double>(static_cast<float>(v));
        });
    }

    fusion::TextSequence<double> embed(const PreparedText& t) const {
        fusion::TextSequence<double> s;
        s.x = config.scale == Scale::toy ? text.embed(t.ids) : t.x;
        s.e1 = t.e1;
        s.e2 = t.e2;
        s.cls = t.cls;
        return s;
    }

    fusion::FusionInput<double> assemble(const PreparedInstance& p, const EvidenceSelection& sel) const {
        fusion::FusionInput<double> in;
        in.content = embed(p.content);
        for (std::size_t i : sel.texts) in.retrieved.push_back(embed(p.texts[i].text));
        in.visual = Matrix<double>(sel.visual.size(), config.dims.d_vis);
        for (std::size_t r = 0; r < sel.visual.size(); ++r) {
            const auto& v = p.visual[sel.visual[r]];
            if (v.x.size() != config.dims.d_vis)
                throw ShapeError("visual row width " + std::to_string(v.x.size()) + " differs from d_vis " +
                                 std::to_string(config.dims.d_vis));
            std::copy(v.x.begin(), v.x.end(), in.visual.row(r).begin());
            in.sources.push_back(v.source);
        }
        return in;
    }

    fusion::FusionOutput<double> predict(const PreparedInstance& p) const {
        const auto in = assemble(p, select_evidence(p, config));
        return fusion::forward(fusion, config.fusion(), in);
    }

    // Loss for one instance; gradients accumulate into `grad`.
    double loss_and_grad(const PreparedInstance& p, Model& grad) const {
        const auto sel = select_evidence(p, config);
        const auto in = assemble(p, sel);
        const auto fcfg = config.fusion();
        fusion::FusionCache<double> cache;
        const auto out = fusion::forward(fusion, fcfg, in, &cache);
        const double loss = fusion::cross_entropy(out, p.label);
        const auto dx = fusion::backward(fusion, fcfg, cache, p.label, grad.fusion);
        if (config.scale == Scale::toy) {
            text.backward(p.content.ids, dx.content, grad.text);
            for (std::size_t i = 0; i < sel.texts.size(); ++i)
                text.backward(p.texts[sel.texts[i]].text.ids, dx.retrieved[i], grad.text);
        }
        return loss;
    }
};

inline std::size_t argmax(const std::vector<double>& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ---- checkpoints ---------------------------------------------------------------

inline constexpr const char* kConfigRecord = "__config__";

inline json checkpoint_header(const Model& m, const json& run_config = nullptr) {
    json j{{"model", to_json(m.config)}, {"labels", m.labels.labels()}};
    if (!run_config.is_null()) j["run"] = run_config;
    return j;
}

// float32 XMRF; the first record echoes the configuration as JSON bytes.
inline std::string checkpoint_bytes(const Model& m, const json& run_config = nullptr) {
    std::vector<xmrf::Record> recs;
    recs.push_back(xmrf::bytes_record(kConfigRecord, checkpoint_header(m, run_config).dump()));
    m.visit([&](const std::string& name, const Matrix<double>& t) {
        recs.push_back({name, t.cast<float>(), std::nullopt});
    });
    return xmrf::encode(recs);
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& m, const json& run_config = nullptr) {
    retrieval::detail::write_atomic(path, checkpoint_bytes(m, run_config));
}

inline Model load_checkpoint(const std::filesystem::path& path) {
    const auto file = xmrf::File(xmrf::read_file(path));
    json header;
    try {
        header = json::parse(xmrf::record_bytes(file.at(kConfigRecord)));
    } catch (const json::exception& e) {
        throw FormatError("checkpoint " + path.string() + " has an unreadable config record: " + e.what());
    }
    Model m = Model::init(model_config_from_json(header.at("model")),
                          LabelVocabulary(header.at("labels").get<std::vector<std::string>>()), 0);
    m.visit([&](const std::string& name, Matrix<double>& t) {
        const auto& r = file.at(name);
        if (r.values.rows() != t.rows() || r.values.cols() != t.cols())
            throw FormatError("checkpoint tensor '" + name + "' has shape " + r.values.shape_str() + ", expected " +
                              t.shape_str());
        t = r.values.cast<double>();
    });
    return m;
}

// ---- evaluation ----------------------------------------------------------------

struct Evaluation {
    metrics::EvalReport report;
    std::vector<std::size_t> predictions;
};

inline Evaluation evaluate(const Model& m, const std::vector<PreparedInstance>& split, std::size_t workers = 1) {
    Evaluation e;
    e.predictions.assign(split.size(), 0);
    parallel_for(split.size(), workers, [&](std::size_t i) { e.predictions[i] = argmax(m.predict(split[i]).logits); });
    std::vector<std::size_t> gold;
    for (const auto& p : split) gold.push_back(p.label);
    e.report = metrics::evaluate_predictions(gold, e.predictions, m.labels.size());
    return e;
}

// The split's labels must be the checkpoint's vocabulary, in order.
inline void check_vocabulary(const Model& m, const LabelVocabulary& labels) {
    if (!(m.labels == labels))
        throw ConfigError("label vocabulary (" + std::to_string(labels.size()) +
                              " labels) does not match the checkpoint (" + std::to_string(m.labels.size()) + " labels)",
                          "training_eval");
}

// ---- training ------------------------------------------------------------------

struct StepLog {
    std::size_t step = 0;
    double loss = 0;
    double lr = 0;
    bool operator==(const StepLog&) const = default;
};

inline std::string to_jsonl(const std::vector<StepLog>& log) {
    std::string out;
    for (const auto& s : log) out += json{{"step", s.step}, {"loss", s.loss}, {"lr", s.lr}}.dump() + "\n";
    return out;
}

struct TrainResult {
    Model model;  // best-dev (or final) parameters, rounded to float32
    std::vector<StepLog> log;
    std::size_t steps = 0;
    std::size_t best_epoch = 0;
    double best_dev_f1 = -1;
};

inline std::size_t total_steps(const TrainConfig& cfg, std::size_t n) {
    if (cfg.max_steps) return cfg.max_steps;
    return cfg.epochs * ((n + cfg.batch_size - 1) / cfg.batch_size);
}

// Mini-batch training. Per-instance gradients are computed into separate
// buffers (in parallel when workers > 1) and summed in batch order, so the
// result does not depend on the worker count.
inline TrainResult train(const std::vector<PreparedInstance>& train_set, const std::vector<PreparedInstance>& dev_set,
                         const LabelVocabulary& labels, const TrainConfig& cfg,
                         const std::function<void(const StepLog&)>& on_step = {}) {
    cfg.validate();
    if (train_set.empty()) throw ConfigError("training split is empty", "training_eval");
    Model model = Model::init(cfg.model, labels, cfg.seed);
    optim::Adam<double> adam(cfg.adam);
    auto params = model.tensors();

    const std::size_t n = train_set.size();
    const std::size_t total = total_steps(cfg, n);
    const std::size_t lanes = std::max<std::size_t>(1, std::min(cfg.workers, cfg.batch_size));
    std::vector<Model> scratch(lanes, model.zeros_like());
    Model grad = model.zeros_like();
    auto grad_tensors = grad.tensors();

    std::vector<std::size_t> order(n);
    Rng shuffle_rng(cfg.seed, "training/shuffle");

    TrainResult result;
    std::optional<Model> best;
    std::size_t step = 0;
    for (std::size_t epoch = 0; step < total; ++epoch) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        for (std::size_t b = 0; b < n && step < total; b += cfg.batch_size, ++step) {
            const std::size_t bsz = std::min(cfg.batch_size, n - b);
            grad.scale(0.0);
            std::vector<double> losses(bsz, 0.0);
            for (std::size_t w0 = 0; w0 < bsz; w0 += lanes) {
                const std::size_t wn = std::min(lanes, bsz - w0);
                parallel_for(wn, cfg.workers, [&](std::size_t k) {
                    scratch[k].scale(0.0);
                    losses[w0 + k] = model.loss_and_grad(train_set[order[b + w0 + k]], scratch[k]);
                });
                for (std::size_t k = 0; k < wn; ++k) grad.add(scratch[k]);
            }
            double loss = 0;
            for (double l : losses) loss += l;
            loss /= static_cast<double>(bsz);
            if (!std::isfinite(loss)) {
                std::string ids;
                for (std::size_t k = 0; k < bsz; ++k) {
                    if (!ids.empty()) ids += ", ";
                    ids += train_set[order[b + k]].id + " (loss " + std::to_string(losses[k]) + ")";
                }
                throw TrainingError("non-finite loss at step " + std::to_string(step) + "; batch: " + ids);
            }
            grad.scale(1.0 / static_cast<double>(bsz));
            const double lr = optim::warmup_linear(step, total, cfg.learning_rate, cfg.warmup);
            adam.step(params, grad_tensors, lr);
            StepLog s{step, loss, lr};
            result.log.push_back(s);
            if (on_step) on_step(s);
        }

        if (cfg.select_best_dev && !dev_set.empty()) {
            const double f1 = evaluate(model, dev_set, cfg.workers).report.macro_f1;
            log::debug("training_eval", "epoch=" + std::to_string(epoch) + " dev_macro_f1=" + std::to_string(f1));
            if (f1 > result.best_dev_f1) {
                result.best_dev_f1 = f1;
                result.best_epoch = epoch;
                best = model;
            }
        } else {
            result.best_epoch = epoch;
        }
    }
    result.steps = step;
    result.model = best ? std::move(*best) : std::move(model);
    result.model.round_to_float();
    return result;
}

// ---- experiments ---------------------------------------------------------------

struct Experiment {
    LabelVocabulary labels;
    std::vector<PreparedInstance> train, dev, test;
};

inline Experiment prepare_experiment(const Dataset& ds, const ModelConfig& cfg, const PrepareOptions& opt) {
    return {ds.labels, prepare(ds.train, ds.labels, cfg, opt), prepare(ds.dev, ds.labels, cfg, opt),
            prepare(ds.test, ds.labels, cfg, opt)};
}

// One seed: train, keep the checkpoint-precision model, score the test split.
struct SeedRun {
    TrainResult trained;
    Evaluation test;
};

inline SeedRun run_seed(const Experiment& exp, TrainConfig cfg, std::uint64_t seed) {
    cfg.seed = seed;
    SeedRun r;
    r.trained = train(exp.train, exp.dev, exp.labels, cfg);
    r.test = evaluate(r.trained.model, exp.test, cfg.workers);
    return r;
}

inline metrics::SeedSummary run_seeds(const Experiment& exp, const TrainConfig& cfg,
                                      const std::vector<std::uint64_t>& seeds,
                                      const std::function<void(std::uint64_t, const SeedRun&)>& on_run = {}) {
    std::vector<metrics::EvalReport> reports;
    for (auto s : seeds) {
        auto r = run_seed(exp, cfg, s);
        if (on_run) on_run(s, r);
        reports.push_back(r.test.report);
    }
    return metrics::summarize(seeds, std::move(reports));
}

struct AblationRow {
    std::string name;
    TrainConfig config;
    metrics::SeedSummary summary;
};

// The full model followed by one row per removed component.
inline std::vector<std::pair<std::string, TrainConfig>> ablation_configs(const TrainConfig& base) {
    std::vector<std::pair<std::string, TrainConfig>> rows;
    auto with = [&](const char* name, auto set) {
        TrainConfig c = base;
        c.model.ablate = Ablation{};
        set(c.model.ablate);
        rows.emplace_back(name, c);
    };
    with("Full", [](Ablation&) {});
    with("w/o Object Evi.", [](Ablation& a) { a.object_evidence = true; });
    with("w/o Image Evi.", [](Ablation& a) { a.image_evidence = true; });
    with("w/o Visual Evi.", [](Ablation& a) { a.visual_evidence = true; });
    with("w/o Selection", [](Ablation& a) { a.selection = true; });
    with("w/o Consistency", [](Ablation& a) { a.consistency = true; });
    return rows;
}

inline std::vector<AblationRow> run_ablation_suite(
    const Experiment& exp, const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
    const std::function<void(const std::string&, std::uint64_t, const SeedRun&)>& on_run = {}) {
    std::vector<AblationRow> rows;
    for (auto& [name, cfg] : ablation_configs(base)) {
        log::info("training_eval", "ablation row=\"" + name + "\"");
        auto summary = run_seeds(exp, cfg, seeds, [&](std::uint64_t s, const SeedRun& r) {
            if (on_run) on_run(name, s, r);
        });
        rows.push_back({name, cfg, std::move(summary)});
    }
    return rows;
}

inline std::string format_table(const std::vector<AblationRow>& rows) {
    auto cell = [](const metrics::MeanStd& m) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%6.2f ± %5.2f", 100 * m.mean, 100 * m.std);
        return std::string(buf);
    };
    std::size_t w = 5;
    for (const auto& r : rows) w = std::max(w, r.name.size());
    auto pad = [](std::string s, std::size_t n) {
        s.resize(std::max(n, s.size()), ' ');
        return s;
    };
    // "±" is two bytes but one column; cells are 15 columns wide
    std::string out = pad("Model", w) + "  " + pad("Accuracy", 15) + "  " + pad("Precision", 15) + "  " +
                      pad("Recall", 15) + "  F1\n";
    for (const auto& r : rows) {
        const auto& s = r.summary;
        out += pad(r.name, w) + "  " + cell(s.accuracy) + "  " + cell(s.precision) + "  " + cell(s.recall) + "  " +
               cell(s.f1) + "\n";
    }
    return out;
}

inline json ablation_report(const std::vector<AblationRow>& rows, const LabelVocabulary& labels) {
    json j = json::array();
    for (const auto& r : rows)
        j.push_back({{"name", r.name}, {"config", to_json(r.config)}, {"metrics", to_json(r.summary, labels.labels())}});
    return j;
}

// ---- evidence-count sweep ------------------------------------------------------

enum class SweepModality { textual, visual };

struct SweepPoint {
    std::size_t count = 0;
    metrics::MeanStd f1;
    std::vector<double> per_seed;
};

struct SweepResult {
    std::vector<SweepPoint> textual, visual;
};

inline std::vector<std::size_t> default_sweep_counts() {
    std::vector<std::size_t> c;
    for (std::size_t i = 1; i <= 20; ++i) c.push_back(i);
    return c;
}

// Smallest k any bundle in the store was built with (0 for an empty store).
inline std::size_t store_min_k(const retrieval::EvidenceStore& store) {
    std::size_t k = 0;
    bool first = true;
    for (const auto& id : store.instance_ids()) {
        const std::size_t bk = store.entry(id)->at("k").get<std::size_t>();
        k = first ? bk : std::min(k, bk);
        first = false;
    }
    return k;
}

// A count of 0 removes every item of that modality.
inline TrainConfig sweep_config(const TrainConfig& base, SweepModality mod, std::size_t count) {
    TrainConfig c = base;
    if (mod == SweepModality::textual)
        c.model.k_text = count;
    else
        c.model.k_image = count;
    return c;
}

inline SweepResult sweep_evidence(const Experiment& exp, const TrainConfig& base,
                                  const std::vector<std::uint64_t>& seeds, const std::vector<std::size_t>& counts,
                                  std::size_t store_k,
                                  const std::function<void(SweepModality, std::size_t)>& on_point = {}) {
    const std::size_t need = counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end());
    if (store_k < need)
        throw ConfigError("evidence store was built with k=" + std::to_string(store_k) + " but the sweep needs k>=" +
                              std::to_string(need),
                          "training_eval");
    SweepResult out;
    for (auto mod : {SweepModality::textual, SweepModality::visual}) {
        auto& points = mod == SweepModality::textual ? out.textual : out.visual;
        for (std::size_t c : counts) {
            if (on_point) on_point(mod, c);
            const auto s = run_seeds(exp, sweep_config(base, mod, c), seeds);
            SweepPoint p{c, s.f1, {}};
            for (const auto& r : s.runs) p.per_seed.push_back(r.macro_f1);
            points.push_back(std::move(p));
        }
    }
    return out;
}

inline std::string sweep_csv(const std::vector<SweepPoint>& points) {
    std::ostringstream out;
    out.precision(17);
    out << "count,mean_f1,std_f1\n";
    for (const auto& p : points) out << p.count << ',' << p.f1.mean << ',' << p.f1.std << '\n';
    return out.str();
}

} // namespace mre::training
