// mre: command-line entry point for evidence retrieval, feature files,
// training, evaluation, ablations and evidence-count sweeps.

#include <cstdlib>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "mre/data_model.hpp"
#include "mre/encoders.hpp"
#include "mre/log.hpp"
#include "mre/retrieval/http_transport.hpp"
#include "mre/retrieval/mock_backend.hpp"
#include "mre/retrieval/retriever.hpp"
#include "mre/run_config.hpp"
#include "mre/training.hpp"
#include "mre/xmrf.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mre;

namespace {

constexpr const char* kSubcommands = "retrieve, features, train, eval, ablate, sweep-evidence, validate-store";

// Flag values that override the config file. Unset flags leave it alone.
struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<std::string> backend;
    std::string fixtures;
    std::optional<std::size_t> k, m, workers, max_steps;
    std::optional<double> rate;
    std::string store;
    bool verbose = false, quiet = false;
};

void add_common(CLI::App* sub, Overrides& o, bool need_config) {
    auto* cfg = sub->add_option("--config", o.config, "run config file (JSON, schema in `mre --help`)");
    if (need_config) cfg->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "run this single seed instead of the config's seed list");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--backend", o.backend, "retrieval backend")->check(CLI::IsMember({"mock", "live"}));
    sub->add_option("--fixtures", o.fixtures, "fixture directory for the mock backend");
    sub->add_option("--k", o.k, "evidence items per source and retrieved images per instance");
    sub->add_option("--m", o.m, "object crops per image");
    sub->add_option("--workers", o.workers, "worker threads for retrieval, training and evaluation")
        ->check(CLI::PositiveNumber);
    sub->add_option("--rate", o.rate, "backend calls per second (0 = unlimited)")->check(CLI::NonNegativeNumber);
    sub->add_option("--store", o.store, "evidence store directory");
    sub->add_option("--max-steps", o.max_steps, "cap on optimizer steps per training run");
    sub->add_flag("-v,--verbose", o.verbose, "debug logging");
    sub->add_flag("-q,--quiet", o.quiet, "warnings and errors only");
}

fs::path abs_path(const std::string& s) { return fs::absolute(fs::path(s)).lexically_normal(); }

RunConfig resolve(const Overrides& o) {
    RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
    if (o.config.empty()) c.out = abs_path("runs");
    if (o.seed) c.seeds = {*o.seed};
    if (!o.out.empty()) c.out = abs_path(o.out);
    if (o.backend) c.retrieval.backend = *o.backend;
    if (!o.fixtures.empty()) c.retrieval.fixtures = abs_path(o.fixtures);
    if (o.k) c.retrieval.k = *o.k;
    if (o.m) c.retrieval.m = *o.m;
    if (o.workers) c.retrieval.workers = c.train.workers = *o.workers;
    if (o.rate) c.retrieval.rate = *o.rate;
    if (!o.store.empty()) c.store = abs_path(o.store);
    if (o.max_steps) c.train.max_steps = *o.max_steps;
    c.validate();
    return c;
}

// The echo stored alongside artifacts and inside checkpoints. The output
// directory is left out so a rerun elsewhere reproduces the same bytes.
json artifact_echo(const RunConfig& c) {
    json j = to_json(c);
    j.erase("out");
    return j;
}

void write_text(const fs::path& p, const std::string& s) { retrieval::detail::write_atomic(p, s); }

void echo_config(const fs::path& dir, const RunConfig& c) {
    fs::create_directories(dir);
    write_text(dir / "run_config.json", to_json(c).dump(2) + "\n");
}

Dataset load_data(const RunConfig& c) {
    if (c.data.train.empty()) throw ConfigError("data.train is not set");
    return load_splits(c.data.train, c.data.dev, c.data.test, c.data.max_length);
}

std::vector<RelationInstance> all_instances(const Dataset& d) {
    std::vector<RelationInstance> all = d.train;
    all.insert(all.end(), d.dev.begin(), d.dev.end());
    all.insert(all.end(), d.test.begin(), d.test.end());
    std::set<std::string> seen;
    for (const auto& i : all)
        if (!seen.insert(i.id).second) throw ValidationError("instance id '" + i.id + "' appears in more than one split");
    return all;
}

// Keeps the store and feature files alive for the prepared experiment.
struct Inputs {
    Dataset data;
    std::optional<retrieval::EvidenceStore> store;
    training::FeatureFiles features;
    training::PrepareOptions options;
};

std::unique_ptr<Inputs> load_inputs(const RunConfig& c, bool with_features = true) {
    auto in = std::make_unique<Inputs>();
    in->data = load_data(c);
    if (!c.store.empty()) {
        if (!fs::exists(c.store / "manifest.json"))
            throw ConfigError("evidence store " + c.store.string() + " has no manifest; run `mre retrieve` first");
        in->store.emplace(retrieval::EvidenceStore::open(c.store));
        in->options.store = &*in->store;
    } else {
        log::warn("cli", "no evidence store configured; running without retrieved evidence");
    }
    in->options.image_dir = c.data.images;
    if (with_features && (!c.features_text.empty() || !c.features_image.empty())) {
        if (!c.features_text.empty()) in->features.text = xmrf::File::open(c.features_text);
        if (!c.features_image.empty()) in->features.image = xmrf::File::open(c.features_image);
        in->options.features = &in->features;
    }
    return in;
}

std::string seed_dir(std::uint64_t s) { return "seed-" + std::to_string(s); }

std::string slug(const std::string& name) {
    std::string out;
    for (char ch : name) {
        if (std::isalnum(static_cast<unsigned char>(ch))) out.push_back(static_cast<char>(std::tolower(ch)));
        else if (!out.empty() && out.back() != '-') out.push_back('-');
    }
    while (!out.empty() && out.back() == '-') out.pop_back();
    return out;
}

std::string report_bytes(const metrics::EvalReport& r, const LabelVocabulary& labels) {
    return metrics::to_json(r, labels.labels()).dump(2) + "\n";
}

void write_seed_run(const fs::path& dir, const training::SeedRun& run, const LabelVocabulary& labels,
                    const json& echo, std::uint64_t seed) {
    fs::create_directories(dir);
    json ck_echo = echo;
    ck_echo["seed"] = seed;
    training::save_checkpoint(dir / "checkpoint.xmrf", run.trained.model, ck_echo);
    write_text(dir / "train_log.jsonl", training::to_jsonl(run.trained.log));
    write_text(dir / "test_report.json", report_bytes(run.test.report, labels));
}

// ---- subcommands ---------------------------------------------------------------

int cmd_retrieve(const RunConfig& c) {
    const fs::path root = c.store;
    if (root.empty()) throw ConfigError("no store directory (set `store` or pass --store)");
    const auto data = load_data(c);
    const auto all = all_instances(data);

    std::unique_ptr<retrieval::Backend> backend;
    if (c.retrieval.backend == "live") {
        backend = std::make_unique<retrieval::GoogleBackend>(std::make_shared<retrieval::HttplibTransport>(),
                                                             retrieval::Credentials::from_env());
    } else {
        if (c.retrieval.fixtures.empty()) throw ConfigError("mock backend needs retrieval.fixtures or --fixtures");
        backend = std::make_unique<retrieval::MockBackend>(c.retrieval.fixtures);
    }
    retrieval::Retriever retriever(*backend, c.retrieval_config());
    auto store = retrieval::EvidenceStore::create(root);
    const auto stats = retrieval::build_evidence_store(all, c.data.images, store, retriever);
    echo_config(root, c);
    std::cout << "store " << root.string() << ": " << store.size() << " instances (" << stats.retrieved
              << " retrieved, " << stats.skipped << " cached, " << stats.partial << " partial)\n";
    return 0;
}

int cmd_validate_store(const RunConfig& c) {
    if (c.store.empty()) throw ConfigError("no store directory (set `store` or pass --store)");
    const auto store = retrieval::EvidenceStore::open(c.store);
    std::size_t partial = 0;
    for (const auto& id : store.instance_ids())
        if (store.entry(id)->at("status") != "complete") ++partial;
    std::cout << "store " << c.store.string() << " is valid: " << store.size() << " instances, " << partial
              << " partial, min k " << training::store_min_k(store) << "\n";
    return 0;
}

int cmd_features_check(const std::string& file, std::size_t width) {
    const auto records = xmrf::read_file(file);
    std::size_t text = 0, image = 0, other = 0;
    for (const auto& r : records) {
        if (width && r.values.cols() != width && r.key != training::kConfigRecord)
            throw ConfigError("record '" + r.key + "' has width " + std::to_string(r.values.cols()) + ", expected " +
                                  std::to_string(width),
                              "encoders");
        (r.positions ? text : (r.values.rows() == 1 ? image : other))++;
    }
    std::cout << file << ": " << records.size() << " records (" << text << " with positions, " << image
              << " single-row, " << other << " other)\n";
    return 0;
}

// Frozen toy-encoder features in the exporter's key layout, so the
// feature-file path can run end to end without the Python exporter.
int cmd_features_export_toy(const RunConfig& c, std::size_t d_text, std::size_t d_vis) {
    auto in = load_inputs(c, false);
    const auto seed = c.train.model.feature_seed;
    encoders::TextEncoderConfig tcfg = c.train.model.text_encoder;
    tcfg.d_text = d_text;
    const encoders::ToyTextEncoder<float> text(tcfg, seed);
    const encoders::ToyImageEncoder image(d_vis, seed);

    std::vector<xmrf::Record> text_recs, image_recs;
    std::set<std::string> digests;
    auto add_image = [&](const std::string& bytes) {
        const auto d = sha256_hex(bytes);
        if (!digests.insert(d).second) return;
        const auto row = image.encode<float>(bytes, d);
        image_recs.push_back({encoders::image_key(d), Matrix<float>(1, d_vis, row), std::nullopt});
    };
    for (const auto& inst : all_instances(in->data)) {
        const auto f = text.encode(insert_entity_markers(inst));
        text_recs.push_back({encoders::content_key(inst.id), f.x,
                             xmrf::Positions{static_cast<std::uint32_t>(f.e1), static_cast<std::uint32_t>(f.e2), 0}});
        if (in->store && in->store->contains(inst.id)) {
            const auto b = in->store->load_bundle(inst.id);
            for (const auto& s : b.sources) {
                auto add = [&](const std::vector<retrieval::EvidenceItem>& items, const char* kind) {
                    for (std::size_t i = 0; i < items.size(); ++i)
                        text_recs.push_back({encoders::evidence_key(inst.id, s.source, kind, i),
                                             text.encode_evidence(items[i].text).x, xmrf::Positions{0, 0, 0}});
                };
                add(s.entities, "entity");
                add(s.captions, "caption");
            }
            if (!b.image_digest.empty()) add_image(in->store->read_image(b.image_digest));
            for (const auto& o : b.objects) add_image(in->store->read_image(o.digest));
            for (const auto& r : b.images) add_image(in->store->read_image(r.digest));
        } else if (!c.data.images.empty() && fs::exists(c.data.images / inst.image_id)) {
            add_image(retrieval::detail::read_file(c.data.images / inst.image_id));
        }
    }
    fs::create_directories(c.out);
    xmrf::write_file(c.out / "text.xmrf", text_recs);
    xmrf::write_file(c.out / "image.xmrf", image_recs);
    echo_config(c.out, c);
    std::cout << "wrote " << text_recs.size() << " text and " << image_recs.size() << " image records to "
              << c.out.string() << "\n";
    return 0;
}

int cmd_train(const RunConfig& c) {
    auto in = load_inputs(c);
    const auto exp = training::prepare_experiment(in->data, c.train.model, in->options);
    const json echo = artifact_echo(c);
    echo_config(c.out, c);
    std::vector<metrics::EvalReport> reports;
    for (auto seed : c.seeds) {
        log::info("training_eval", "training seed=" + std::to_string(seed));
        const auto run = training::run_seed(exp, c.train, seed);
        write_seed_run(c.out / seed_dir(seed), run, exp.labels, echo, seed);
        reports.push_back(run.test.report);
        std::cout << "seed " << seed << ": " << run.trained.steps << " steps, final loss "
                  << (run.trained.log.empty() ? 0.0 : run.trained.log.back().loss) << ", test macro F1 "
                  << run.test.report.macro_f1 << "\n";
    }
    const auto summary = metrics::summarize(c.seeds, std::move(reports));
    write_text(c.out / "summary.json", metrics::to_json(summary, exp.labels.labels()).dump(2) + "\n");
    return 0;
}

int cmd_eval(const RunConfig& c, const std::string& checkpoint, const std::string& split) {
    const auto model = training::load_checkpoint(checkpoint);
    auto in = load_inputs(c);
    training::check_vocabulary(model, in->data.labels);
    const std::vector<RelationInstance>* rows = split == "train" ? &in->data.train
                                                : split == "dev" ? &in->data.dev
                                                                 : &in->data.test;
    const auto prepared = training::prepare(*rows, in->data.labels, model.config, in->options);
    const auto ev = training::evaluate(model, prepared, c.train.workers);
    echo_config(c.out, c);
    write_text(c.out / "eval_report.json", report_bytes(ev.report, in->data.labels));
    std::cout << split << ": n=" << ev.report.n << " accuracy " << ev.report.accuracy << " macro F1 "
              << ev.report.macro_f1 << " micro F1 " << ev.report.micro_f1 << "\n";
    return 0;
}

int cmd_ablate(const RunConfig& c) {
    auto in = load_inputs(c);
    // prepared once: ablations only change which evidence assemble() keeps
    const auto exp = training::prepare_experiment(in->data, c.train.model, in->options);
    const json echo = artifact_echo(c);
    echo_config(c.out, c);
    const auto rows = training::run_ablation_suite(
        exp, c.train, c.seeds, [&](const std::string& name, std::uint64_t seed, const training::SeedRun& run) {
            write_seed_run(c.out / "runs" / slug(name) / seed_dir(seed), run, exp.labels, echo, seed);
        });
    const auto table = training::format_table(rows);
    write_text(c.out / "ablation.json", training::ablation_report(rows, exp.labels).dump(2) + "\n");
    write_text(c.out / "ablation.txt", table);
    std::cout << table;
    return 0;
}

int cmd_sweep(const RunConfig& c, const std::vector<std::size_t>& counts_flag) {
    auto in = load_inputs(c);
    if (!in->store) throw ConfigError("the evidence sweep needs an evidence store");
    const auto counts = counts_flag.empty() ? c.sweep_counts : counts_flag;
    const auto exp = training::prepare_experiment(in->data, c.train.model, in->options);
    echo_config(c.out, c);
    const auto res = training::sweep_evidence(exp, c.train, c.seeds, counts, training::store_min_k(*in->store),
                                              [](training::SweepModality m, std::size_t n) {
                                                  log::info("training_eval",
                                                            std::string("sweep modality=") +
                                                                (m == training::SweepModality::textual ? "textual"
                                                                                                       : "visual") +
                                                                " count=" + std::to_string(n));
                                              });
    write_text(c.out / "sweep_textual.csv", training::sweep_csv(res.textual));
    write_text(c.out / "sweep_visual.csv", training::sweep_csv(res.visual));
    json j;
    for (auto [name, pts] : {std::pair{"textual", &res.textual}, std::pair{"visual", &res.visual}})
        for (const auto& p : *pts)
            j[name].push_back({{"count", p.count}, {"f1", metrics::to_json(p.f1)}, {"per_seed", p.per_seed}});
    write_text(c.out / "sweep.json", j.dump(2) + "\n");
    std::cout << "wrote " << res.textual.size() << " textual and " << res.visual.size() << " visual points to "
              << c.out.string() << "\n";
    return 0;
}

std::string schema_text() {
    RunConfig d;
    d.out = "runs";
    json j = to_json(d);
    j["data"] = {{"train", "<path>"}, {"dev", "<path>"}, {"test", "<path>"}, {"images", "<dir>"}, {"max_length", 128}};
    j["retrieval"]["fixtures"] = "<dir, mock backend only>";
    j["store"] = "<dir>";
    j["features"] = {{"text", "<XMRF file, paper scale>"}, {"image", "<XMRF file, paper scale>"}};
    return "\nRun config schema (JSON; defaults shown; unknown keys are rejected):\n" + j.dump(2) +
           "\n\nRelative paths resolve against the config file's directory. Flags override the file.\n"
           "train.model.scale \"paper\" switches default dims to d_text 768, d_vis 2048 and requires\n"
           "feature files. Live retrieval reads MRE_GOOGLE_API_KEY and MRE_GOOGLE_CSE_ID from the\n"
           "environment.\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multimodal relation extraction with retrieved textual and visual evidence", "mre"};
    app.require_subcommand(1);
    app.footer(schema_text());

    Overrides o;
    auto* retrieve = app.add_subcommand("retrieve", "build or extend the evidence store for every split");
    add_common(retrieve, o, true);

    auto* features = app.add_subcommand("features", "inspect or produce XMRF feature files");
    features->require_subcommand(1);
    std::string check_file;
    std::size_t check_width = 0, d_text = 768, d_vis = 2048;
    auto* check = features->add_subcommand("check", "validate an XMRF file");
    check->add_option("file", check_file, "XMRF file")->required()->check(CLI::ExistingFile);
    check->add_option("--width", check_width, "expected row width of every record");
    auto* export_toy = features->add_subcommand("export-toy", "write frozen toy-encoder features for the dataset");
    add_common(export_toy, o, true);
    export_toy->add_option("--d-text", d_text, "text feature width")->check(CLI::PositiveNumber);
    export_toy->add_option("--d-vis", d_vis, "image feature width")->check(CLI::PositiveNumber);

    auto* train = app.add_subcommand("train", "train one model per seed and score the test split");
    add_common(train, o, true);

    std::string checkpoint, split = "test";
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_common(eval, o, true);
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
    eval->add_option("--split", split, "split to score")->check(CLI::IsMember({"train", "dev", "test"}));

    auto* ablate = app.add_subcommand("ablate", "full model plus five ablations, each over every seed");
    add_common(ablate, o, true);

    std::vector<std::size_t> counts;
    auto* sweep = app.add_subcommand("sweep-evidence", "macro F1 against evidence count for each modality");
    add_common(sweep, o, true);
    sweep->add_option("--counts", counts, "evidence counts (default: the config's sweep.counts)")->delimiter(',');

    auto* validate = app.add_subcommand("validate-store", "check every file an evidence store references");
    add_common(validate, o, false);

    auto usage_error = [](const std::string& why) {
        std::cerr << "mre: usage error: " << why << "\n"
                  << "usage: mre <subcommand> [options]   subcommands: " << kSubcommands << "\n"
                  << "run `mre --help` or `mre <subcommand> --help` for details\n";
        return 2;
    };
    if (argc > 1 && argv[1][0] != '-' && !app.get_subcommand_no_throw(argv[1]))
        return usage_error(std::string("unknown subcommand '") + argv[1] + "'");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return usage_error(e.what());
    }

    if (o.verbose) log::threshold() = log::Level::debug;
    if (o.quiet) log::threshold() = log::Level::warn;

    try {
        if (check->parsed()) return cmd_features_check(check_file, check_width);
        const RunConfig c = resolve(o);
        if (retrieve->parsed()) return cmd_retrieve(c);
        if (export_toy->parsed()) return cmd_features_export_toy(c, d_text, d_vis);
        if (train->parsed()) return cmd_train(c);
        if (eval->parsed()) return cmd_eval(c, checkpoint, split);
        if (ablate->parsed()) return cmd_ablate(c);
        if (sweep->parsed()) return cmd_sweep(c, counts);
        if (validate->parsed()) return cmd_validate_store(c);
    } catch (const Error& e) {
        log::error(e.module(), e.what());
        std::cerr << "mre: " << e.module() << " failed: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        log::error("cli", e.what());
        std::cerr << "mre: cli failed: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
