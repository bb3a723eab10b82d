#pragma once

// The bundled toy corpus with an evidence store built once per test process.

#include <memory>

#include "mre/data_model.hpp"
#include "mre/retrieval/mock_backend.hpp"
#include "mre/retrieval/retriever.hpp"
#include "mre/training.hpp"
#include "test_util.hpp"

namespace mre::test {

inline std::filesystem::path toy_dir() { return source_dir() / "data" / "toy"; }

inline Dataset toy_dataset() {
    const auto d = toy_dir();
    return load_splits(d / "train.txt", d / "dev.txt", d / "test.txt");
}

inline retrieval::RetrievalConfig toy_retrieval_config(std::size_t k = 20, std::size_t m = 3) {
    retrieval::RetrievalConfig cfg;
    cfg.k = k;
    cfg.m = m;
    cfg.retry.sleep = [](std::chrono::milliseconds) {};
    return cfg;
}

struct ToyEnv {
    TempDir dir;
    Dataset data;
    std::unique_ptr<retrieval::EvidenceStore> store;
};

inline const ToyEnv& toy_env() {
    static const std::unique_ptr<ToyEnv> env = [] {
        auto e = std::make_unique<ToyEnv>();
        e->data = toy_dataset();
        e->store = std::make_unique<retrieval::EvidenceStore>(retrieval::EvidenceStore::create(e->dir.path() / "store"));
        retrieval::MockBackend backend(toy_dir() / "fixtures");
        retrieval::Retriever retriever(backend, toy_retrieval_config());
        std::vector<RelationInstance> all = e->data.train;
        all.insert(all.end(), e->data.dev.begin(), e->data.dev.end());
        all.insert(all.end(), e->data.test.begin(), e->data.test.end());
        retrieval::build_evidence_store(all, toy_dir() / "images", *e->store, retriever);
        return e;
    }();
    return *env;
}

inline training::PrepareOptions toy_prepare_options() {
    training::PrepareOptions o;
    o.store = toy_env().store.get();
    o.image_dir = toy_dir() / "images";
    return o;
}

inline training::Experiment toy_experiment(const training::ModelConfig& cfg = {}) {
    return training::prepare_experiment(toy_env().data, cfg, toy_prepare_options());
}

// Capacity sanity run: the 32 training instances, no dev selection.
inline training::TrainConfig overfit_config() {
    training::TrainConfig c;
    c.learning_rate = 1e-3;
    c.max_steps = 500;
    c.select_best_dev = false;
    return c;
}

} // namespace mre::test
