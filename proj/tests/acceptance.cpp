// Acceptance runner: one PASS/FAIL line per primary criterion, exit status 1
// if any criterion fails. Every check compares against an independent oracle
// or an exact structural expectation; tolerances are fixed below.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "fusion_fixtures.hpp"
#include "gradcheck.hpp"
#include "marker_oracle.hpp"
#include "metrics_oracle.hpp"
#include "mre/fusion/model.hpp"
#include "mre/metrics.hpp"
#include "mre/retrieval/caption.hpp"
#include "mre/retrieval/mock_backend.hpp"
#include "mre/retrieval/retriever.hpp"
#include "mre/training.hpp"
#include "oracle.hpp"
#include "toy_env.hpp"

using namespace mre;
using namespace mre::fusion;
namespace fs = std::filesystem;

namespace {

// Collects failed expectations; the first few are printed with the verdict.
struct Check {
    std::vector<std::string> failures;
    std::vector<std::string> facts;

    void expect(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }
    void fact(const std::string& f) { facts.push_back(f); }
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

int failed_criteria = 0;

void criterion(const std::string& name, double limit_seconds, const std::function<void(Check&)>& body) {
    Check c;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        body(c);
    } catch (const std::exception& e) {
        c.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (limit_seconds > 0 && secs >= limit_seconds)
        c.failures.push_back("runtime " + fmt(secs) + " s exceeds " + fmt(limit_seconds) + " s");
    const bool pass = c.failures.empty();
    failed_criteria += !pass;
    std::ostringstream line;
    line << (pass ? "PASS " : "FAIL ") << name << " (" << fmt(secs) << " s)";
    for (const auto& f : c.facts) line << "; " << f;
    for (std::size_t i = 0; i < c.failures.size() && i < 5; ++i) line << "\n    - " << c.failures[i];
    if (c.failures.size() > 5) line << "\n    - ... " << c.failures.size() - 5 << " more";
    std::printf("%s\n", line.str().c_str());
    std::fflush(stdout);
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return 1e300;
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double max_diff(const Matrix<double>& a, const oracle::Rows& b) {
    double m = a.rows() == b.size() ? 0 : 1e300;
    for (std::size_t i = 0; i < b.size() && i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b[i][j]));
    return m;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---- criteria ------------------------------------------------------------------

void oracle_equivalence(Check& c) {
    constexpr int kCases = 1000;
    Rng rng(2024, "acceptance/oracle");
    const auto toy = FusionDims::toy(4);

    double sel = 0;
    for (int t = 0; t < kCases; ++t) {
        FusionDims d = toy;
        d.layers = 1;
        auto p = test::random_params<double>(d, static_cast<std::uint64_t>(t));
        Streams<double> in;
        const std::size_t n_text = 1 + rng.below(4);
        for (std::size_t s = 0; s < n_text; ++s) in.text.push_back(test::random_matrix<double>(rng, 1 + rng.below(8), d.d_text));
        in.vis = test::random_matrix<double>(rng, rng.below(8), d.d_vis);
        StreamMasks<double> masks{std::vector<std::vector<unsigned char>>(n_text), {}};
        const auto out = selection_layer(in, masks, p.layers[0], p, d);
        oracle::OracleStreams os;
        for (const auto& x : in.text) os.text.push_back(oracle::to_rows(x));
        os.vis = oracle::to_rows(in.vis);
        const auto o = oracle::selection(os, p.layers[0], p, d);
        for (std::size_t s = 0; s < n_text; ++s) sel = std::max(sel, max_diff(out.text[s], o.text[s]));
        sel = std::max(sel, max_diff(out.vis, o.vis));
    }

    double con = 0;
    for (int t = 0; t < kCases; ++t) {
        const std::size_t d = t % 2 ? toy.d_vis : toy.d_text, n = 1 + rng.below(10);
        auto w = test::random_matrix<double>(rng, d, d), w2 = test::random_matrix<double>(rng, d, d);
        auto ev = test::random_matrix<double>(rng, n, d);
        std::vector<double> q(d);
        for (auto& v : q) v = rng.normal();
        const double temp = static_cast<double>(d) * (0.25 + rng.uniform());
        con = std::max(con, max_diff(consistency<double>(q, ev, w, w2, temp).value,
                                     oracle::consistency(q, oracle::to_rows(ev), w, w2, temp)));
    }

    double fwd = 0;
    for (int t = 0; t < kCases; ++t) {
        FusionConfig cfg;
        cfg.dims = FusionDims::toy(2 + rng.below(22));
        cfg.selection = t % 4 != 0;
        cfg.consistency = t % 3 != 0;
        auto p = test::random_params<double>(cfg.dims, static_cast<std::uint64_t>(t));
        test::InputShape shape{2 + rng.below(8), rng.below(5), 5, 1 + rng.below(3), rng.below(5)};
        const auto in = test::random_input<double>(rng, cfg.dims, shape);
        const auto out = forward(p, cfg, in);
        const auto o = oracle::forward(p, cfg, in);
        for (double m : {max_diff(out.probabilities, o.probs), max_diff(out.logits, o.logits),
                         max_diff(out.h_t_content, o.h_tc), max_diff(out.h_t_retrieved, o.h_tr),
                         max_diff(out.h_v_content, o.h_vc), max_diff(out.h_v_retrieved, o.h_vr)})
            fwd = std::max(fwd, m);
    }
    c.fact(std::to_string(kCases) + " cases each; max |diff| selection " + fmt(sel) + ", consistency " + fmt(con) +
           ", forward " + fmt(fwd));
    c.expect(sel < 1e-6, "selection layer differs from oracle by " + fmt(sel));
    c.expect(con < 1e-6, "consistency differs from oracle by " + fmt(con));
    c.expect(fwd < 1e-6, "forward differs from oracle by " + fmt(fwd));
}

void gradient_check(Check& c) {
    double worst = 0;
    std::string worst_name;
    std::size_t entries = 0, tensors = 0;
    for (bool selection : {true, false})
        for (bool consistency : {true, false})
            for (std::uint64_t seed : {1u, 2u}) {
                auto gc = test::make_gradcheck_case(seed, selection, consistency, 3, 2, FusionDims::toy(4));
                const auto r = test::run_gradcheck(gc, 1e-3);
                entries += r.entries;
                tensors = std::max(tensors, r.rel_error.size());
                for (const auto& [name, rel] : r.rel_error) {
                    c.expect(rel < 1e-4, name + " relative error " + fmt(rel) + " (selection=" +
                                             std::to_string(selection) + ", consistency=" + std::to_string(consistency) +
                                             ", seed " + std::to_string(seed) + ")");
                    if (rel >= worst) worst = rel, worst_name = name;
                }
            }
    c.fact(std::to_string(tensors) + " tensors, " + std::to_string(entries) + " entries checked; worst " + worst_name +
           " " + fmt(worst));
}

void invariants(Check& c) {
    Rng rng(7, "acceptance/invariants");

    // softmax rows and masked keys
    double worst_norm = 0;
    std::size_t masked_nonzero = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t d = 16, heads = 2, nq = 1 + rng.below(6), nk = 2 + rng.below(8);
        AttentionParams<double> p{test::random_matrix<double>(rng, d, d), test::random_matrix<double>(rng, d, d),
                                  test::random_matrix<double>(rng, d, d), test::random_matrix<double>(rng, d, d)};
        auto q = test::random_matrix<double>(rng, nq, d), kv = test::random_matrix<double>(rng, nk, d, 3.0);
        std::vector<unsigned char> mask(nk);
        for (auto& m : mask) m = rng.below(3) != 0;
        mask[rng.below(nk)] = 1;
        for (std::size_t r = 0; r < nk; ++r)
            if (!mask[r])
                for (std::size_t j = 0; j < d; ++j) kv(r, j) = 1e6 * rng.normal();
        MhaCache<double> cache;
        mha_forward<double>(q, kv, mask, p, heads, &cache);
        for (const auto& ph : cache.probs)
            for (std::size_t i = 0; i < nq; ++i) {
                double sum = 0;
                for (std::size_t j = 0; j < nk; ++j) {
                    sum += ph(i, j);
                    if (!mask[j] && ph(i, j) != 0.0) ++masked_nonzero;
                }
                worst_norm = std::max(worst_norm, std::abs(sum - 1.0));
            }
    }
    double worst_probs = 0;
    for (int t = 0; t < 200; ++t) {
        FusionConfig cfg;
        cfg.dims = FusionDims::toy(2 + rng.below(22));
        auto p = test::random_params<double>(cfg.dims, static_cast<std::uint64_t>(t));
        const auto out = forward(p, cfg, test::random_input<double>(rng, cfg.dims, {}));
        worst_probs = std::max(worst_probs, std::abs(std::accumulate(out.probabilities.begin(), out.probabilities.end(), 0.0) - 1.0));
    }
    c.expect(worst_norm < 1e-6 && worst_probs < 1e-6,
             "softmax rows deviate from 1 by " + fmt(std::max(worst_norm, worst_probs)));
    c.expect(masked_nonzero == 0, std::to_string(masked_nonzero) + " masked keys received non-zero weight");

    // consistency permutation invariance
    double worst_perm = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t d = 16, n = 1 + rng.below(10);
        auto w = test::random_matrix<double>(rng, d, d), w2 = test::random_matrix<double>(rng, d, d);
        auto ev = test::random_matrix<double>(rng, n, d);
        std::vector<double> q(d);
        for (auto& v : q) v = rng.normal();
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
        Matrix<double> shuffled(n, d);
        for (std::size_t i = 0; i < n; ++i) std::copy(ev.row(perm[i]).begin(), ev.row(perm[i]).end(), shuffled.row(i).begin());
        worst_perm = std::max(worst_perm, max_diff(consistency<double>(q, ev, w, w2, 16.0).value,
                                                   consistency<double>(q, shuffled, w, w2, 16.0).value));
    }
    c.expect(worst_perm < 1e-6, "consistency changes under permutation by " + fmt(worst_perm));

    // marker round trip
    std::size_t marker_bad = 0;
    for (int t = 0; t < 2000; ++t) {
        const std::size_t m = 2 + rng.below(60);
        std::vector<std::string> toks;
        for (std::size_t i = 0; i < m; ++i) toks.push_back("w" + std::to_string(rng.below(40)));
        std::size_t a = rng.below(m), b = rng.below(m);
        while (a == b) b = rng.below(m);
        if (a > b) std::swap(a, b);
        Span first{rng.below(a + 1), a + 1}, second{b, b + 1 + rng.below(m - b)};
        if (rng.below(2)) std::swap(first, second);
        const RelationInstance inst{"x", toks, first, second, "img", "r"};
        const auto marked = insert_entity_markers(inst);
        marker_bad += marked.tokens != oracle::splice_markers(inst) || strip_entity_markers(marked) != toks ||
                      marked.tokens.size() != m + 4 || marked.tokens[marked.e1_pos] != kHeadOpen ||
                      marked.tokens[marked.e2_pos] != kTailOpen;
    }
    c.expect(marker_bad == 0, std::to_string(marker_bad) + " marker round trips failed");

    // metrics against the counting oracle
    std::mt19937_64 mt(99);
    double worst_metric = 0;
    std::size_t count_bad = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t L = 1 + mt() % 23, N = mt() % 201, lg = 1 + mt() % L, lp = 1 + mt() % L;
        std::vector<std::size_t> gold(N), pred(N);
        for (std::size_t i = 0; i < N; ++i) {
            gold[i] = mt() % lg;
            pred[i] = mt() % 3 == 0 ? gold[i] : mt() % lp;
        }
        const auto r = metrics::evaluate_predictions(gold, pred, L);
        const auto o = oracle::oracle_classes(gold, pred, L);
        double sf = 0;
        std::size_t active = 0, correct = 0, trace = 0;
        for (std::size_t k = 0; k < L; ++k) {
            count_bad += r.per_class[k].tp != o[k].tp || r.per_class[k].support != o[k].support ||
                         r.per_class[k].predicted != o[k].predicted;
            worst_metric = std::max({worst_metric, std::abs(r.per_class[k].precision - o[k].p),
                                     std::abs(r.per_class[k].recall - o[k].r), std::abs(r.per_class[k].f1 - o[k].f1)});
            if (o[k].support || o[k].predicted) ++active, sf += o[k].f1;
            correct += o[k].tp;
            trace += r.confusion(k, k);
        }
        const double acc = N ? static_cast<double>(correct) / static_cast<double>(N) : 0.0;
        worst_metric = std::max({worst_metric, std::abs(r.accuracy - acc),
                                 std::abs(r.macro_f1 - (active ? sf / static_cast<double>(active) : 0.0)),
                                 std::abs(r.micro_f1 - r.accuracy),
                                 std::abs(r.accuracy - (N ? static_cast<double>(trace) / static_cast<double>(N) : 0.0))});
    }
    c.expect(count_bad == 0, std::to_string(count_bad) + " per-class counts differ from the oracle");
    c.expect(worst_metric < 1e-12, "metrics differ from the oracle by " + fmt(worst_metric));

    // argmax invariant under a constant logit shift
    std::size_t argmax_bad = 0;
    for (int t = 0; t < 1000; ++t) {
        const auto d = FusionDims::toy(2 + rng.below(22));
        auto p = test::random_params<double>(d, static_cast<std::uint64_t>(t));
        std::vector<double> ht(d.d_text), hv(d.d_vis);
        for (auto& x : ht) x = rng.normal();
        for (auto& x : hv) x = rng.normal();
        const auto a = classify<double>(ht, ht, hv, hv, p);
        const double shift = 50 * rng.normal();
        for (auto& b : p.b2.data()) b += shift;
        const auto b = classify<double>(ht, ht, hv, hv, p);
        argmax_bad += training::argmax(a.logits) != training::argmax(b.logits);
    }
    c.expect(argmax_bad == 0, std::to_string(argmax_bad) + " argmax changes under logit shift");

    c.fact("softmax dev " + fmt(std::max(worst_norm, worst_probs)) + ", permutation " + fmt(worst_perm) +
           ", metric " + fmt(worst_metric) + ", masked/marker/argmax failures " +
           std::to_string(masked_nonzero + marker_bad + argmax_bad));
}

void overfit_and_determinism(Check& c) {
    const auto exp = test::toy_experiment();
    const auto cfg = test::overfit_config();
    const auto a = training::train(exp.train, exp.dev, exp.labels, cfg);
    const auto b = training::train(exp.train, exp.dev, exp.labels, cfg);
    const auto acc = training::evaluate(a.model, exp.train).report.accuracy;
    c.expect(exp.train.size() == 32, "training split has " + std::to_string(exp.train.size()) + " instances");
    c.expect(a.steps <= 500, "ran " + std::to_string(a.steps) + " steps");
    c.expect(acc == 1.0, "train accuracy " + fmt(acc));

    bool same_trace = a.log.size() == b.log.size();
    for (std::size_t i = 0; same_trace && i < a.log.size(); ++i)
        same_trace = std::memcmp(&a.log[i].loss, &b.log[i].loss, sizeof(double)) == 0 &&
                     std::memcmp(&a.log[i].lr, &b.log[i].lr, sizeof(double)) == 0;
    c.expect(same_trace, "loss traces differ between identical seeds");
    c.expect(training::to_jsonl(a.log) == training::to_jsonl(b.log), "serialized logs differ");
    c.expect(training::checkpoint_bytes(a.model) == training::checkpoint_bytes(b.model), "checkpoints differ");
    c.fact("32 instances, " + std::to_string(a.steps) + " steps, train accuracy " + fmt(acc) + ", final loss " +
           fmt(a.log.back().loss) + ", identical traces and checkpoints");
}

void ablation_wiring(Check& c) {
    // w/o selection equals a zero-layer stack, on random inputs and at the model level
    Rng rng(11, "acceptance/ablation");
    std::size_t sel_bad = 0, uni_bad = 0;
    for (int t = 0; t < 200; ++t) {
        FusionConfig off{FusionDims::toy(2 + rng.below(8)), false, t % 2 == 0};
        FusionConfig zero = off;
        zero.selection = true;
        zero.dims.layers = 0;
        const auto p = FusionParams<double>::init(off.dims, static_cast<std::uint64_t>(t));
        const auto p0 = FusionParams<double>::init(zero.dims, static_cast<std::uint64_t>(t));
        const auto in = test::random_input<double>(rng, off.dims, {2 + rng.below(6), rng.below(4), 4, 2, rng.below(4)});
        const auto a = forward(p, off, in), b = forward(p0, zero, in);
        sel_bad += a.logits != b.logits || a.probabilities != b.probabilities || a.h_t_retrieved != b.h_t_retrieved ||
                   a.h_v_retrieved != b.h_v_retrieved;
    }
    const auto exp = test::toy_experiment();
    {
        training::ModelConfig off, zero;
        off.ablate.selection = true;
        zero.dims.layers = 0;
        const auto mo = training::Model::init(off, exp.labels, 5), mz = training::Model::init(zero, exp.labels, 5);
        for (const auto& p : exp.test) sel_bad += mo.predict(p).logits != mz.predict(p).logits;
    }

    // w/o consistency equals the plain mean of the pooled evidence rows
    for (int t = 0; t < 200; ++t) {
        FusionConfig cfg{FusionDims::toy(3), t % 2 == 0, false};
        const auto p = test::random_params<double>(cfg.dims, static_cast<std::uint64_t>(t));
        const auto in = test::random_input<double>(rng, cfg.dims, {3 + rng.below(4), 1 + rng.below(4), 4, 2, 1 + rng.below(4)});
        FusionCache<double> cache;
        const auto out = forward(p, cfg, in, &cache);
        const auto& s = cache.final_streams;
        std::vector<double> mt(cfg.dims.d_text, 0.0), mv(cfg.dims.d_vis, 0.0);
        for (std::size_t i = 0; i < in.retrieved.size(); ++i)
            for (std::size_t j = 0; j < mt.size(); ++j) mt[j] += s.text[i + 1](in.retrieved[i].cls, j);
        for (auto& v : mt) v /= static_cast<double>(in.retrieved.size());
        std::size_t nv = 0;
        for (std::size_t r = 0; r < in.visual.rows(); ++r)
            if (in.sources[r] == VisualSource::retrieved) {
                ++nv;
                for (std::size_t j = 0; j < mv.size(); ++j) mv[j] += s.vis(r, j);
            }
        for (auto& v : mv) v /= static_cast<double>(nv);
        uni_bad += out.h_t_retrieved != mt || out.h_v_retrieved != mv;
    }
    c.expect(sel_bad == 0, std::to_string(sel_bad) + " outputs differ between w/o-selection and zero layers");
    c.expect(uni_bad == 0, std::to_string(uni_bad) + " outputs differ from uniform evidence averaging");

    // evidence ablations drop exactly the tagged items
    std::size_t tag_bad = 0, kept_obj = 0, kept_img = 0, kept_vis = 0;
    training::ModelConfig base;
    base.k_text = base.k_image = 1000;
    for (const auto& p : exp.train) {
        const auto full = training::select_evidence(p, base);
        tag_bad += full.texts.size() != p.texts.size() || full.visual.size() != p.visual.size();
        for (int which = 0; which < 3; ++which) {
            auto cfg = base;
            (which == 0 ? cfg.ablate.object_evidence : which == 1 ? cfg.ablate.image_evidence : cfg.ablate.visual_evidence) = true;
            const auto sel = training::select_evidence(p, cfg);
            std::vector<std::size_t> want_t, want_v;
            for (std::size_t i = 0; i < p.texts.size(); ++i)
                if (!(which == 0 && p.texts[i].source != "image") && !(which == 1 && p.texts[i].source == "image"))
                    want_t.push_back(i);
            for (std::size_t i = 0; i < p.visual.size(); ++i)
                if (!(which == 2 && p.visual[i].source == VisualSource::retrieved)) want_v.push_back(i);
            tag_bad += sel.texts != want_t || sel.visual != want_v;
            (which == 0 ? kept_obj : which == 1 ? kept_img : kept_vis) += p.texts.size() + p.visual.size() -
                                                                          want_t.size() - want_v.size();
        }
    }
    c.expect(tag_bad == 0, std::to_string(tag_bad) + " evidence selections differ from the tag filter");
    c.expect(kept_obj > 0 && kept_img > 0 && kept_vis > 0, "some ablation removed nothing on the toy corpus");

    // the six-row table
    auto cfg = test::overfit_config();
    cfg.max_steps = 2;
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    const auto rows = training::run_ablation_suite(exp, cfg, seeds);
    const std::vector<std::string> names{"Full", "w/o Object Evi.", "w/o Image Evi.", "w/o Visual Evi.",
                                         "w/o Selection", "w/o Consistency"};
    c.expect(rows.size() == 6, std::to_string(rows.size()) + " ablation rows");
    for (std::size_t i = 0; i < rows.size() && i < names.size(); ++i) {
        c.expect(rows[i].name == names[i], "row " + std::to_string(i) + " is '" + rows[i].name + "'");
        c.expect(rows[i].summary.runs.size() == 5, rows[i].name + " has " + std::to_string(rows[i].summary.runs.size()) + " runs");
    }
    const auto table = training::format_table(rows);
    c.expect(std::count(table.begin(), table.end(), '\n') == 7, "table is not header plus six rows");
    const auto report = training::ablation_report(rows, exp.labels);
    for (const auto& r : report)
        for (const char* m : {"accuracy", "precision", "recall", "f1"})
            c.expect(r["metrics"].contains(m) && r["metrics"][m].contains("mean") && r["metrics"][m].contains("std"),
                     r["name"].get<std::string>() + " lacks " + m + " mean/std");
    c.fact("selection/uniform/tag mismatches " + std::to_string(sel_bad + uni_bad + tag_bad) + ", items removed (obj " +
           std::to_string(kept_obj) + ", img " + std::to_string(kept_img) + ", vis " + std::to_string(kept_vis) +
           "), 6 rows x 4 metrics x mean/std over 5 seeds");
}

void harness_shape(Check& c) {
    const auto exp = test::toy_experiment();
    auto cfg = test::overfit_config();
    cfg.max_steps = 1;
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    const auto& store = *test::toy_env().store;
    const auto res = training::sweep_evidence(exp, cfg, seeds, training::default_sweep_counts(), training::store_min_k(store));
    for (const auto* pts : {&res.textual, &res.visual}) {
        c.expect(pts->size() == 20, std::to_string(pts->size()) + " sweep points");
        for (std::size_t i = 0; i < pts->size(); ++i) {
            const auto& p = (*pts)[i];
            c.expect(p.count == i + 1, "point " + std::to_string(i) + " has count " + std::to_string(p.count));
            c.expect(p.per_seed.size() == 5, "point has " + std::to_string(p.per_seed.size()) + " seeds");
            const double mean = std::accumulate(p.per_seed.begin(), p.per_seed.end(), 0.0) / 5.0;
            double ss = 0;
            for (double v : p.per_seed) ss += (v - mean) * (v - mean);
            c.expect(std::abs(p.f1.mean - mean) < 1e-12 && std::abs(p.f1.std - std::sqrt(ss / 4.0)) < 1e-12,
                     "mean/std differ from the five-seed sample statistics");
        }
        const auto csv = training::sweep_csv(*pts);
        c.expect(csv.rfind("count,mean_f1,std_f1\n", 0) == 0, "CSV header");
        c.expect(std::count(csv.begin(), csv.end(), '\n') == 21, "CSV row count");
    }
    bool too_small = false;
    try {
        training::sweep_evidence(exp, cfg, seeds, {21}, training::store_min_k(store));
    } catch (const ConfigError&) {
        too_small = true;
    }
    c.expect(too_small, "sweep beyond the store's k was not rejected");

    const auto summary = training::run_seeds(exp, cfg, seeds);
    c.expect(summary.runs.size() == 5 && metrics::to_json(summary)["runs"].size() == 5, "summary is not over 5 seeds");

    const auto paper = training::model_config_from_json({{"scale", "paper"}});
    std::vector<std::string> labels;
    for (int i = 0; i < 23; ++i) labels.push_back("rel" + std::to_string(i));
    const auto m = training::Model::init(paper, LabelVocabulary(labels), 1);
    const auto& d = m.config.dims;
    c.expect(d.classifier_input() == 5632 && m.fusion.w1.rows() == 5632 && m.fusion.w1.cols() == 1024 &&
                 m.fusion.w2.rows() == 1024 && m.fusion.w2.cols() == 23,
             "paper-scale classifier is " + std::to_string(m.fusion.w1.rows()) + "->" +
                 std::to_string(m.fusion.w1.cols()) + "->" + std::to_string(m.fusion.w2.cols()));
    c.fact("20 points per modality over 5 seeds, classifier " + std::to_string(m.fusion.w1.rows()) + "->" +
           std::to_string(m.fusion.w1.cols()) + "->" + std::to_string(m.fusion.w2.cols()));
}

void retrieval_offline(Check& c) {
    const auto fixtures = test::toy_dir() / "fixtures";
    const auto images = test::toy_dir() / "images";
    const auto data = test::toy_dataset();
    std::vector<RelationInstance> all = data.train;
    all.insert(all.end(), data.dev.begin(), data.dev.end());
    all.insert(all.end(), data.test.begin(), data.test.end());
    test::TempDir tmp;

    auto build = [&](const fs::path& root, std::size_t k, std::size_t m, std::size_t workers,
                     retrieval::MockBackend& backend) {
        auto cfg = test::toy_retrieval_config(k, m);
        cfg.workers = workers;
        retrieval::Retriever r(backend, cfg);
        auto store = retrieval::EvidenceStore::create(root);
        return retrieval::build_evidence_store(all, images, store, r);
    };

    retrieval::MockBackend backend(fixtures);
    build(tmp.path() / "a", 10, 3, 1, backend);
    const auto first_calls = backend.calls();
    backend.reset_calls();
    const auto rerun = build(tmp.path() / "a", 10, 3, 1, backend);
    c.expect(first_calls > 0, "first build made no backend calls");
    c.expect(backend.calls() == 0, "rerun made " + std::to_string(backend.calls()) + " backend calls");
    c.expect(rerun.skipped == all.size(), "rerun did not skip every instance");

    retrieval::MockBackend other(fixtures);
    build(tmp.path() / "b", 10, 3, 3, other);
    const auto ma = read_file(tmp.path() / "a" / "manifest.json");
    c.expect(!ma.empty() && ma == read_file(tmp.path() / "b" / "manifest.json"), "manifests differ between builds");
    std::size_t text_files = 0;
    for (const auto& e : fs::directory_iterator(tmp.path() / "a" / "text")) {
        ++text_files;
        c.expect(read_file(e.path()) == read_file(tmp.path() / "b" / "text" / e.path().filename()),
                 "text file " + e.path().filename().string() + " differs between builds");
    }

    const auto page = read_file(test::source_dir() / "tests" / "fixtures" / "caption_page.html");
    const auto cap = retrieval::extract_caption(page, "https://cdn.example.com/photos/oscar.jpg");
    c.expect(cap && *cap == "Ang Lee holds his Oscar & smiles backstage", "caption not recovered: '" + cap.value_or("<none>") + "'");

    // limits: every bundle within k and m, and the limits actually bind
    std::size_t at_k = 0, at_m = 0;
    for (auto [k, m] : {std::pair<std::size_t, std::size_t>{10, 3}, {2, 1}}) {
        const auto root = tmp.path() / ("k" + std::to_string(k));
        retrieval::MockBackend b(fixtures);
        build(root, k, m, 1, b);
        const auto store = retrieval::EvidenceStore::open(root);
        for (const auto& id : store.instance_ids()) {
            const auto bundle = store.load_bundle(id);
            c.expect(bundle.objects.size() <= m, id + " has " + std::to_string(bundle.objects.size()) + " objects");
            c.expect(bundle.images.size() <= k, id + " has " + std::to_string(bundle.images.size()) + " images");
            c.expect(bundle.sources.size() == bundle.objects.size() + 1, id + " source count");
            at_m += bundle.objects.size() == m;
            at_k += bundle.images.size() == k;
            for (const auto& s : bundle.sources) {
                c.expect(s.entities.size() <= k && s.captions.size() <= k, id + "/" + s.source + " exceeds k");
                at_k += s.entities.size() == k;
            }
        }
    }
    c.expect(at_k > 0 && at_m > 0, "k/m limits never bind on the toy corpus");
    c.fact(std::to_string(all.size()) + " instances, " + std::to_string(first_calls) +
           " calls then 0 on rerun, manifests and " + std::to_string(text_files) +
           " text files byte-identical across worker counts, fixture caption recovered");
}

} // namespace

int main() {
    log::threshold() = log::Level::error;
    criterion("oracle-equivalence", 120, oracle_equivalence);
    criterion("gradient-check", 120, gradient_check);
    criterion("invariant-suite", 0, invariants);
    test::toy_env();  // shared evidence store, built before the timed runs
    criterion("overfit-and-determinism", 60, overfit_and_determinism);
    criterion("ablation-wiring", 0, ablation_wiring);
    criterion("harness-shape", 0, harness_shape);
    criterion("retrieval-offline", 0, retrieval_offline);
    std::printf("%s: %d of 7 criteria failed\n", failed_criteria ? "FAIL" : "PASS", failed_criteria);
    return failed_criteria ? 1 : 0;
}
