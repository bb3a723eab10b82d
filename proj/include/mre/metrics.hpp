#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "mre/error.hpp"
#include "mre/tensor.hpp"

namespace mre::metrics {

struct ClassMetrics {
    std::size_t tp = 0, support = 0, predicted = 0;
    double precision = 0, recall = 0, f1 = 0;
};

// Rates use 0 for any zero denominator. "macro" averages over classes with
// at least one gold or predicted instance; "macro_all" over every class.
struct EvalReport {
    std::size_t n = 0;
    double accuracy = 0;
    std::vector<ClassMetrics> per_class;
    double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
    double macro_all_precision = 0, macro_all_recall = 0, macro_all_f1 = 0;
    double micro_precision = 0, micro_recall = 0, micro_f1 = 0;
    Matrix<std::size_t> confusion;  // rows gold, cols predicted
};

inline double safe_div(double a, double b) { return b == 0 ? 0.0 : a / b; }

inline EvalReport evaluate_predictions(const std::vector<std::size_t>& gold, const std::vector<std::size_t>& pred,
                                       std::size_t n_labels) {
    if (gold.size() != pred.size()) throw ValidationError("gold/prediction length mismatch", "training_eval");
    EvalReport r;
    r.n = gold.size();
    r.confusion = Matrix<std::size_t>(n_labels, n_labels, 0);
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (gold[i] >= n_labels || pred[i] >= n_labels) throw ValidationError("label index out of range", "training_eval");
        ++r.confusion(gold[i], pred[i]);
    }
    r.per_class.resize(n_labels);
    std::size_t correct = 0, active = 0;
    double sp = 0, sr = 0, sf = 0, ap = 0, ar = 0, af = 0;
    for (std::size_t c = 0; c < n_labels; ++c) {
        auto& m = r.per_class[c];
        m.tp = r.confusion(c, c);
        for (std::size_t k = 0; k < n_labels; ++k) {
            m.support += r.confusion(c, k);
            m.predicted += r.confusion(k, c);
        }
        m.precision = safe_div(static_cast<double>(m.tp), static_cast<double>(m.predicted));
        m.recall = safe_div(static_cast<double>(m.tp), static_cast<double>(m.support));
        m.f1 = safe_div(2 * m.precision * m.recall, m.precision + m.recall);
        correct += m.tp;
        ap += m.precision, ar += m.recall, af += m.f1;
        if (m.support || m.predicted) {
            ++active;
            sp += m.precision, sr += m.recall, sf += m.f1;
        }
    }
    r.accuracy = safe_div(static_cast<double>(correct), static_cast<double>(r.n));
    r.macro_precision = safe_div(sp, static_cast<double>(active));
    r.macro_recall = safe_div(sr, static_cast<double>(active));
    r.macro_f1 = safe_div(sf, static_cast<double>(active));
    r.macro_all_precision = safe_div(ap, static_cast<double>(n_labels));
    r.macro_all_recall = safe_div(ar, static_cast<double>(n_labels));
    r.macro_all_f1 = safe_div(af, static_cast<double>(n_labels));
    // single-label: micro P = micro R = accuracy
    r.micro_precision = r.accuracy;
    r.micro_recall = r.accuracy;
    r.micro_f1 = r.accuracy;
    return r;
}

struct MeanStd {
    double mean = 0, std = 0;
};

// Sample standard deviation (n − 1 denominator); 0 for a single value.
inline MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd m;
    if (xs.empty()) return m;
    for (double x : xs) m.mean += x;
    m.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0;
        for (double x : xs) ss += (x - m.mean) * (x - m.mean);
        m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return m;
}

struct SeedSummary {
    std::vector<std::uint64_t> seeds;
    std::vector<EvalReport> runs;
    MeanStd accuracy, precision, recall, f1;  // macro P/R/F1
};

inline SeedSummary summarize(std::vector<std::uint64_t> seeds, std::vector<EvalReport> runs) {
    SeedSummary s;
    std::vector<double> a, p, r, f;
    for (const auto& e : runs) {
        a.push_back(e.accuracy);
        p.push_back(e.macro_precision);
        r.push_back(e.macro_recall);
        f.push_back(e.macro_f1);
    }
    s.seeds = std::move(seeds);
    s.runs = std::move(runs);
    s.accuracy = mean_std(a);
    s.precision = mean_std(p);
    s.recall = mean_std(r);
    s.f1 = mean_std(f);
    return s;
}

inline nlohmann::json to_json(const EvalReport& r, const std::vector<std::string>& labels = {}) {
    nlohmann::json j;
    j["n"] = r.n;
    j["accuracy"] = r.accuracy;
    j["macro"] = {{"precision", r.macro_precision}, {"recall", r.macro_recall}, {"f1", r.macro_f1}};
    j["macro_all_classes"] = {{"precision", r.macro_all_precision}, {"recall", r.macro_all_recall}, {"f1", r.macro_all_f1}};
    j["micro"] = {{"precision", r.micro_precision}, {"recall", r.micro_recall}, {"f1", r.micro_f1}};
    j["per_class"] = nlohmann::json::array();
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
        const auto& m = r.per_class[c];
        j["per_class"].push_back({{"label", c < labels.size() ? labels[c] : std::to_string(c)},
                                  {"precision", m.precision},
                                  {"recall", m.recall},
                                  {"f1", m.f1},
                                  {"support", m.support},
                                  {"predicted", m.predicted}});
    }
    j["confusion"] = nlohmann::json::array();
    for (std::size_t g = 0; g < r.confusion.rows(); ++g) {
        auto row = r.confusion.row(g);
        j["confusion"].push_back(std::vector<std::size_t>(row.begin(), row.end()));
    }
    return j;
}

inline nlohmann::json to_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

inline nlohmann::json to_json(const SeedSummary& s, const std::vector<std::string>& labels = {}) {
    nlohmann::json j;
    j["seeds"] = s.seeds;
    j["accuracy"] = to_json(s.accuracy);
    j["precision"] = to_json(s.precision);
    j["recall"] = to_json(s.recall);
    j["f1"] = to_json(s.f1);
    j["runs"] = nlohmann::json::array();
    for (const auto& r : s.runs) j["runs"].push_back(to_json(r, labels));
    return j;
}

} // namespace mre::metrics
