#pragma once

// Confusion matrices and the per-class / macro / weighted summary that
// classification reports print (precision, recall, F1, support).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "error.hpp"
#include "log.hpp"

namespace defectlab::metrics {

// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
public:
    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int classes) : k_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
        if (classes <= 0) throw InputError("confusion matrix needs at least one class");
    }

    int classes() const noexcept { return k_; }
    std::int64_t at(int truth, int predicted) const { return counts_.at(index(truth, predicted)); }
    void add(int truth, int predicted, std::int64_t n = 1) { counts_.at(index(truth, predicted)) += n; }

    std::int64_t total() const {
        std::int64_t t = 0;
        for (auto c : counts_) t += c;
        return t;
    }
    std::int64_t trace() const {
        std::int64_t t = 0;
        for (int c = 0; c < k_; ++c) t += at(c, c);
        return t;
    }
    std::int64_t row_sum(int c) const {
        std::int64_t s = 0;
        for (int j = 0; j < k_; ++j) s += at(c, j);
        return s;
    }
    std::int64_t col_sum(int c) const {
        std::int64_t s = 0;
        for (int i = 0; i < k_; ++i) s += at(i, c);
        return s;
    }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
    std::size_t index(int t, int p) const {
        if (t < 0 || t >= k_ || p < 0 || p >= k_)
            throw InputError("label pair (" + std::to_string(t) + ", " + std::to_string(p) + ") outside [0, " +
                             std::to_string(k_) + ")");
        return static_cast<std::size_t>(t) * k_ + p;
    }

    int k_ = 0;
    std::vector<std::int64_t> counts_;
};

inline ConfusionMatrix confusion(const std::vector<int>& truths, const std::vector<int>& predictions, int classes) {
    if (truths.size() != predictions.size())
        throw InputError("truth and prediction lists differ in length (" + std::to_string(truths.size()) + " vs " +
                         std::to_string(predictions.size()) + ")");
    ConfusionMatrix m(classes);
    for (std::size_t i = 0; i < truths.size(); ++i) m.add(truths[i], predictions[i]);
    return m;
}

struct ClassMetrics {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    std::int64_t support = 0;
};

struct Averages {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
};

struct EvaluationReport {
    std::vector<ClassMetrics> classes;
    double accuracy = 0;
    Averages macro;
    Averages weighted;
    double mean_loss = 0;
    std::int64_t total = 0;
    std::vector<std::string> class_names;
};

inline double f1_score(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

/// Zero denominators yield 0 and a warning naming the class.
inline EvaluationReport report(const ConfusionMatrix& m, double mean_loss = 0.0,
                               std::vector<std::string> class_names = {}) {
    const auto total = m.total();
    if (total <= 0) throw InputError("cannot report on an empty confusion matrix");
    const int k = m.classes();
    if (class_names.empty())
        for (int c = 0; c < k; ++c) class_names.push_back(class_name(c));
    EvaluationReport r;
    r.total = total;
    r.mean_loss = mean_loss;
    r.accuracy = static_cast<double>(m.trace()) / static_cast<double>(total);
    for (int c = 0; c < k; ++c) {
        ClassMetrics cm;
        const auto tp = static_cast<double>(m.at(c, c));
        const auto col = m.col_sum(c), row = m.row_sum(c);
        if (col == 0) log::warn("class " + class_names[static_cast<std::size_t>(c)] + " never predicted; precision set to 0");
        if (row == 0) log::warn("class " + class_names[static_cast<std::size_t>(c)] + " has no support; recall set to 0");
        cm.precision = col > 0 ? tp / static_cast<double>(col) : 0.0;
        cm.recall = row > 0 ? tp / static_cast<double>(row) : 0.0;
        cm.f1 = f1_score(cm.precision, cm.recall);
        cm.support = row;
        r.classes.push_back(cm);
    }
    for (const auto& c : r.classes) {
        r.macro.precision += c.precision / k;
        r.macro.recall += c.recall / k;
        r.macro.f1 += c.f1 / k;
        const double w = static_cast<double>(c.support) / static_cast<double>(total);
        r.weighted.precision += w * c.precision;
        r.weighted.recall += w * c.recall;
        r.weighted.f1 += w * c.f1;
    }
    r.class_names = std::move(class_names);
    return r;
}

inline nlohmann::json to_json(const EvaluationReport& r) {
    nlohmann::json j;
    j["accuracy"] = r.accuracy;
    j["mean_loss"] = r.mean_loss;
    j["total"] = r.total;
    auto& cls = j["classes"] = nlohmann::json::array();
    for (std::size_t c = 0; c < r.classes.size(); ++c)
        cls.push_back({{"label", r.class_names[c]},
                       {"precision", r.classes[c].precision},
                       {"recall", r.classes[c].recall},
                       {"f1", r.classes[c].f1},
                       {"support", r.classes[c].support}});
    j["macro_avg"] = {{"precision", r.macro.precision}, {"recall", r.macro.recall}, {"f1", r.macro.f1}};
    j["weighted_avg"] = {{"precision", r.weighted.precision}, {"recall", r.weighted.recall}, {"f1", r.weighted.f1}};
    return j;
}

inline EvaluationReport report_from_json(const nlohmann::json& j) {
    EvaluationReport r;
    r.accuracy = j.at("accuracy").get<double>();
    r.mean_loss = j.at("mean_loss").get<double>();
    r.total = j.at("total").get<std::int64_t>();
    for (const auto& c : j.at("classes")) {
        r.class_names.push_back(c.at("label").get<std::string>());
        r.classes.push_back({c.at("precision").get<double>(), c.at("recall").get<double>(), c.at("f1").get<double>(),
                             c.at("support").get<std::int64_t>()});
    }
    auto avg = [](const nlohmann::json& a) {
        return Averages{a.at("precision").get<double>(), a.at("recall").get<double>(), a.at("f1").get<double>()};
    };
    r.macro = avg(j.at("macro_avg"));
    r.weighted = avg(j.at("weighted_avg"));
    return r;
}

inline std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

// Table layout: label,precision,recall,f1-score,support; K class rows, then
// accuracy (value in the f1 column), macro avg and weighted avg.
inline std::string metrics_csv(const EvaluationReport& r) {
    std::string out = "label,precision,recall,f1-score,support\n";
    for (std::size_t c = 0; c < r.classes.size(); ++c) {
        const auto& m = r.classes[c];
        out += r.class_names[c] + "," + fixed2(m.precision) + "," + fixed2(m.recall) + "," + fixed2(m.f1) + "," +
               std::to_string(m.support) + "\n";
    }
    const auto n = std::to_string(r.total);
    out += "accuracy,,," + fixed2(r.accuracy) + "," + n + "\n";
    out += "macro avg," + fixed2(r.macro.precision) + "," + fixed2(r.macro.recall) + "," + fixed2(r.macro.f1) + "," + n + "\n";
    out += "weighted avg," + fixed2(r.weighted.precision) + "," + fixed2(r.weighted.recall) + "," +
           fixed2(r.weighted.f1) + "," + n + "\n";
    return out;
}

inline std::string confusion_csv(const ConfusionMatrix& m) {
    std::string out;
    for (int i = 0; i < m.classes(); ++i) {
        for (int j = 0; j < m.classes(); ++j) out += (j ? "," : "") + std::to_string(m.at(i, j));
        out += "\n";
    }
    return out;
}

namespace detail {
inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}
}  // namespace detail

/// Writes report.json (full precision), metrics.csv and confusion.csv.
inline void emit(const EvaluationReport& r, const ConfusionMatrix& m, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    auto j = to_json(r);
    j["confusion"] = nlohmann::json::array();
    for (int i = 0; i < m.classes(); ++i) {
        std::vector<std::int64_t> row;
        for (int c = 0; c < m.classes(); ++c) row.push_back(m.at(i, c));
        j["confusion"].push_back(row);
    }
    detail::write_text(dir / "report.json", j.dump(2) + "\n");
    detail::write_text(dir / "metrics.csv", metrics_csv(r));
    detail::write_text(dir / "confusion.csv", confusion_csv(m));
}

}  // namespace defectlab::metrics
