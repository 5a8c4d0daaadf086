#include "flexdoc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "flexdoc/error.hpp"
#include "flexdoc/io.hpp"

namespace flexdoc {

double field_score(const FieldValue& prediction, const FieldValue& target) {
    if (const auto* t = std::get_if<Categorical>(&target)) {
        const auto* p = std::get_if<Categorical>(&prediction);
        return (p && p->id == t->id) ? 1.0 : 0.0;
    }
    const auto* t = std::get_if<Numerical>(&target);
    if (!t) throw DataError("score: target field is not a value");
    const auto* p = std::get_if<Numerical>(&prediction);
    if (!p) return 0.0;
    if (p->values.size() != t->values.size()) throw DataError("score: vector length mismatch");
    double dot = 0.0, np = 0.0, nt = 0.0;
    for (std::size_t i = 0; i < t->values.size(); ++i) {
        dot += p->values[i] * t->values[i];
        np += p->values[i] * p->values[i];
        nt += t->values[i] * t->values[i];
    }
    if (np == 0.0 || nt == 0.0) {
        spdlog::debug("score: zero-norm vector in cosine similarity, using 0.5");
        return 0.5;
    }
    const double cosine = std::clamp(dot / (std::sqrt(np) * std::sqrt(nt)), -1.0, 1.0);
    return 0.5 * (1.0 + cosine);
}

double score(const Document& prediction, const Document& target, const MaskSet& mask) {
    if (mask.empty()) throw DataError("score: empty mask");
    double total = 0.0;
    for (const auto& f : mask) {
        total += field_score(prediction.elements.at(f.element).fields.at(f.attribute),
                             target.elements.at(f.element).fields.at(f.attribute));
    }
    return total / static_cast<double>(mask.size());
}

// --- Most-frequent ----------------------------------------------------------

FrequencyTable FrequencyTable::build(std::span<const Document> train, const Schema& schema) {
    FrequencyTable t;
    t.counts_.resize(schema.size());
    t.means_.resize(schema.size());
    t.observed_.assign(schema.size(), 0);
    t.categorical_.resize(schema.size());
    for (std::size_t k = 0; k < schema.size(); ++k) {
        t.categorical_[k] = schema[k].is_categorical();
        if (t.categorical_[k]) t.counts_[k].assign(schema[k].size, 0);
        else t.means_[k].assign(schema[k].size, 0.0);
    }
    for (const auto& d : train) {
        for (const auto& e : d.elements) {
            for (std::size_t k = 0; k < schema.size(); ++k) {
                if (const auto* c = std::get_if<Categorical>(&e[k])) {
                    ++t.counts_[k].at(static_cast<std::size_t>(c->id));
                    ++t.observed_[k];
                } else if (const auto* n = std::get_if<Numerical>(&e[k])) {
                    // Running mean keeps the accumulation bounded.
                    ++t.observed_[k];
                    const double w = 1.0 / static_cast<double>(t.observed_[k]);
                    for (std::size_t j = 0; j < n->values.size(); ++j)
                        t.means_[k][j] += (n->values[j] - t.means_[k][j]) * w;
                }
            }
        }
    }
    return t;
}

FrequencyTable FrequencyTable::from_counts(const Schema& schema, std::vector<std::vector<std::size_t>> counts,
                                           std::vector<std::vector<double>> means) {
    FrequencyTable t;
    t.counts_ = std::move(counts);
    t.means_ = std::move(means);
    t.counts_.resize(schema.size());
    t.means_.resize(schema.size());
    t.observed_.assign(schema.size(), 0);
    t.categorical_.resize(schema.size());
    for (std::size_t k = 0; k < schema.size(); ++k) {
        t.categorical_[k] = schema[k].is_categorical();
        if (t.categorical_[k]) {
            for (auto c : t.counts_[k]) t.observed_[k] += c;
        } else if (!t.means_[k].empty()) {
            t.observed_[k] = 1;
        }
    }
    return t;
}

int FrequencyTable::mode(std::size_t attribute) const {
    if (attribute >= counts_.size() || !categorical_[attribute] || observed_[attribute] == 0)
        throw DataError("frequency table has no counts for attribute " + std::to_string(attribute));
    const auto& c = counts_[attribute];
    return static_cast<int>(std::max_element(c.begin(), c.end()) - c.begin());  // first maximum
}

const std::vector<double>& FrequencyTable::mean(std::size_t attribute) const {
    if (attribute >= means_.size() || categorical_[attribute] || observed_[attribute] == 0)
        throw DataError("frequency table has no mean for attribute " + std::to_string(attribute));
    return means_[attribute];
}

Document most_frequent_predict(const Document& input, const MaskSet& mask, const FrequencyTable& table) {
    Document out = input;
    for (const auto& f : mask) {
        auto& field = out.elements.at(f.element).fields.at(f.attribute);
        if (table.counts(f.attribute).empty()) field = Numerical{table.mean(f.attribute)};
        else field = Categorical{table.mode(f.attribute)};
    }
    return out;
}

std::vector<Document> MostFrequentPredictor::predict(std::span<const Document> inputs, std::span<const MaskSet> masks,
                                                     const TaskSpec&) const {
    std::vector<Document> out;
    out.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) out.push_back(most_frequent_predict(inputs[i], masks[i], table_));
    return out;
}

template <class T>
std::vector<Document> ModelPredictor<T>::predict(std::span<const Document> inputs, std::span<const MaskSet> masks,
                                                 const TaskSpec& task) const {
    std::vector<Document> out;
    out.reserve(inputs.size());
    for (std::size_t begin = 0; begin < inputs.size(); begin += chunk_) {
        const std::size_t n = std::min(chunk_, inputs.size() - begin);
        auto part = model_.predict_batch(inputs.subspan(begin, n), masks.subspan(begin, n), task);
        for (auto& d : part.documents) out.push_back(std::move(d));
    }
    return out;
}

template class ModelPredictor<float>;
template class ModelPredictor<double>;

IdentityPredictor::IdentityPredictor(std::span<const Document> truth) {
    for (const auto& d : truth) truth_[d.id] = d;
}

std::vector<Document> IdentityPredictor::predict(std::span<const Document> inputs, std::span<const MaskSet>,
                                                 const TaskSpec&) const {
    std::vector<Document> out;
    for (const auto& d : inputs) {
        auto it = truth_.find(d.id);
        if (it == truth_.end()) throw DataError("identity predictor: unknown document '" + d.id + "'");
        out.push_back(it->second);
    }
    return out;
}

// --- Harness ----------------------------------------------------------------

std::uint64_t evaluation_seed(const std::string& document_id, const TaskSpec& task, std::uint64_t seed) {
    std::uint64_t h = fnv1a(task.name(), seed ^ 0x9e3779b97f4a7c15ULL);
    return fnv1a(document_id, h);
}

std::vector<Triplet> make_eval_triplets(std::span<const Document> documents, const Schema& schema,
                                        const TaskSpec& task, std::uint64_t seed) {
    std::vector<Triplet> out;
    out.reserve(documents.size());
    for (const auto& d : documents) {
        Rng rng(evaluation_seed(d.id, task, seed));
        auto t = build_triplet(d, schema, task, rng);
        if (!t.mask.empty()) out.push_back(std::move(t));
    }
    return out;
}

void TaskScoreAccumulator::add(const Document& prediction, const Triplet& triplet) {
    doc_sum_ += score(prediction, triplet.target, triplet.mask);
    ++docs_;
    for (const auto& f : triplet.mask) {
        const auto s = field_score(prediction.elements.at(f.element)[f.attribute],
                                   triplet.target.elements.at(f.element)[f.attribute]);
        auto& g = groups_[std::string(to_string(schema_[f.attribute].group))];
        g.first += s;
        ++g.second;
    }
}

TaskScore TaskScoreAccumulator::result(const std::string& task) const {
    TaskScore r;
    r.task = task;
    r.documents = docs_;
    r.score = docs_ ? doc_sum_ / static_cast<double>(docs_) : 0.0;
    for (const auto& [g, v] : groups_) r.groups[g] = v.first / static_cast<double>(v.second);
    return r;
}

ScoreReport evaluate(const Predictor& predictor, std::span<const Document> documents, const Schema& schema,
                     std::span<const TaskSpec> tasks, std::uint64_t seed, std::size_t workers) {
    ScoreReport report;
    report.model = predictor.name();
    report.document_count = documents.size();
    nlohmann::json cfg{{"seed", seed}, {"documents", documents.size()}, {"schema", schema.hash()}};
    for (const auto& t : tasks) cfg["tasks"].push_back(t.name());
    {
        std::ostringstream ss;
        ss << std::hex << std::setw(16) << std::setfill('0') << fnv1a(cfg.dump());
        report.config_hash = ss.str();
    }
    workers = std::max<std::size_t>(1, workers);

    for (const auto& task : tasks) {
        const auto triplets = make_eval_triplets(documents, schema, task, seed);
        std::vector<Document> inputs;
        std::vector<MaskSet> masks;
        inputs.reserve(triplets.size());
        masks.reserve(triplets.size());
        for (const auto& t : triplets) {
            inputs.push_back(t.input);
            masks.push_back(t.mask);
        }

        std::vector<Document> predictions(triplets.size());
        const std::size_t n_shards = std::min(workers, std::max<std::size_t>(1, triplets.size()));
        const std::size_t per = (triplets.size() + n_shards - 1) / std::max<std::size_t>(1, n_shards);
        auto run_shard = [&](std::size_t s) {
            const std::size_t begin = s * per;
            const std::size_t end = std::min(triplets.size(), begin + per);
            if (begin >= end) return;
            auto out = predictor.predict(std::span<const Document>(inputs).subspan(begin, end - begin),
                                         std::span<const MaskSet>(masks).subspan(begin, end - begin), task);
            std::move(out.begin(), out.end(), predictions.begin() + static_cast<long>(begin));
        };
        if (n_shards == 1) {
            run_shard(0);
        } else {
            std::vector<std::thread> threads;
            for (std::size_t s = 0; s < n_shards; ++s) threads.emplace_back(run_shard, s);
            for (auto& th : threads) th.join();
        }

        TaskScoreAccumulator acc(schema);
        for (std::size_t i = 0; i < triplets.size(); ++i) acc.add(predictions[i], triplets[i]);
        report.tasks.push_back(acc.result(task.name()));
    }
    return report;
}

double ScoreReport::mean() const {
    if (tasks.empty()) return 0.0;
    double s = 0.0;
    for (const auto& t : tasks) s += t.score;
    return s / static_cast<double>(tasks.size());
}

std::optional<double> ScoreReport::task_score(const std::string& task) const {
    for (const auto& t : tasks) {
        if (t.task == task) return t.score;
    }
    return std::nullopt;
}

nlohmann::json ScoreReport::to_json() const {
    nlohmann::json j{{"model", model}, {"documents", document_count}, {"config_hash", config_hash}, {"mean", mean()}};
    j["tasks"] = nlohmann::json::array();
    for (const auto& t : tasks) {
        j["tasks"].push_back({{"task", t.task}, {"score", t.score}, {"documents", t.documents}, {"groups", t.groups}});
    }
    return j;
}

std::string format_table(std::span<const ScoreReport> reports) {
    std::vector<std::string> columns;
    for (const auto& r : reports) {
        for (const auto& t : r.tasks) {
            if (std::find(columns.begin(), columns.end(), t.task) == columns.end()) columns.push_back(t.task);
        }
    }
    std::size_t name_w = 5;
    for (const auto& r : reports) name_w = std::max(name_w, r.model.size());
    std::ostringstream ss;
    ss << std::left << std::setw(static_cast<int>(name_w)) << "Model";
    for (const auto& c : columns) ss << "  " << std::right << std::setw(6) << c;
    ss << "  " << std::setw(6) << "Mean" << '\n';
    for (const auto& r : reports) {
        ss << std::left << std::setw(static_cast<int>(name_w)) << r.model << std::right << std::fixed
           << std::setprecision(3);
        for (const auto& c : columns) {
            if (auto s = r.task_score(c)) ss << "  " << std::setw(6) << *s;
            else ss << "  " << std::setw(6) << "-";
        }
        ss << "  " << std::setw(6) << r.mean() << '\n';
    }
    return ss.str();
}

// --- Box metrics ------------------------------------------------------------

namespace {
void check_box(const Box& b) {
    if (b.width < 0.0 || b.height < 0.0) throw DataError("box with negative width or height");
}
}  // namespace

double iou(const Box& a, const Box& b) {
    check_box(a);
    check_box(b);
    const double ix = std::max(0.0, std::min(a.left + a.width, b.left + b.width) - std::max(a.left, b.left));
    const double iy = std::max(0.0, std::min(a.top + a.height, b.top + b.height) - std::max(a.top, b.top));
    const double inter = ix * iy;
    const double uni = a.width * a.height + b.width * b.height - inter;
    if (uni <= 0.0) return (a.left == b.left && a.top == b.top) ? 1.0 : 0.0;  // both degenerate
    return inter / uni;
}

double bde(const Box& a, const Box& b) {
    check_box(a);
    check_box(b);
    return (std::abs(a.left - b.left) + std::abs(a.top - b.top) +
            std::abs((a.left + a.width) - (b.left + b.width)) + std::abs((a.top + a.height) - (b.top + b.height))) /
           4.0;
}

}  // namespace flexdoc
