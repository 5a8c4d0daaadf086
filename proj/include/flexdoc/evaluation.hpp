#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexdoc/document.hpp"
#include "flexdoc/masking.hpp"
#include "flexdoc/model.hpp"

namespace flexdoc {

/// s^k for one field: exact match for categorical values, (1 + cos)/2 for
/// numerical ones. A [NULL]/[MASK] prediction scores 0; a zero-norm vector 0.5.
double field_score(const FieldValue& prediction, const FieldValue& target);

/// Mean field score over the mask. Throws DataError on an empty mask.
double score(const Document& prediction, const Document& target, const MaskSet& mask);

/// Anything that completes masked documents.
class Predictor {
public:
    virtual ~Predictor() = default;
    virtual std::string name() const = 0;
    /// Implementations read only the inputs and masks.
    virtual std::vector<Document> predict(std::span<const Document> inputs, std::span<const MaskSet> masks,
                                          const TaskSpec& task) const = 0;
};

/// Training-split statistics for the Most-frequent baseline.
class FrequencyTable {
public:
    static FrequencyTable build(std::span<const Document> train, const Schema& schema);

    /// Most frequent category (ties to the lowest id). Throws if the attribute was never observed.
    int mode(std::size_t attribute) const;
    const std::vector<double>& mean(std::size_t attribute) const;
    const std::vector<std::size_t>& counts(std::size_t attribute) const { return counts_.at(attribute); }

    static FrequencyTable from_counts(const Schema& schema, std::vector<std::vector<std::size_t>> counts,
                                      std::vector<std::vector<double>> means);

private:
    std::vector<std::vector<std::size_t>> counts_;  // categorical
    std::vector<std::vector<double>> means_;        // numerical
    std::vector<std::size_t> observed_;
    std::vector<bool> categorical_;
};

Document most_frequent_predict(const Document& input, const MaskSet& mask, const FrequencyTable& table);

class MostFrequentPredictor : public Predictor {
public:
    explicit MostFrequentPredictor(FrequencyTable table) : table_(std::move(table)) {}
    std::string name() const override { return "Most-frequent"; }
    std::vector<Document> predict(std::span<const Document> inputs, std::span<const MaskSet> masks,
                                  const TaskSpec& task) const override;

private:
    FrequencyTable table_;
};

template <class T>
class ModelPredictor : public Predictor {
public:
    ModelPredictor(const Model<T>& model, std::string name, std::size_t chunk = 64)
        : model_(model), name_(std::move(name)), chunk_(chunk) {}
    std::string name() const override { return name_; }
    std::vector<Document> predict(std::span<const Document> inputs, std::span<const MaskSet> masks,
                                  const TaskSpec& task) const override;

private:
    const Model<T>& model_;
    std::string name_;
    std::size_t chunk_;
};

/// Echoes the ground truth; used to sanity-check the harness.
class IdentityPredictor : public Predictor {
public:
    explicit IdentityPredictor(std::span<const Document> truth);
    std::string name() const override { return "Identity"; }
    std::vector<Document> predict(std::span<const Document> inputs, std::span<const MaskSet> masks,
                                  const TaskSpec& task) const override;

private:
    std::map<std::string, Document> truth_;
};

/// Seed for the evaluation mask of one document, derived from its id.
std::uint64_t evaluation_seed(const std::string& document_id, const TaskSpec& task, std::uint64_t seed);

/// One triplet per document with a fixed per-document seed; empty-mask triplets are dropped.
std::vector<Triplet> make_eval_triplets(std::span<const Document> documents, const Schema& schema,
                                        const TaskSpec& task, std::uint64_t seed);

struct TaskScore {
    std::string task;
    double score = 0.0;
    std::size_t documents = 0;
    /// Field-level mean score per attribute group.
    std::map<std::string, double> groups;
};

struct ScoreReport {
    std::string model;
    std::vector<TaskScore> tasks;
    std::size_t document_count = 0;
    std::string config_hash;

    double mean() const;
    std::optional<double> task_score(const std::string& task) const;
    nlohmann::json to_json() const;
};

/// Aligned plain-text table with one row per report and one column per task.
std::string format_table(std::span<const ScoreReport> reports);

/// Aggregates per-document scores and per-group field scores for one task.
class TaskScoreAccumulator {
public:
    explicit TaskScoreAccumulator(const Schema& schema) : schema_(schema) {}
    void add(const Document& prediction, const Triplet& triplet);
    TaskScore result(const std::string& task) const;

private:
    const Schema& schema_;
    double doc_sum_ = 0.0;
    std::size_t docs_ = 0;
    std::map<std::string, std::pair<double, std::size_t>> groups_;
};

ScoreReport evaluate(const Predictor& predictor, std::span<const Document> documents, const Schema& schema,
                     std::span<const TaskSpec> tasks, std::uint64_t seed, std::size_t workers = 1);

/// Axis-aligned box in normalised canvas coordinates.
struct Box {
    double left = 0.0;
    double top = 0.0;
    double width = 0.0;
    double height = 0.0;
};

double iou(const Box& a, const Box& b);
/// Mean absolute displacement of the left, top, right and bottom edges.
double bde(const Box& a, const Box& b);

extern template class ModelPredictor<float>;
extern template class ModelPredictor<double>;

}  // namespace flexdoc
