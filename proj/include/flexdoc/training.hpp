#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexdoc/grad_check.hpp"
#include "flexdoc/masking.hpp"
#include "flexdoc/model.hpp"

namespace flexdoc {

enum class Regime { Imp, Exp, ExpFt, Expert };

std::string_view to_string(Regime r);
/// Accepts imp, exp, exp-ft and expert (case-insensitive, '_' or '-').
Regime parse_regime(const std::string& s);

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    /// L2 coefficient added to the gradient of decayed parameters.
    double weight_decay = 1e-2;
};

template <class T>
struct OptimizerState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::size_t step = 0;
};

/// One Adam update. Decayed parameters get g + weight_decay * theta before the
/// moment updates; others use g unchanged.
template <class T>
void adam_step(ParameterStore<T>& params, std::span<const Tensor<T>> grads, OptimizerState<T>& state,
               const AdamConfig& config);

enum class TaskSampling { PerExample, PerBatch };

struct TrainConfig {
    Regime regime = Regime::Exp;
    std::size_t epochs = 500;
    std::size_t batch_size = 256;
    AdamConfig adam;
    /// Field masking rate for the IMP pretraining objective.
    double mask_prob = 0.15;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    /// Validate every N epochs (and always after the last one).
    std::size_t eval_every = 1;
    /// Use at most this many validation documents (0 = all).
    std::size_t val_limit = 0;
    std::uint64_t eval_seed = 1;
    TaskSampling task_sampling = TaskSampling::PerExample;
    /// Required for EXP-FT.
    std::string init_checkpoint;
    /// Required for Expert.
    std::optional<TaskSpec> expert_task;
    /// Optional outputs: JSONL training log and best-validation checkpoint.
    std::string log_path;
    std::string checkpoint_path;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j, const std::string& path = "train");
};

struct LogEntry {
    std::size_t epoch = 0;
    std::string split;
    std::string task;
    double loss = 0.0;
    std::optional<double> score;
    nlohmann::json to_json() const;
};

struct EpochSummary {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    /// Present on validation epochs: per-task scores and their mean.
    std::vector<std::pair<std::string, double>> val_scores;
    std::optional<double> val_mean;
    double seconds = 0.0;
};

template <class T>
struct TrainResult {
    Model<T> best;
    std::size_t best_epoch = 0;
    double best_score = 0.0;
    std::size_t epochs_run = 0;
    std::vector<LogEntry> log;
};

struct TrainHooks {
    /// Called after each epoch; returning false stops training.
    std::function<bool(const EpochSummary&)> on_epoch;
};

template <class T>
struct GradientResult {
    double loss = 0.0;
    std::vector<Tensor<T>> grads;
};

/// Loss and parameter gradients for one batch.
template <class T>
GradientResult<T> compute_gradients(const Model<T>& model, std::span<const Triplet> triplets,
                                    std::span<const TaskSpec> tasks, bool train, Rng& rng);

/// The same, split into `workers` shards run on separate tapes and summed in shard order.
template <class T>
GradientResult<T> compute_gradients_sharded(const Model<T>& model, std::span<const Triplet> triplets,
                                            std::span<const TaskSpec> tasks, std::size_t workers,
                                            std::uint64_t dropout_seed);

/// Draws a task uniformly; if its mask is empty, the remaining tasks are tried
/// in random order. Returns nullopt when every task yields an empty mask.
std::optional<std::pair<Triplet, TaskSpec>> sample_training_triplet(const Document& doc, const Schema& schema,
                                                                    std::span<const TaskSpec> tasks, Rng& rng);

/// Fresh model, or the EXP-FT initial checkpoint (which must match schema and config).
template <class T>
Model<T> initial_model(const Schema& schema, const ModelConfig& model_config, const TrainConfig& config);

/// Trains `model` and returns the best-validation parameters. `tasks` are the
/// target tasks: sampled during EXP/EXP-FT training and scored on validation.
template <class T>
TrainResult<T> train(Model<T> model, std::span<const Document> train_docs, std::span<const Document> val_docs,
                     std::span<const TaskSpec> tasks, const TrainConfig& config, const TrainHooks& hooks = {});

/// One single-task model.
template <class T>
TrainResult<T> train_expert(Model<T> model, std::span<const Document> train_docs, std::span<const Document> val_docs,
                            const TaskSpec& task, TrainConfig config, const TrainHooks& hooks = {});

/// Finite-difference check of the full model loss. Dropout masks are replayed
/// from `dropout_seed` on every evaluation, so the loss is deterministic.
GradCheckReport check_model_gradients(Model<double>& model, std::span<const Triplet> triplets,
                                      std::span<const TaskSpec> tasks, bool train, std::uint64_t dropout_seed,
                                      const GradCheckOptions& options);

}  // namespace flexdoc
