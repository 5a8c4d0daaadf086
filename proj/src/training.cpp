#include "flexdoc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#include <spdlog/spdlog.h>

#include "flexdoc/config_util.hpp"
#include "flexdoc/error.hpp"
#include "flexdoc/evaluation.hpp"
#include "flexdoc/io.hpp"

namespace flexdoc {

std::string_view to_string(Regime r) {
    switch (r) {
        case Regime::Imp: return "imp";
        case Regime::Exp: return "exp";
        case Regime::ExpFt: return "exp-ft";
        case Regime::Expert: return "expert";
    }
    return "?";
}

Regime parse_regime(const std::string& s) {
    std::string k;
    for (char c : s) k += c == '_' ? '-' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (k == "imp") return Regime::Imp;
    if (k == "exp") return Regime::Exp;
    if (k == "exp-ft") return Regime::ExpFt;
    if (k == "expert") return Regime::Expert;
    throw ConfigError("unknown regime '" + s + "' (expected imp, exp, exp-ft or expert)");
}

template <class T>
void adam_step(ParameterStore<T>& params, std::span<const Tensor<T>> grads, OptimizerState<T>& state,
               const AdamConfig& config) {
    if (grads.size() != params.size()) throw ShapeError("adam: gradient count does not match parameters");
    if (state.m.empty()) {
        for (const auto& e : params.entries()) {
            state.m.emplace_back(e.value.shape(), T(0));
            state.v.emplace_back(e.value.shape(), T(0));
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
    const T lr = static_cast<T>(config.lr), eps = static_cast<T>(config.eps);
    const T inv_c1 = static_cast<T>(1.0 / c1), inv_c2 = static_cast<T>(1.0 / c2);
    const T wd = static_cast<T>(config.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& e = params[i];
        if (!grads[i].same_shape(e.value)) throw ShapeError("adam: gradient shape mismatch for " + e.name);
        T* theta = e.value.data();
        const T* g = grads[i].data();
        T* m = state.m[i].data();
        T* v = state.v[i].data();
        const T decay = e.decay ? wd : T(0);
        for (std::size_t j = 0; j < e.value.size(); ++j) {
            const T gj = g[j] + decay * theta[j];
            m[j] = b1 * m[j] + (T(1) - b1) * gj;
            v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
            const T mh = m[j] * inv_c1;
            const T vh = v[j] * inv_c2;
            theta[j] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

template void adam_step<float>(ParameterStore<float>&, std::span<const Tensor<float>>, OptimizerState<float>&,
                               const AdamConfig&);
template void adam_step<double>(ParameterStore<double>&, std::span<const Tensor<double>>, OptimizerState<double>&,
                                const AdamConfig&);

// --- Config -----------------------------------------------------------------

void TrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("train.epochs must be positive");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (!(adam.lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (!(adam.beta1 > 0.0 && adam.beta1 < 1.0)) throw ConfigError("train.beta1 must lie in (0,1)");
    if (!(adam.beta2 > 0.0 && adam.beta2 < 1.0)) throw ConfigError("train.beta2 must lie in (0,1)");
    if (!(adam.eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
    if (!(adam.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
    if (!(mask_prob > 0.0 && mask_prob <= 1.0)) throw ConfigError("train.mask_prob must lie in (0,1]");
    if (workers == 0) throw ConfigError("train.workers must be positive");
    if (eval_every == 0) throw ConfigError("train.eval_every must be positive");
    if (regime == Regime::ExpFt && init_checkpoint.empty())
        throw ConfigError("regime exp-ft requires an initial checkpoint (train.init_checkpoint)");
    if (regime == Regime::Expert && !expert_task) throw ConfigError("regime expert requires train.expert_task");
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j{{"regime", std::string(to_string(regime))},
                     {"epochs", epochs},
                     {"batch_size", batch_size},
                     {"lr", adam.lr},
                     {"beta1", adam.beta1},
                     {"beta2", adam.beta2},
                     {"adam_eps", adam.eps},
                     {"weight_decay", adam.weight_decay},
                     {"mask_prob", mask_prob},
                     {"seed", seed},
                     {"workers", workers},
                     {"eval_every", eval_every},
                     {"val_limit", val_limit},
                     {"eval_seed", eval_seed},
                     {"task_sampling", task_sampling == TaskSampling::PerBatch ? "batch" : "example"},
                     {"init_checkpoint", init_checkpoint},
                     {"log_path", log_path},
                     {"checkpoint_path", checkpoint_path}};
    j["expert_task"] = expert_task ? nlohmann::json(expert_task->name()) : nlohmann::json();
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const std::string& path) {
    TrainConfig c;
    KeyReader r(j, path);
    std::string regime = std::string(to_string(c.regime));
    std::string sampling = "example";
    r.read("regime", regime);
    r.read("epochs", c.epochs);
    r.read("batch_size", c.batch_size);
    r.read("lr", c.adam.lr);
    r.read("beta1", c.adam.beta1);
    r.read("beta2", c.adam.beta2);
    r.read("adam_eps", c.adam.eps);
    r.read("weight_decay", c.adam.weight_decay);
    r.read("mask_prob", c.mask_prob);
    r.read("seed", c.seed);
    r.read("workers", c.workers);
    r.read("eval_every", c.eval_every);
    r.read("val_limit", c.val_limit);
    r.read("eval_seed", c.eval_seed);
    r.read("task_sampling", sampling);
    r.read("init_checkpoint", c.init_checkpoint);
    r.read("log_path", c.log_path);
    r.read("checkpoint_path", c.checkpoint_path);
    if (r.has("expert_task")) {
        const auto& e = r.child("expert_task");
        if (e.is_string()) c.expert_task = parse_task(e.get<std::string>(), c.mask_prob);
        else if (!e.is_null()) r.fail(r.path_of("expert_task") + ": expected string or null");
    }
    r.finish();
    c.regime = parse_regime(regime);
    if (sampling == "example") c.task_sampling = TaskSampling::PerExample;
    else if (sampling == "batch") c.task_sampling = TaskSampling::PerBatch;
    else throw ConfigError(r.path_of("task_sampling") + ": expected \"example\" or \"batch\"");
    return c;
}

nlohmann::json LogEntry::to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"split", split}, {"task", task}, {"loss", loss}};
    j["score"] = score ? nlohmann::json(*score) : nlohmann::json();
    return j;
}

// --- Gradients --------------------------------------------------------------

template <class T>
GradientResult<T> compute_gradients(const Model<T>& model, std::span<const Triplet> triplets,
                                    std::span<const TaskSpec> tasks, bool train, Rng& rng) {
    Tape<T> tape;
    const auto p = model.bind(tape);
    auto loss = model.loss(tape, p, triplets, tasks, train, rng);
    tape.backward(loss);
    GradientResult<T> r;
    r.loss = static_cast<double>(loss.value().item());
    r.grads.reserve(p.size());
    for (const auto& v : p) r.grads.push_back(tape.grad(v));
    return r;
}

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                      static_cast<std::uint32_t>(b >> 32), static_cast<std::uint32_t>(c),
                      static_cast<std::uint32_t>(c >> 32)};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace

template <class T>
GradientResult<T> compute_gradients_sharded(const Model<T>& model, std::span<const Triplet> triplets,
                                            std::span<const TaskSpec> tasks, std::size_t workers,
                                            std::uint64_t dropout_seed) {
    const std::size_t n = triplets.size();
    const std::size_t shards = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, n));
    const std::size_t per = (n + shards - 1) / shards;
    std::vector<GradientResult<T>> parts(shards);
    std::vector<std::size_t> sizes(shards, 0);
    std::vector<std::exception_ptr> errors(shards);
    auto run = [&](std::size_t s) {
        try {
            const std::size_t begin = s * per;
            const std::size_t end = std::min(n, begin + per);
            if (begin >= end) return;
            sizes[s] = end - begin;
            Rng rng(mix_seed(dropout_seed, s, 0x5eed));
            parts[s] = compute_gradients(model, triplets.subspan(begin, end - begin),
                                         tasks.subspan(begin, end - begin), true, rng);
        } catch (...) {
            errors[s] = std::current_exception();
        }
    };
    if (shards == 1) {
        run(0);
    } else {
        std::vector<std::thread> threads;
        for (std::size_t s = 0; s < shards; ++s) threads.emplace_back(run, s);
        for (auto& t : threads) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    // Shard losses are per-document means; reweight so the sum is the batch mean.
    GradientResult<T> total;
    for (std::size_t s = 0; s < shards; ++s) {
        if (sizes[s] == 0) continue;
        const T w = static_cast<T>(static_cast<double>(sizes[s]) / static_cast<double>(n));
        total.loss += parts[s].loss * static_cast<double>(w);
        if (total.grads.empty()) {
            total.grads = std::move(parts[s].grads);
            if (shards > 1) {
                for (auto& g : total.grads) {
                    for (std::size_t j = 0; j < g.size(); ++j) g[j] *= w;
                }
            }
        } else {
            for (std::size_t i = 0; i < total.grads.size(); ++i) {
                auto& g = total.grads[i];
                const auto& h = parts[s].grads[i];
                for (std::size_t j = 0; j < g.size(); ++j) g[j] += w * h[j];
            }
        }
    }
    return total;
}

template GradientResult<float> compute_gradients<float>(const Model<float>&, std::span<const Triplet>,
                                                        std::span<const TaskSpec>, bool, Rng&);
template GradientResult<double> compute_gradients<double>(const Model<double>&, std::span<const Triplet>,
                                                          std::span<const TaskSpec>, bool, Rng&);
template GradientResult<float> compute_gradients_sharded<float>(const Model<float>&, std::span<const Triplet>,
                                                                std::span<const TaskSpec>, std::size_t, std::uint64_t);
template GradientResult<double> compute_gradients_sharded<double>(const Model<double>&, std::span<const Triplet>,
                                                                  std::span<const TaskSpec>, std::size_t,
                                                                  std::uint64_t);

std::optional<std::pair<Triplet, TaskSpec>> sample_training_triplet(const Document& doc, const Schema& schema,
                                                                    std::span<const TaskSpec> tasks, Rng& rng) {
    if (tasks.empty()) throw ConfigError("no tasks to sample from");
    std::vector<std::size_t> order(tasks.size());
    std::iota(order.begin(), order.end(), 0);
    std::uniform_int_distribution<std::size_t> first(0, tasks.size() - 1);
    std::swap(order[0], order[first(rng)]);
    std::shuffle(order.begin() + 1, order.end(), rng);
    for (std::size_t i : order) {
        if (tasks[i].kind == TaskKind::Elem && doc.elements.empty()) continue;
        auto t = build_triplet(doc, schema, tasks[i], rng);
        if (!t.mask.empty()) return std::make_pair(std::move(t), tasks[i]);
    }
    return std::nullopt;
}

template <class T>
Model<T> initial_model(const Schema& schema, const ModelConfig& model_config, const TrainConfig& config) {
    if (config.regime != Regime::ExpFt) return Model<T>(schema, model_config, config.seed);
    CheckpointInfo info;
    auto model = load_checkpoint<T>(config.init_checkpoint, schema, &info);
    if (info.config.to_json() != model_config.to_json())
        spdlog::warn("initial checkpoint model config differs from the requested one; using the checkpoint's");
    return model;
}

template Model<float> initial_model<float>(const Schema&, const ModelConfig&, const TrainConfig&);
template Model<double> initial_model<double>(const Schema&, const ModelConfig&, const TrainConfig&);

// --- Training loop ----------------------------------------------------------

namespace {

template <class T>
bool all_finite(const std::vector<Tensor<T>>& grads) {
    return std::all_of(grads.begin(), grads.end(), [](const Tensor<T>& g) { return g.all_finite(); });
}

struct ValidationSet {
    TaskSpec task;
    std::vector<Document> inputs;
    std::vector<Document> targets;
    std::vector<MaskSet> masks;
    std::vector<Triplet> triplets;
};

}  // namespace

template <class T>
TrainResult<T> train(Model<T> model, std::span<const Document> train_docs, std::span<const Document> val_docs,
                     std::span<const TaskSpec> tasks, const TrainConfig& config, const TrainHooks& hooks) {
    config.validate();
    if (tasks.empty()) throw ConfigError("training needs at least one task");
    if (train_docs.empty()) throw DataError("empty training split");
    const Schema& schema = model.schema();

    std::vector<TaskSpec> sample_tasks(tasks.begin(), tasks.end());
    if (config.regime == Regime::Imp) sample_tasks = {TaskSpec{TaskKind::Random, config.mask_prob}};
    if (config.regime == Regime::Expert) sample_tasks = {*config.expert_task};
    const std::vector<TaskSpec> val_tasks =
        config.regime == Regime::Expert ? sample_tasks : std::vector<TaskSpec>(tasks.begin(), tasks.end());

    std::span<const Document> val = val_docs;
    if (config.val_limit > 0 && val.size() > config.val_limit) val = val.first(config.val_limit);
    std::vector<ValidationSet> val_sets;
    for (const auto& task : val_tasks) {
        ValidationSet vs{task, {}, {}, {}, make_eval_triplets(val, schema, task, config.eval_seed)};
        for (const auto& t : vs.triplets) {
            vs.inputs.push_back(t.input);
            vs.targets.push_back(t.target);
            vs.masks.push_back(t.mask);
        }
        val_sets.push_back(std::move(vs));
    }

    std::ofstream log_file;
    if (!config.log_path.empty()) {
        const auto dir = std::filesystem::path(config.log_path).parent_path();
        if (!dir.empty()) std::filesystem::create_directories(dir);
        log_file.open(config.log_path, std::ios::trunc);
        if (!log_file) throw DataError("cannot open training log '" + config.log_path + "'");
    }

    TrainResult<T> result{model, 0, -1.0, 0, {}};
    auto emit = [&](LogEntry e) {
        if (log_file) log_file << e.to_json().dump() << '\n' << std::flush;
        result.log.push_back(std::move(e));
    };

    OptimizerState<T> opt;
    Rng rng(mix_seed(config.seed, 0x7a11, 0));
    std::vector<std::size_t> order(train_docs.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t step = 0;
    const std::string train_task_label =
        config.regime == Regime::Imp ? sample_tasks.front().name() : (sample_tasks.size() == 1 ? sample_tasks.front().name() : "ALL");

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t loss_docs = 0;

        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            std::vector<Triplet> triplets;
            std::vector<TaskSpec> batch_tasks;
            std::optional<TaskSpec> batch_task;
            if (config.task_sampling == TaskSampling::PerBatch) batch_task = sample_task(sample_tasks, rng);
            for (std::size_t i = begin; i < end; ++i) {
                const Document& doc = train_docs[order[i]];
                if (batch_task) {
                    if (!(batch_task->kind == TaskKind::Elem && doc.elements.empty())) {
                        auto t = build_triplet(doc, schema, *batch_task, rng);
                        if (!t.mask.empty()) {
                            triplets.push_back(std::move(t));
                            batch_tasks.push_back(*batch_task);
                            continue;
                        }
                    }
                }
                auto drawn = sample_training_triplet(doc, schema, sample_tasks, rng);
                if (!drawn) continue;
                triplets.push_back(std::move(drawn->first));
                batch_tasks.push_back(drawn->second);
            }
            if (triplets.empty()) continue;

            auto g = compute_gradients_sharded(model, std::span<const Triplet>(triplets),
                                               std::span<const TaskSpec>(batch_tasks), config.workers,
                                               mix_seed(config.seed, step, 0xd20f));
            if (!std::isfinite(g.loss) || !all_finite(g.grads)) {
                std::string ids;
                for (std::size_t i = 0; i < std::min<std::size_t>(triplets.size(), 8); ++i)
                    ids += (i ? "," : "") + triplets[i].target.id;
                throw TrainingError("non-finite loss or gradient at epoch " + std::to_string(epoch) + ", step " +
                                    std::to_string(step) + " (loss=" + std::to_string(g.loss) +
                                    ", documents " + ids + (triplets.size() > 8 ? ",..." : "") + ")");
            }
            adam_step(model.parameters(), std::span<const Tensor<T>>(g.grads), opt, config.adam);
            if (!model.parameters().all_finite())
                throw TrainingError("non-finite parameters after step " + std::to_string(step));
            loss_sum += g.loss * static_cast<double>(triplets.size());
            loss_docs += triplets.size();
            ++step;
        }

        EpochSummary summary;
        summary.epoch = epoch;
        summary.train_loss = loss_docs ? loss_sum / static_cast<double>(loss_docs) : 0.0;
        emit(LogEntry{epoch, "train", train_task_label, summary.train_loss, std::nullopt});

        if (epoch % config.eval_every == 0 || epoch == config.epochs) {
            double mean = 0.0;
            std::size_t counted = 0;
            for (const auto& vs : val_sets) {
                TaskScoreAccumulator acc(schema);
                double vloss = 0.0;
                for (std::size_t b = 0; b < vs.triplets.size(); b += 64) {
                    const std::size_t n = std::min<std::size_t>(64, vs.triplets.size() - b);
                    auto pred = model.predict_batch(std::span<const Document>(vs.inputs).subspan(b, n),
                                                    std::span<const MaskSet>(vs.masks).subspan(b, n), vs.task,
                                                    std::span<const Document>(vs.targets).subspan(b, n));
                    vloss += pred.loss_sum;
                    for (std::size_t i = 0; i < n; ++i) acc.add(pred.documents[i], vs.triplets[b + i]);
                }
                const auto ts = acc.result(vs.task.name());
                const double avg_loss = vs.triplets.empty() ? 0.0 : vloss / static_cast<double>(vs.triplets.size());
                emit(LogEntry{epoch, "val", vs.task.name(), avg_loss, ts.score});
                summary.val_scores.emplace_back(vs.task.name(), ts.score);
                if (!vs.triplets.empty()) {
                    mean += ts.score;
                    ++counted;
                }
            }
            summary.val_mean = counted ? mean / static_cast<double>(counted) : 0.0;
            if (*summary.val_mean > result.best_score) {
                result.best_score = *summary.val_mean;
                result.best_epoch = epoch;
                result.best = model;
                if (!config.checkpoint_path.empty()) {
                    save_checkpoint(result.best, config.checkpoint_path,
                                    {{"epoch", epoch},
                                     {"val_score", result.best_score},
                                     {"regime", std::string(to_string(config.regime))},
                                     {"train", config.to_json()}});
                }
            }
        }
        summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.epochs_run = epoch;
        spdlog::info("epoch {} loss {:.4f}{} ({:.1f}s)", epoch, summary.train_loss,
                     summary.val_mean ? fmt::format(" val {:.4f}", *summary.val_mean) : std::string(),
                     summary.seconds);
        if (hooks.on_epoch && !hooks.on_epoch(summary)) break;
    }
    if (result.best_epoch == 0) result.best = model;
    return result;
}

template <class T>
TrainResult<T> train_expert(Model<T> model, std::span<const Document> train_docs, std::span<const Document> val_docs,
                            const TaskSpec& task, TrainConfig config, const TrainHooks& hooks) {
    config.regime = Regime::Expert;
    config.expert_task = task;
    const TaskSpec tasks[] = {task};
    return train(std::move(model), train_docs, val_docs, std::span<const TaskSpec>(tasks), config, hooks);
}

template TrainResult<float> train<float>(Model<float>, std::span<const Document>, std::span<const Document>,
                                         std::span<const TaskSpec>, const TrainConfig&, const TrainHooks&);
template TrainResult<double> train<double>(Model<double>, std::span<const Document>, std::span<const Document>,
                                           std::span<const TaskSpec>, const TrainConfig&, const TrainHooks&);
template TrainResult<float> train_expert<float>(Model<float>, std::span<const Document>, std::span<const Document>,
                                                const TaskSpec&, TrainConfig, const TrainHooks&);
template TrainResult<double> train_expert<double>(Model<double>, std::span<const Document>,
                                                  std::span<const Document>, const TaskSpec&, TrainConfig,
                                                  const TrainHooks&);

GradCheckReport check_model_gradients(Model<double>& model, std::span<const Triplet> triplets,
                                      std::span<const TaskSpec> tasks, bool train, std::uint64_t dropout_seed,
                                      const GradCheckOptions& options) {
    Rng rng(dropout_seed);
    auto analytic = compute_gradients(model, triplets, tasks, train, rng);
    auto loss = [&]() {
        Rng replay(dropout_seed);
        Tape<double> tape;
        const auto p = model.bind(tape);
        return model.loss(tape, p, triplets, tasks, train, replay).value().item();
    };
    std::vector<Tensor<double>*> params;
    std::vector<std::string> names;
    for (auto& e : model.parameters().entries()) {
        params.push_back(&e.value);
        names.push_back(e.name);
    }
    return grad_check(loss, std::span<Tensor<double>* const>(params), std::span<const Tensor<double>>(analytic.grads),
                      options, std::span<const std::string>(names));
}

}  // namespace flexdoc
