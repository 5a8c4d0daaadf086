// Command-line entry point: generate, pretrain, train, eval, predict, render, grad-check.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "flexdoc/config_util.hpp"
#include "flexdoc/error.hpp"
#include "flexdoc/evaluation.hpp"
#include "flexdoc/io.hpp"
#include "flexdoc/model.hpp"
#include "flexdoc/render.hpp"
#include "flexdoc/synth.hpp"
#include "flexdoc/training.hpp"

namespace fs = std::filesystem;
using namespace flexdoc;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string tasks;
    std::string regime;
    std::string init_checkpoint;
    std::string out;
    std::optional<std::size_t> workers;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> batch_size;
    std::string data;
    std::string schema;
    std::string checkpoint;
    std::string baseline;
    std::string split = "test";
    std::string task;
    std::string input;
    std::string output;
    std::string gallery;
    std::size_t probes = 200;
    std::size_t limit = 0;
};

/// Everything a command needs, after applying flag overrides to the config file.
struct RunConfig {
    std::string data;
    std::string schema;
    std::string out = "out";
    std::uint64_t seed = 0;
    std::vector<std::string> tasks{"ELEM", "POS", "ATTR", "IMG", "TXT"};
    std::size_t workers = 1;
    GeneratorConfig generator;
    ModelConfig model;
    TrainConfig train;

    nlohmann::json to_json() const {
        return {{"data", data},   {"schema", schema},  {"out", out},
                {"seed", seed},   {"tasks", tasks},    {"workers", workers},
                {"generator", generator.to_json()}, {"model", model.to_json()}, {"train", train.to_json()}};
    }

    std::vector<TaskSpec> task_specs() const {
        std::vector<TaskSpec> out_tasks;
        for (const auto& t : tasks) out_tasks.push_back(parse_task(t, train.mask_prob));
        if (out_tasks.empty()) throw ConfigError("tasks: at least one task is required");
        return out_tasks;
    }
};

RunConfig load_run_config(const Flags& f) {
    RunConfig rc;
    bool seed_set = false;
    if (!f.config.empty()) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(f.config));
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(f.config + ": " + e.what());
        }
        KeyReader r(j, "");
        r.read("data", rc.data);
        r.read("schema", rc.schema);
        r.read("out", rc.out);
        seed_set = r.has("seed");
        r.read("seed", rc.seed);
        if (r.has("tasks") && r.child("tasks").is_string()) {
            rc.tasks.clear();
            for (const auto& t : parse_task_list(j["tasks"].get<std::string>())) rc.tasks.push_back(t.name());
        } else {
            r.read("tasks", rc.tasks);
        }
        r.read("workers", rc.workers);
        const auto& gen = r.child("generator");
        const auto& model = r.child("model");
        const auto& train = r.child("train");
        r.finish();
        rc.generator = GeneratorConfig::from_json(gen);
        rc.model = ModelConfig::from_json(model);
        rc.train = TrainConfig::from_json(train);
    }
    if (f.seed) {
        rc.seed = *f.seed;
        seed_set = true;
    }
    if (seed_set) {
        rc.generator.seed = rc.seed;
        rc.train.seed = rc.seed;
    }
    if (!f.tasks.empty()) {
        rc.tasks.clear();
        for (const auto& t : parse_task_list(f.tasks)) rc.tasks.push_back(t.name());
    }
    if (!f.regime.empty()) rc.train.regime = parse_regime(f.regime);
    if (!f.init_checkpoint.empty()) rc.train.init_checkpoint = f.init_checkpoint;
    if (!f.out.empty()) rc.out = f.out;
    if (f.workers) rc.workers = *f.workers;
    if (f.epochs) rc.train.epochs = *f.epochs;
    if (f.batch_size) rc.train.batch_size = *f.batch_size;
    if (!f.data.empty()) rc.data = f.data;
    if (!f.schema.empty()) rc.schema = f.schema;
    if (!f.task.empty()) rc.train.expert_task = parse_task(f.task, rc.train.mask_prob);
    rc.train.workers = rc.workers;
    for (const auto& t : rc.tasks) parse_task(t);
    rc.model.validate();
    rc.generator.validate();
    if (rc.workers == 0) throw ConfigError("workers must be positive");
    return rc;
}

void echo_config(const RunConfig& rc, const std::string& command) {
    fs::create_directories(rc.out);
    auto j = rc.to_json();
    j["command"] = command;
    write_file_atomic((fs::path(rc.out) / "effective_config.json").string(), j.dump(2) + "\n");
}

Corpus load_data(const RunConfig& rc) {
    if (rc.data.empty()) throw ConfigError("data: a corpus directory is required (--data)");
    auto corpus = read_corpus(rc.data);
    if (!rc.schema.empty()) {
        const auto s = load_schema(rc.schema);
        if (!(s == corpus.schema)) throw DataError("schema '" + rc.schema + "' does not match corpus '" + rc.data + "'");
    }
    return corpus;
}

Schema resolve_schema(const RunConfig& rc, const std::string& checkpoint) {
    if (!rc.schema.empty()) return load_schema(rc.schema);
    if (!rc.data.empty()) return load_schema((fs::path(rc.data) / "schema.json").string());
    if (!checkpoint.empty()) return read_checkpoint_info(checkpoint).schema;
    throw ConfigError("schema: pass --schema, --data or --checkpoint");
}

// --- Commands ---------------------------------------------------------------

int cmd_generate(const Flags& f) {
    auto rc = load_run_config(f);
    echo_config(rc, "generate");
    const auto corpus = generate(rc.generator);
    write_corpus(corpus, rc.out);
    AssetGallery::from_documents(corpus.test, corpus.schema).save((fs::path(rc.out) / "gallery.jsonl").string());
    std::cout << corpus.manifest.dump(2) << '\n';
    return 0;
}

int run_training(RunConfig rc, const std::string& command) {
    const auto corpus = load_data(rc);
    const auto tasks = rc.task_specs();
    rc.train.log_path = (fs::path(rc.out) / "train_log.jsonl").string();
    rc.train.checkpoint_path = (fs::path(rc.out) / "best.ckpt").string();
    rc.train.validate();
    echo_config(rc, command);

    auto model = initial_model<float>(corpus.schema, rc.model, rc.train);
    if (rc.train.regime == Regime::ExpFt) {
        spdlog::info("fine-tuning from {}", rc.train.init_checkpoint);
    }
    auto result = train<float>(std::move(model), corpus.train, corpus.val, tasks, rc.train);
    nlohmann::json summary{{"best_epoch", result.best_epoch},
                           {"best_val_score", result.best_score},
                           {"epochs_run", result.epochs_run},
                           {"parameters", result.best.parameters().scalar_count()},
                           {"checkpoint", rc.train.checkpoint_path},
                           {"log", rc.train.log_path}};
    write_file_atomic((fs::path(rc.out) / "summary.json").string(), summary.dump(2) + "\n");
    std::cout << summary.dump(2) << '\n';
    return 0;
}

int cmd_pretrain(const Flags& f) {
    auto rc = load_run_config(f);
    if (!f.regime.empty() && rc.train.regime != Regime::Imp) throw ConfigError("pretrain only supports --regime imp");
    rc.train.regime = Regime::Imp;
    return run_training(rc, "pretrain");
}

int cmd_train(const Flags& f) {
    auto rc = load_run_config(f);
    if (rc.train.regime == Regime::Imp) throw ConfigError("train: use the pretrain command for regime imp");
    return run_training(rc, "train");
}

int cmd_eval(const Flags& f) {
    auto rc = load_run_config(f);
    echo_config(rc, "eval");
    const auto corpus = load_data(rc);
    const auto tasks = rc.task_specs();
    std::span<const Document> split;
    if (f.split == "train") split = corpus.train;
    else if (f.split == "val") split = corpus.val;
    else if (f.split == "test") split = corpus.test;
    else throw ConfigError("split: expected train, val or test");
    if (f.limit > 0 && split.size() > f.limit) split = split.first(f.limit);

    std::optional<Model<float>> model;
    std::unique_ptr<Predictor> predictor;
    if (!f.checkpoint.empty()) {
        if (!f.baseline.empty()) throw ConfigError("pass either --checkpoint or --baseline");
        CheckpointInfo info;
        model.emplace(load_checkpoint<float>(f.checkpoint, corpus.schema, &info));
        std::string name = "Ours";
        if (info.meta.contains("regime")) name += "-" + info.meta["regime"].get<std::string>();
        predictor = std::make_unique<ModelPredictor<float>>(*model, name);
    } else if (f.baseline == "most-frequent") {
        predictor = std::make_unique<MostFrequentPredictor>(FrequencyTable::build(corpus.train, corpus.schema));
    } else if (f.baseline == "oracle") {
        if (!corpus.manifest.contains("config")) throw DataError("oracle baseline needs a generated corpus manifest");
        predictor = std::make_unique<BayesOraclePredictor>(corpus.config);
    } else {
        throw ConfigError("eval: pass --checkpoint or --baseline most-frequent|oracle");
    }
    const auto report = evaluate(*predictor, split, corpus.schema, tasks, rc.train.eval_seed, rc.workers);
    const ScoreReport reports[] = {report};
    std::cout << format_table(reports);
    write_file_atomic((fs::path(rc.out) / "report.json").string(), report.to_json().dump(2) + "\n");
    return 0;
}

int cmd_predict(const Flags& f) {
    auto rc = load_run_config(f);
    if (f.checkpoint.empty()) throw ConfigError("predict: --checkpoint is required");
    if (f.input.empty()) throw ConfigError("predict: --input is required");
    const auto schema = resolve_schema(rc, f.checkpoint);
    const auto model = load_checkpoint<float>(f.checkpoint, schema);
    const auto docs = read_jsonl(f.input, schema);
    std::optional<AssetGallery> gallery;
    if (!f.gallery.empty()) gallery = AssetGallery::load(f.gallery);
    std::optional<TaskSpec> task;
    if (!f.task.empty()) task = parse_task(f.task);

    std::string out;
    for (const auto& doc : docs) {
        const auto mask = mask_of(doc);
        const auto pred = model.predict(doc, mask, task);
        if (!gallery) {
            out += serialize(pred, schema) + "\n";
            continue;
        }
        nlohmann::json line{{"document", document_to_json(pred, schema)}, {"retrieved", nlohmann::json::array()}};
        for (const auto& fr : mask) {
            const auto* n = std::get_if<Numerical>(&pred.elements[fr.element][fr.attribute]);
            const auto& name = schema[fr.attribute].name;
            if (!n || !gallery->contains(name)) continue;
            const auto& asset = nn_retrieve(n->values, *gallery, name);
            line["retrieved"].push_back(
                {{"element", fr.element}, {"attribute", name}, {"asset_id", asset.asset_id}, {"payload", asset.payload}});
        }
        out += line.dump() + "\n";
    }
    if (f.output.empty()) std::cout << out;
    else write_file_atomic(f.output, out);
    return 0;
}

int cmd_render(const Flags& f) {
    auto rc = load_run_config(f);
    if (f.input.empty()) throw ConfigError("render: --input is required");
    const auto schema = resolve_schema(rc, f.checkpoint);
    const auto docs = read_jsonl(f.input, schema);
    fs::create_directories(rc.out);
    std::size_t n = 0;
    for (const auto& doc : docs) {
        if (f.limit > 0 && n >= f.limit) break;
        RenderStyle style;
        if (doc.canvas.contains("width")) style.width = doc.canvas.at("width");
        if (doc.canvas.contains("height")) style.height = doc.canvas.at("height");
        const auto r = render_svg(doc, schema, style);
        if (!r.unresolved.empty()) spdlog::warn("{}: {} element(s) without position", doc.id, r.unresolved.size());
        write_file_atomic((fs::path(rc.out) / (doc.id + ".svg")).string(), r.svg);
        ++n;
    }
    std::cout << nlohmann::json{{"rendered", n}, {"out", rc.out}}.dump() << '\n';
    return 0;
}

int cmd_grad_check(const Flags& f) {
    auto rc = load_run_config(f);
    std::vector<Document> docs;
    Schema schema;
    if (!rc.data.empty()) {
        auto corpus = load_data(rc);
        schema = corpus.schema;
        docs.assign(corpus.train.begin(), corpus.train.begin() + static_cast<long>(std::min<std::size_t>(4, corpus.train.size())));
    } else {
        GeneratorConfig g = rc.generator;
        SyntheticWorld world(g);
        schema = world.schema();
        for (std::size_t i = 0; i < 4; ++i) docs.push_back(world.generate(Split::Train, i));
    }
    Model<double> model(schema, rc.model, rc.seed);
    Rng rng(rc.seed);
    std::vector<Triplet> triplets;
    std::vector<TaskSpec> tasks;
    const auto specs = rc.task_specs();
    for (const auto& d : docs) {
        auto drawn = sample_training_triplet(d, schema, specs, rng);
        if (!drawn) continue;
        triplets.push_back(drawn->first);
        tasks.push_back(drawn->second);
    }
    GradCheckOptions opt;
    opt.probes = f.probes;
    opt.seed = rc.seed;
    const auto report = check_model_gradients(model, triplets, tasks, true, rc.seed + 1, opt);
    nlohmann::json j{{"probes", report.probes},           {"max_rel_error", report.max_rel_error},
                     {"mean_rel_error", report.mean_rel_error}, {"tolerance", report.tolerance},
                     {"passed", report.passed},           {"worst", report.worst},
                     {"worst_analytic", report.worst_analytic}, {"worst_numeric", report.worst_numeric}};
    std::cout << j.dump(2) << '\n';
    return report.passed ? 0 : 5;
}

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("flexdoc");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::info);
    if (const char* env = std::getenv("FLEXDOC_LOG")) {
        const auto level = spdlog::level::from_str(env);
        if (level == spdlog::level::off && std::string(env) != "off")
            throw ConfigError("FLEXDOC_LOG: unknown level '" + std::string(env) + "'");
        spdlog::set_level(level);
    }
}

int report_error(const std::string& type, const std::string& message, int code) {
    std::cerr << nlohmann::json{{"error", {{"type", type}, {"message", message}}}}.dump() << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked field prediction for vector graphic documents"};
    app.require_subcommand(1);
    Flags f;

    auto common = [&](CLI::App* c) {
        c->add_option("--config", f.config, "JSON run config");
        c->add_option("--seed", f.seed, "Seed for generation and training");
        c->add_option("--tasks", f.tasks, "Comma-separated tasks, e.g. ELEM,ATTR");
        c->add_option("--out", f.out, "Output directory");
        c->add_option("--workers", f.workers, "Worker threads");
        c->add_option("--data", f.data, "Corpus directory");
        c->add_option("--schema", f.schema, "Schema JSON");
    };
    auto training = [&](CLI::App* c) {
        c->add_option("--regime", f.regime, "imp | exp | exp-ft | expert");
        c->add_option("--init-checkpoint", f.init_checkpoint, "Initial checkpoint (exp-ft)");
        c->add_option("--epochs", f.epochs, "Epochs");
        c->add_option("--batch-size", f.batch_size, "Batch size");
        c->add_option("--task", f.task, "Task of an expert model");
    };

    auto* generate_cmd = app.add_subcommand("generate", "Generate a synthetic corpus");
    common(generate_cmd);
    auto* pretrain_cmd = app.add_subcommand("pretrain", "Pretrain with random field masking (IMP)");
    common(pretrain_cmd);
    training(pretrain_cmd);
    auto* train_cmd = app.add_subcommand("train", "Train on design tasks (EXP, EXP-FT, Expert)");
    common(train_cmd);
    training(train_cmd);
    auto* eval_cmd = app.add_subcommand("eval", "Score a model or baseline");
    common(eval_cmd);
    eval_cmd->add_option("--checkpoint", f.checkpoint, "Model checkpoint");
    eval_cmd->add_option("--baseline", f.baseline, "most-frequent | oracle");
    eval_cmd->add_option("--split", f.split, "train | val | test");
    eval_cmd->add_option("--limit", f.limit, "Evaluate at most N documents");
    auto* predict_cmd = app.add_subcommand("predict", "Fill __MASK__ fields of JSONL documents");
    common(predict_cmd);
    predict_cmd->add_option("--checkpoint", f.checkpoint, "Model checkpoint")->required();
    predict_cmd->add_option("--input", f.input, "Input JSONL")->required();
    predict_cmd->add_option("--output", f.output, "Output JSONL (default stdout)");
    predict_cmd->add_option("--gallery", f.gallery, "Asset gallery JSONL for retrieval");
    predict_cmd->add_option("--task", f.task, "Task query for task-embedding models");
    auto* render_cmd = app.add_subcommand("render", "Render JSONL documents to SVG");
    common(render_cmd);
    render_cmd->add_option("--input", f.input, "Input JSONL")->required();
    render_cmd->add_option("--checkpoint", f.checkpoint, "Take the schema from a checkpoint");
    render_cmd->add_option("--limit", f.limit, "Render at most N documents");
    auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference check of the model gradient");
    common(grad_cmd);
    grad_cmd->add_option("--probes", f.probes, "Number of probed parameter entries");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return report_error("UsageError", e.what(), 64);
    }

    try {
        setup_logging();
        if (*generate_cmd) return cmd_generate(f);
        if (*pretrain_cmd) return cmd_pretrain(f);
        if (*train_cmd) return cmd_train(f);
        if (*eval_cmd) return cmd_eval(f);
        if (*predict_cmd) return cmd_predict(f);
        if (*render_cmd) return cmd_render(f);
        if (*grad_cmd) return cmd_grad_check(f);
    } catch (const ConfigError& e) {
        return report_error("ConfigError", e.what(), 2);
    } catch (const DataError& e) {
        return report_error("DataError", e.what(), 3);
    } catch (const ShapeError& e) {
        return report_error("ShapeError", e.what(), 3);
    } catch (const TrainingError& e) {
        return report_error("TrainingError", e.what(), 4);
    } catch (const std::exception& e) {
        return report_error("Error", e.what(), 1);
    }
    return 1;
}
