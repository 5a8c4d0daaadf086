// Acceptance checks. Prints one PASS/FAIL line per criterion; exits non-zero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "fixtures.hpp"
#include "flexdoc/error.hpp"
#include "flexdoc/evaluation.hpp"
#include "flexdoc/model.hpp"
#include "flexdoc/synth.hpp"
#include "flexdoc/training.hpp"

using namespace flexdoc;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kGradEps = 1e-5;
constexpr std::size_t kGradProbes = 200;
constexpr double kGradSeconds = 120.0;
constexpr double kEquivTol = 1e-5;
constexpr double kScoreOracleTol = 1e-9;
constexpr double kIouGridTol = 0.02;
constexpr int kIouGrid = 64;
constexpr int kMaskTrials = 10000;
constexpr double kMaskSigmas = 3.0;
constexpr double kOverfitTarget = 0.98;
constexpr std::size_t kOverfitEpochs = 300;
constexpr double kOverfitSeconds = 180.0;
constexpr double kMarginCategorical = 0.15;
constexpr double kMarginFeature = 0.05;
constexpr double kExpertSlack = 0.05;
constexpr double kOracleSlack = 0.02;
constexpr double kTaskIdBand = 0.02;
constexpr double kBenchmarkSeconds = 30 * 60.0;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double x, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, x);
    return buf;
}

std::string sci(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2e", x);
    return buf;
}

std::vector<Document> world_documents(const GeneratorConfig& cfg, Split split, std::size_t n) {
    const SyntheticWorld world(cfg);
    std::vector<Document> docs;
    for (std::size_t i = 0; i < n; ++i) docs.push_back(world.generate(split, i));
    return docs;
}

// --- 1 ----------------------------------------------------------------------

Outcome gradient_check() {
    const auto t0 = std::chrono::steady_clock::now();
    GeneratorConfig g;
    g.seed = 21;
    const auto docs = world_documents(g, Split::Train, 4);
    const auto schema = crello_schema(g);
    Model<double> model(schema, ModelConfig{}, 21);
    Rng rng(21);
    std::vector<Triplet> triplets;
    std::vector<TaskSpec> tasks;
    const auto specs = parse_task_list("ELEM,POS,ATTR,IMG,TXT");
    for (const auto& d : docs) {
        auto drawn = sample_training_triplet(d, schema, specs, rng);
        triplets.push_back(drawn->first);
        tasks.push_back(drawn->second);
    }
    GradCheckOptions opt;
    opt.probes = kGradProbes;
    opt.eps = kGradEps;
    opt.tol = kGradTol;
    opt.seed = 22;
    const auto r = check_model_gradients(model, triplets, tasks, true, 23, opt);
    const double secs = seconds_since(t0);
    return {r.passed && r.max_rel_error <= kGradTol && secs < kGradSeconds,
            "max rel error " + sci(r.max_rel_error) + " over " + std::to_string(r.probes) + " probes (tol " +
                sci(kGradTol) + "), worst " + r.worst + " analytic " + sci(r.worst_analytic) + " numeric " +
                sci(r.worst_numeric) + ", " + fmt(secs, 1) + " s"};
}

// --- 2 ----------------------------------------------------------------------

Outcome permutation_equivariance() {
    GeneratorConfig g;
    g.seed = 31;
    const auto schema = crello_schema(g);
    ModelConfig mc;
    mc.use_positional_embedding = false;
    const Model<float> model(schema, mc, 31);
    const auto docs = world_documents(g, Split::Test, 100);
    Rng rng(32);
    double worst = 0.0;
    std::size_t argmax_mismatch = 0;
    for (const auto& doc : docs) {
        const auto mask = random_mask(doc, 0.3, rng);
        std::vector<std::size_t> perm(doc.size());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Document pdoc = doc;
        MaskSet pmask;
        for (std::size_t i = 0; i < perm.size(); ++i) pdoc.elements[i] = doc.elements[perm[i]];
        std::vector<std::size_t> inverse(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
        for (const auto& f : mask) pmask.insert({inverse[f.element], f.attribute});

        const auto a = model.predict(apply_mask(doc, mask), mask);
        const auto b = model.predict(apply_mask(pdoc, pmask), pmask);
        for (const auto& f : mask) {
            const auto& fa = a.elements[f.element][f.attribute];
            const auto& fb = b.elements[inverse[f.element]][f.attribute];
            if (const auto* na = std::get_if<Numerical>(&fa)) {
                const auto* nb = std::get_if<Numerical>(&fb);
                if (!nb) {
                    ++argmax_mismatch;
                    continue;
                }
                for (std::size_t d = 0; d < na->values.size(); ++d)
                    worst = std::max(worst, std::abs(na->values[d] - nb->values[d]));
            } else if (!(fa == fb)) {
                ++argmax_mismatch;
            }
        }
    }
    return {argmax_mismatch == 0 && worst <= kEquivTol,
            std::to_string(argmax_mismatch) + " categorical mismatches, max numerical deviation " + sci(worst) +
                " (tol " + sci(kEquivTol) + ")"};
}

// --- 3 ----------------------------------------------------------------------

double brute_score(const Document& pred, const Document& target, const MaskSet& mask) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        for (std::size_t k = 0; k < target.elements[i].fields.size(); ++k) {
            if (!mask.contains(FieldRef{i, k})) continue;
            ++n;
            const auto& t = target.elements[i][k];
            const auto& p = pred.elements[i][k];
            if (const auto* ct = std::get_if<Categorical>(&t)) {
                const auto* cp = std::get_if<Categorical>(&p);
                sum += cp && cp->id == ct->id ? 1.0 : 0.0;
                continue;
            }
            const auto* np = std::get_if<Numerical>(&p);
            if (!np) continue;
            const auto& a = np->values;
            const auto& b = std::get<Numerical>(t).values;
            long double dot = 0, na = 0, nb = 0;
            for (std::size_t j = 0; j < a.size(); ++j) {
                dot += static_cast<long double>(a[j]) * b[j];
                na += static_cast<long double>(a[j]) * a[j];
                nb += static_cast<long double>(b[j]) * b[j];
            }
            sum += (na == 0 || nb == 0) ? 0.5 : static_cast<double>((1 + dot / std::sqrt(na * nb)) / 2);
        }
    }
    return sum / static_cast<double>(n);
}

double grid_iou(const Box& a, const Box& b) {
    long inter = 0, uni = 0;
    for (int y = 0; y < kIouGrid; ++y) {
        for (int x = 0; x < kIouGrid; ++x) {
            const double cx = (x + 0.5) / kIouGrid, cy = (y + 0.5) / kIouGrid;
            const bool ia = cx >= a.left && cx < a.left + a.width && cy >= a.top && cy < a.top + a.height;
            const bool ib = cx >= b.left && cx < b.left + b.width && cy >= b.top && cy < b.top + b.height;
            inter += ia && ib;
            uni += ia || ib;
        }
    }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

Outcome metric_oracle() {
    GeneratorConfig g;
    g.seed = 41;
    const SyntheticWorld world(g);
    Rng rng(42);
    double worst_score = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto target = world.generate(Split::Test, static_cast<std::size_t>(trial));
        auto pred = world.generate(Split::Train, static_cast<std::size_t>(trial));
        pred.elements.resize(target.size(), target.elements[0]);
        // Half the trials share the target's fields so that matches occur.
        if (trial % 2) {
            for (std::size_t i = 0; i < target.size(); ++i)
                if (std::bernoulli_distribution(0.5)(rng)) pred.elements[i] = target.elements[i];
        }
        const auto mask = random_mask(target, 0.4, rng);
        // Prediction values of a different type are scored; keep them aligned with the mask.
        for (const auto& f : mask) {
            auto& p = pred.elements[f.element][f.attribute];
            if (is_null(p)) p = target.elements[f.element][f.attribute];
        }
        worst_score = std::max(worst_score, std::abs(score(pred, target, mask) - brute_score(pred, target, mask)));
    }
    std::mt19937_64 gen(43);
    std::uniform_int_distribution<int> px(0, kIouGrid - 1);
    auto box = [&] {
        const int l = px(gen), t = px(gen);
        const int w = 1 + std::uniform_int_distribution<int>(0, kIouGrid - 1 - l)(gen);
        const int h = 1 + std::uniform_int_distribution<int>(0, kIouGrid - 1 - t)(gen);
        const double s = kIouGrid;
        return Box{l / s, t / s, w / s, h / s};
    };
    double worst_iou = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto a = box(), b = box();
        worst_iou = std::max(worst_iou, std::abs(iou(a, b) - grid_iou(a, b)));
    }
    return {worst_score <= kScoreOracleTol && worst_iou <= kIouGridTol,
            "score max deviation " + sci(worst_score) + " (tol " + sci(kScoreOracleTol) + "), IoU max deviation " +
                sci(worst_iou) + " (tol " + fmt(kIouGridTol, 2) + ")"};
}

// --- 4 ----------------------------------------------------------------------

Outcome masking_contracts() {
    std::size_t failures = 0;
    GeneratorConfig g;
    g.seed = 51;
    const SyntheticWorld world(g);
    const auto& schema = world.schema();
    const std::vector<TaskSpec> tasks{TaskSpec{TaskKind::Elem}, TaskSpec{TaskKind::Pos},  TaskSpec{TaskKind::Attr},
                                      TaskSpec{TaskKind::Img},  TaskSpec{TaskKind::Txt}, TaskSpec{TaskKind::Random}};
    Rng rng(52);
    for (int trial = 0; trial < kMaskTrials; ++trial) {
        const auto doc = world.generate(Split::Train, static_cast<std::size_t>(trial));
        const auto& task = tasks[static_cast<std::size_t>(trial) % tasks.size()];
        const auto t = build_triplet(doc, schema, task, rng);
        bool ok = t.target == doc && mask_of(t.input) == t.mask;
        for (std::size_t i = 0; i < doc.size() && ok; ++i) {
            for (std::size_t k = 0; k < schema.size(); ++k) {
                const bool in = t.mask.contains(FieldRef{i, k});
                if (in && is_null(doc.elements[i][k])) ok = false;
                if (in != is_mask(t.input.elements[i][k])) ok = false;
                if (!in && !(t.input.elements[i][k] == doc.elements[i][k])) ok = false;
            }
        }
        failures += !ok;
    }

    // Task patterns on the hand-built five-element fixture.
    const auto fschema = fixtures::five_element_schema();
    const auto fdoc = fixtures::five_element_document();
    auto group_mask = [&](AttributeGroup g2) {
        MaskSet m;
        for (std::size_t i = 0; i < fdoc.size(); ++i)
            for (std::size_t k = 0; k < fschema.size(); ++k)
                if (fschema[k].group == g2 && !is_null(fdoc.elements[i][k])) m.insert({i, k});
        return m;
    };
    std::size_t pattern_failures = 0;
    const std::pair<TaskKind, AttributeGroup> groups[] = {{TaskKind::Pos, AttributeGroup::Pos},
                                                          {TaskKind::Attr, AttributeGroup::Attr},
                                                          {TaskKind::Img, AttributeGroup::Img},
                                                          {TaskKind::Txt, AttributeGroup::Txt}};
    for (const auto& [kind, group] : groups)
        pattern_failures += !(build_triplet(fdoc, fschema, TaskSpec{kind}, rng).mask == group_mask(group));
    for (int i = 0; i < 100; ++i) {
        const auto m = build_triplet(fdoc, fschema, TaskSpec{TaskKind::Elem}, rng).mask;
        pattern_failures += m.empty() || !(m == element_mask(fdoc, {m.begin()->element}));
    }

    // Mean |M| against the binomial expectation, conditioned on a non-empty mask.
    const auto big = world.generate(Split::Val, 0);
    std::size_t n = 0;
    for (const auto& e : big.elements)
        for (const auto& f : e.fields) n += !is_null(f);
    const double p = 0.15, q = 1.0 - p, N = static_cast<double>(n);
    const double nonempty = 1.0 - std::pow(q, N);
    const double mean = N * p / nonempty;
    const double second = (N * p * q + N * N * p * p) / nonempty;
    const double sigma = std::sqrt((second - mean * mean) / kMaskTrials);
    double total = 0.0;
    for (int t = 0; t < kMaskTrials; ++t) total += static_cast<double>(random_mask(big, p, rng).size());
    const double observed = total / kMaskTrials;
    const bool rate_ok = std::abs(observed - mean) <= kMaskSigmas * sigma;

    return {failures == 0 && pattern_failures == 0 && rate_ok,
            std::to_string(failures) + "/" + std::to_string(kMaskTrials) + " triplet violations, " +
                std::to_string(pattern_failures) + " pattern mismatches, mean |M| " + fmt(observed) + " vs " +
                fmt(mean) + " +- " + fmt(kMaskSigmas * sigma)};
}

// --- 5 ----------------------------------------------------------------------

// ELEM score with every element of every document masked in turn.
double all_elements_score(const Model<float>& model, std::span<const Document> docs) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& d : docs) {
        for (std::size_t i = 0; i < d.size(); ++i) {
            const auto mask = element_mask(d, {i});
            sum += score(model.predict(apply_mask(d, mask), mask), d, mask);
            ++n;
        }
    }
    return sum / static_cast<double>(n);
}

Outcome overfit_smoke() {
    const auto t0 = std::chrono::steady_clock::now();
    GeneratorConfig g;
    g.seed = 61;
    const auto docs = world_documents(g, Split::Train, 8);
    const auto schema = crello_schema(g);
    ModelConfig mc;
    mc.d_model = 64;
    mc.num_layers = 2;
    mc.num_heads = 4;
    mc.ffn_dim = 128;
    mc.dropout = 0.0;
    TrainConfig tc;
    tc.regime = Regime::Expert;
    tc.epochs = kOverfitEpochs;
    tc.batch_size = 1;
    tc.adam.lr = 5e-4;
    tc.adam.weight_decay = 0.0;
    tc.eval_every = 10;
    tc.seed = 61;
    const TaskSpec elem{TaskKind::Elem};
    tc.expert_task = elem;
    // Validation runs on the training documents; stop once the target is reached.
    TrainHooks hooks;
    hooks.on_epoch = [](const EpochSummary& s) { return !(s.val_mean && *s.val_mean >= 0.999); };
    const auto r = train_expert(Model<float>(schema, mc, 61), docs, docs, elem, tc, hooks);
    const double harness = r.best_score;
    const double every = all_elements_score(r.best, docs);
    const double secs = seconds_since(t0);
    return {harness >= kOverfitTarget && secs < kOverfitSeconds,
            "train ELEM " + fmt(harness) + " (every element " + fmt(every) + ") after " +
                std::to_string(r.epochs_run) + " epochs, " + fmt(secs, 1) + " s"};
}

// --- 6, 7 -------------------------------------------------------------------

struct Benchmark {
    std::map<std::string, ScoreReport> reports;
    double seconds = 0.0;
    std::vector<std::string> order;
};

Benchmark run_benchmark(std::size_t epochs, std::size_t workers) {
    const auto t0 = std::chrono::steady_clock::now();
    GeneratorConfig g;
    g.seed = 7;
    g.rho = 0.9;
    const auto corpus = generate(g);
    const auto tasks = parse_task_list("ELEM,POS,ATTR,IMG,TXT");

    ModelConfig mc;
    mc.d_model = 64;
    mc.num_layers = 2;
    mc.num_heads = 4;
    mc.ffn_dim = 128;
    mc.dropout = 0.0;
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = 64;
    tc.adam.lr = 1e-3;
    tc.seed = 7;
    tc.workers = workers;
    tc.eval_every = 2;

    Benchmark b;
    auto add = [&](const Predictor& p) {
        b.reports[p.name()] = evaluate(p, corpus.test, corpus.schema, tasks, 1, workers);
        b.order.push_back(p.name());
        spdlog::info("{}: mean {:.3f} ({:.0f} s)", p.name(), b.reports[p.name()].mean(), seconds_since(t0));
    };
    auto fit = [&](const std::string& name, ModelConfig m, TrainConfig c) {
        auto r = train<float>(initial_model<float>(corpus.schema, m, c), corpus.train, corpus.val, tasks, c);
        add(ModelPredictor<float>(r.best, name));
        return std::move(r.best);
    };

    add(MostFrequentPredictor(FrequencyTable::build(corpus.train, corpus.schema)));
    add(BayesOraclePredictor(corpus.config));

    auto imp_cfg = tc;
    imp_cfg.regime = Regime::Imp;
    const auto imp_path = (std::filesystem::temp_directory_path() / "flexdoc_acceptance_imp.ckpt").string();
    save_checkpoint(fit("Ours-IMP", mc, imp_cfg), imp_path);
    fit("Ours-EXP", mc, tc);
    auto ft_cfg = tc;
    ft_cfg.regime = Regime::ExpFt;
    ft_cfg.init_checkpoint = imp_path;
    fit("Ours-EXP-FT", mc, ft_cfg);
    std::filesystem::remove(imp_path);

    ScoreReport experts;
    experts.model = "Expert";
    for (const auto& t : tasks) {
        auto ec = tc;
        ec.regime = Regime::Expert;
        ec.expert_task = t;
        auto r = train_expert(Model<float>(corpus.schema, mc, tc.seed), corpus.train, corpus.val, t, ec);
        const TaskSpec one[] = {t};
        experts.tasks.push_back(
            evaluate(ModelPredictor<float>(r.best, "Expert"), corpus.test, corpus.schema, one, 1, workers).tasks[0]);
        spdlog::info("Expert-{}: {:.3f} ({:.0f} s)", t.name(), experts.tasks.back().score, seconds_since(t0));
    }
    experts.document_count = corpus.test.size();
    b.reports["Expert"] = experts;
    b.order.push_back("Expert");

    auto no_attn = mc;
    no_attn.use_attention = false;
    no_attn.num_layers = 8;
    fit("w/o attention", no_attn, tc);
    auto task_id = mc;
    task_id.use_task_embedding = true;
    fit("w/ task-ID", task_id, tc);

    b.seconds = seconds_since(t0);
    return b;
}

double task(const ScoreReport& r, const char* name) { return r.task_score(name).value_or(-1.0); }

Outcome benchmark_ordering(const Benchmark& b) {
    const auto& mf = b.reports.at("Most-frequent");
    const auto& oracle = b.reports.at("Oracle");
    const auto& exp = b.reports.at("Ours-EXP");
    const auto& imp = b.reports.at("Ours-IMP");
    const auto& ft = b.reports.at("Ours-EXP-FT");
    const auto& expert = b.reports.at("Expert");
    std::vector<std::string> failed;

    for (const char* t : {"ELEM", "ATTR"})
        if (task(exp, t) - task(mf, t) < kMarginCategorical) failed.push_back(std::string("(a) ") + t);
    for (const char* t : {"IMG", "TXT"})
        if (task(exp, t) - task(mf, t) < kMarginFeature) failed.push_back(std::string("(a) ") + t);
    for (const char* t : {"POS"})
        if (task(exp, t) <= task(mf, t)) failed.push_back(std::string("(a) ") + t);
    if (ft.mean() < imp.mean()) failed.push_back("(b)");
    for (const auto& t : ft.tasks)
        if (task(expert, t.task.c_str()) < t.score - kExpertSlack) failed.push_back("(c) " + t.task);
    for (const auto& name : {"Ours-IMP", "Ours-EXP", "Ours-EXP-FT", "Expert", "w/o attention", "w/ task-ID"}) {
        for (const auto& t : b.reports.at(name).tasks)
            if (t.score > task(oracle, t.task.c_str()) + kOracleSlack)
                failed.push_back(std::string("(d) ") + name + " " + t.task);
    }
    if (b.seconds >= kBenchmarkSeconds) failed.push_back("runtime");
    std::string detail = "EXP-MF ELEM " + fmt(task(exp, "ELEM") - task(mf, "ELEM")) + " ATTR " +
                         fmt(task(exp, "ATTR") - task(mf, "ATTR")) + " IMG " +
                         fmt(task(exp, "IMG") - task(mf, "IMG")) + " TXT " + fmt(task(exp, "TXT") - task(mf, "TXT")) +
                         "; EXP-FT " + fmt(ft.mean()) + " vs IMP " + fmt(imp.mean()) + "; " + fmt(b.seconds, 0) + " s";
    for (const auto& f : failed) detail += "; failed " + f;
    return {failed.empty(), detail};
}

Outcome ablation_direction(const Benchmark& b) {
    const auto& exp = b.reports.at("Ours-EXP");
    const auto& no_attn = b.reports.at("w/o attention");
    const auto& task_id = b.reports.at("w/ task-ID");
    const bool below = task(no_attn, "ELEM") < task(exp, "ELEM") && task(no_attn, "ATTR") < task(exp, "ATTR");
    const double diff = task_id.mean() - exp.mean();
    return {below && std::abs(diff) <= kTaskIdBand,
            "w/o attention ELEM " + fmt(task(no_attn, "ELEM")) + " vs " + fmt(task(exp, "ELEM")) + ", ATTR " +
                fmt(task(no_attn, "ATTR")) + " vs " + fmt(task(exp, "ATTR")) + "; task-ID mean diff " + fmt(diff)};
}

// --- 8 ----------------------------------------------------------------------

Outcome determinism_persistence(std::size_t workers) {
    auto g = fixtures::small_generator(200, 50, 50);
    g.seed = 81;
    const auto corpus = generate(g);
    const auto tasks = parse_task_list("ELEM,POS,ATTR,IMG,TXT");
    ModelConfig mc;
    mc.d_model = 32;
    mc.num_layers = 2;
    mc.num_heads = 4;
    mc.ffn_dim = 64;
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 32;
    tc.adam.lr = 1e-3;
    tc.seed = 81;
    tc.workers = std::max<std::size_t>(workers, 2);
    auto run = [&] { return train(Model<float>(corpus.schema, mc, 81), corpus.train, corpus.val, tasks, tc); };
    const auto a = run();
    const auto b = run();
    bool curves = a.log.size() == b.log.size();
    for (std::size_t i = 0; curves && i < a.log.size(); ++i)
        curves = a.log[i].loss == b.log[i].loss && a.log[i].score == b.log[i].score;

    const auto path = (std::filesystem::temp_directory_path() / "flexdoc_acceptance.ckpt").string();
    save_checkpoint(a.best, path);
    const auto loaded = load_checkpoint<float>(path, corpus.schema);
    const auto before = evaluate(ModelPredictor<float>(a.best, "m"), corpus.test, corpus.schema, tasks, 1, workers);
    const auto after = evaluate(ModelPredictor<float>(loaded, "m"), corpus.test, corpus.schema, tasks, 1, workers);
    bool same = before.tasks.size() == after.tasks.size();
    for (std::size_t i = 0; same && i < before.tasks.size(); ++i) same = before.tasks[i].score == after.tasks[i].score;
    std::filesystem::remove(path);
    return {curves && same, std::string("loss curves ") + (curves ? "identical" : "differ") + ", reloaded scores " +
                                (same ? "bit-identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::vector<int> only;
    std::size_t epochs = 36;
    std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
    app.add_option("--only", only, "Run only these criteria");
    app.add_option("--epochs", epochs, "Epoch budget of each benchmark run");
    app.add_option("--workers", workers, "Worker threads");
    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::warn);
    if (const char* env = std::getenv("FLEXDOC_LOG")) spdlog::set_level(spdlog::level::from_str(env));

    auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };
    bool all = true;
    auto report = [&](int c, const std::string& name, const std::function<Outcome()>& fn) {
        if (!wanted(c)) return;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        all = all && o.pass;
        std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", c, name.c_str(), o.detail.c_str());
        std::fflush(stdout);
    };

    report(1, "gradient correctness", gradient_check);
    report(2, "permutation equivariance", permutation_equivariance);
    report(3, "metric oracle", metric_oracle);
    report(4, "masking contracts", masking_contracts);
    report(5, "overfit smoke test", overfit_smoke);
    std::optional<Benchmark> bench;
    if (wanted(6) || wanted(7)) {
        try {
            bench = run_benchmark(epochs, workers);
            std::vector<ScoreReport> rows;
            for (const auto& n : bench->order) rows.push_back(bench->reports.at(n));
            std::printf("%s", format_table(rows).c_str());
        } catch (const std::exception& e) {
            std::printf("benchmark failed: %s\n", e.what());
        }
    }
    report(6, "synthetic benchmark", [&] {
        if (!bench) throw std::runtime_error("benchmark did not run");
        return benchmark_ordering(*bench);
    });
    report(7, "ablation direction", [&] {
        if (!bench) throw std::runtime_error("benchmark did not run");
        return ablation_direction(*bench);
    });
    report(8, "determinism and persistence", [&] { return determinism_persistence(workers); });
    return all ? 0 : 1;
}
