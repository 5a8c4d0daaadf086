#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "fixtures.hpp"
#include "flexdoc/error.hpp"
#include "flexdoc/evaluation.hpp"
#include "flexdoc/training.hpp"

using namespace flexdoc;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.d_model = 16;
    c.num_layers = 1;
    c.num_heads = 2;
    c.ffn_dim = 32;
    c.dropout = 0.0;
    return c;
}

double model_loss(const Model<double>& m, const Triplet& t) {
    Tape<double> tape;
    const auto p = m.bind(tape);
    Rng rng(0);
    const TaskSpec task{TaskKind::Random};
    return m.loss(tape, p, std::span<const Triplet>(&t, 1), std::span<const TaskSpec>(&task, 1), false, rng)
        .value()
        .item();
}

}  // namespace

TEST_CASE("loss terms") {
    Tape<double> tape;
    for (int C : {2, 5, 64}) {
        auto logits = tape.constant(Tensor<double>(1, C, 0.3));
        CHECK(ad::cross_entropy<double>(logits, {1}).value().item() == doctest::Approx(std::log(C)));
    }
    Tensor<double> target(1, 4);
    for (std::size_t i = 0; i < 4; ++i) target[i] = static_cast<double>(i) - 1.5;
    CHECK(ad::mse(tape.constant(target), target).value().item() == 0.0);
    Tensor<double> off = target;
    off[0] += 2.0;
    CHECK(ad::mse(tape.constant(off), target).value().item() == doctest::Approx(1.0));
}

TEST_CASE("model loss masks and adds over fields") {
    const auto schema = fixtures::five_element_schema();
    const Model<double> m(schema, tiny_config(), 1);
    const auto doc = fixtures::five_element_document();
    Rng rng(2);
    const auto t = build_triplet(doc, schema, TaskSpec{TaskKind::Pos}, rng);

    // Targets outside the mask do not matter.
    auto perturbed = t;
    perturbed.target.elements[2][schema.index_of("font")] = Categorical{4};
    perturbed.target.elements[1][schema.index_of("image_feat")] = Numerical{{9.0, -9.0, 9.0}};
    CHECK(model_loss(m, perturbed) == model_loss(m, t));

    // Same input, disjoint halves of the mask.
    auto first = t, second = t;
    first.mask.clear();
    second.mask.clear();
    std::size_t i = 0;
    for (const auto& f : t.mask) (i++ % 2 ? first : second).mask.insert(f);
    CHECK(model_loss(m, first) + model_loss(m, second) == doctest::Approx(model_loss(m, t)).epsilon(1e-12));

    auto empty = t;
    empty.mask.clear();
    CHECK_THROWS_AS(model_loss(m, empty), DataError);
}

TEST_CASE("adam step by hand") {
    ParameterStore<double> p;
    p.add("w", Tensor<double>(1, 1, 0.0), true);
    OptimizerState<double> s;
    AdamConfig c;
    c.weight_decay = 0.0;
    const Tensor<double> g(1, 1, 1.0);
    adam_step(p, std::span<const Tensor<double>>(&g, 1), s, c);
    CHECK(p[0].value.item() == doctest::Approx(-1e-4 / (1.0 + 1e-8)).epsilon(1e-12));
    CHECK(s.step == 1);

    ParameterStore<double> q;
    q.add("w", Tensor<double>(2, 2, 0.7), true);
    OptimizerState<double> sq;
    const Tensor<double> zero(2, 2, 0.0);
    adam_step(q, std::span<const Tensor<double>>(&zero, 1), sq, c);
    for (double x : q[0].value.storage()) CHECK(x == 0.7);
}

TEST_CASE("adam matches a straight-line reference") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    ParameterStore<double> p;
    p.add("decayed", Tensor<double>(3, 4), true);
    p.add("table", Tensor<double>(5, 2), false);
    for (auto& e : p.entries())
        for (auto& x : e.value.storage()) x = n(rng);
    auto ref = p;
    AdamConfig c;
    c.lr = 3e-3;
    OptimizerState<double> s;
    std::vector<std::vector<double>> m(2), v(2);
    for (std::size_t i = 0; i < 2; ++i) {
        m[i].assign(p[i].value.size(), 0.0);
        v[i].assign(p[i].value.size(), 0.0);
    }
    for (int step = 1; step <= 25; ++step) {
        std::vector<Tensor<double>> grads;
        for (const auto& e : p.entries()) {
            Tensor<double> g(e.value.shape());
            for (auto& x : g.storage()) x = n(rng);
            grads.push_back(g);
        }
        adam_step(p, std::span<const Tensor<double>>(grads), s, c);
        for (std::size_t i = 0; i < 2; ++i) {
            const double lambda = i == 0 ? c.weight_decay : 0.0;
            for (std::size_t j = 0; j < ref[i].value.size(); ++j) {
                double& w = ref[i].value[j];
                const double g = grads[i][j] + lambda * w;
                m[i][j] = c.beta1 * m[i][j] + (1 - c.beta1) * g;
                v[i][j] = c.beta2 * v[i][j] + (1 - c.beta2) * g * g;
                const double mh = m[i][j] / (1 - std::pow(c.beta1, step));
                const double vh = v[i][j] / (1 - std::pow(c.beta2, step));
                w -= c.lr * mh / (std::sqrt(vh) + c.eps);
            }
        }
    }
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < p[i].value.size(); ++j) CHECK(std::abs(p[i].value[j] - ref[i].value[j]) <= 1e-12);
}

TEST_CASE("train config is strict") {
    CHECK_THROWS_WITH_AS(TrainConfig::from_json({{"learning_rate", 0.1}}), doctest::Contains("train.learning_rate"),
                         ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"epochs", "ten"}}), ConfigError);
    auto c = TrainConfig::from_json({{"regime", "exp-ft"}});
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.init_checkpoint = "x.ckpt";
    CHECK_NOTHROW(c.validate());
    auto e = TrainConfig::from_json({{"regime", "expert"}, {"expert_task", "IMG"}, {"lr", 1e-3}});
    CHECK(e.expert_task->kind == TaskKind::Img);
    const auto back = TrainConfig::from_json(e.to_json());
    CHECK(back.to_json() == e.to_json());
    auto bad = TrainConfig{};
    bad.adam.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("empty-mask tasks are resampled") {
    const auto schema = fixtures::five_element_schema();
    const auto doc = fixtures::five_element_document();
    Document text;
    text.elements = {doc.elements[2], doc.elements[3]};
    const std::vector<TaskSpec> tasks{TaskSpec{TaskKind::Img}, TaskSpec{TaskKind::Txt}};
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
        auto drawn = sample_training_triplet(text, schema, tasks, rng);
        REQUIRE(drawn);
        CHECK(drawn->second.kind == TaskKind::Txt);
    }
    const std::vector<TaskSpec> only_img{TaskSpec{TaskKind::Img}};
    CHECK_FALSE(sample_training_triplet(text, schema, only_img, rng));
}

TEST_CASE("sharded gradients equal the single-tape gradient") {
    const auto schema = fixtures::five_element_schema();
    const Model<double> m(schema, tiny_config(), 5);
    std::mt19937_64 gen(6);
    Rng rng(7);
    std::vector<Triplet> triplets;
    std::vector<TaskSpec> tasks;
    for (int i = 0; i < 7; ++i) {
        tasks.push_back(TaskSpec{TaskKind::Random, 0.3});
        triplets.push_back(build_triplet(fixtures::random_document(schema, gen, 2 + i), schema, tasks.back(), rng));
    }
    const auto single = compute_gradients_sharded(m, triplets, tasks, 1, 9);
    const auto sharded = compute_gradients_sharded(m, triplets, tasks, 3, 9);
    CHECK(sharded.loss == doctest::Approx(single.loss).epsilon(1e-12));
    for (std::size_t i = 0; i < single.grads.size(); ++i)
        for (std::size_t j = 0; j < single.grads[i].size(); ++j)
            CHECK(std::abs(sharded.grads[i][j] - single.grads[i][j]) <= 1e-12);
}

TEST_CASE("training is deterministic and the loss falls") {
    const auto corpus = generate(fixtures::small_generator(96, 16, 16));
    const auto tasks = parse_task_list("ELEM,ATTR");
    TrainConfig tc;
    tc.epochs = 10;
    tc.batch_size = 16;
    tc.adam.lr = 2e-3;
    tc.seed = 3;
    auto run = [&] {
        return train(Model<float>(corpus.schema, tiny_config(), 3), corpus.train, corpus.val, tasks, tc);
    };
    const auto a = run();
    const auto b = run();
    std::vector<double> la, lb;
    for (const auto& e : a.log) la.push_back(e.loss);
    for (const auto& e : b.log) lb.push_back(e.loss);
    CHECK(la == lb);
    std::vector<double> train_loss;
    for (const auto& e : a.log)
        if (e.split == "train") train_loss.push_back(e.loss);
    REQUIRE(train_loss.size() == 10);
    for (double l : train_loss) CHECK(std::isfinite(l));
    CHECK(train_loss.back() < train_loss.front());
    CHECK(a.best_epoch >= 1);
    CHECK(a.best_score > 0.0);
}

TEST_CASE("training writes a jsonl log and the best checkpoint") {
    const auto corpus = generate(fixtures::small_generator(32, 8, 8));
    const auto dir = std::filesystem::temp_directory_path() / "flexdoc_train_test";
    std::filesystem::remove_all(dir);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 8;
    tc.regime = Regime::Imp;
    tc.log_path = (dir / "log.jsonl").string();
    tc.checkpoint_path = (dir / "best.ckpt").string();
    const auto tasks = parse_task_list("POS,TXT");
    const auto r = train(Model<float>(corpus.schema, tiny_config(), 1), corpus.train, corpus.val, tasks, tc);
    std::ifstream in(tc.log_path);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.contains("epoch"));
        CHECK(j.contains("split"));
        CHECK(j.contains("task"));
        CHECK(j.contains("loss"));
        CHECK(j.contains("score"));
        ++lines;
    }
    CHECK(lines == 3 * 3);
    CHECK(r.log.front().task == "RANDOM");
    const auto loaded = load_checkpoint<float>(tc.checkpoint_path, corpus.schema);
    for (std::size_t i = 0; i < loaded.parameters().size(); ++i)
        CHECK(loaded.parameters()[i].value.storage() == r.best.parameters()[i].value.storage());
}

TEST_CASE("non-finite loss aborts with diagnostics") {
    const auto corpus = generate(fixtures::small_generator(16, 4, 4));
    Model<float> m(corpus.schema, tiny_config(), 1);
    m.parameters()[0].value[0] = std::numeric_limits<float>::quiet_NaN();
    m.parameters()[0].value.fill(std::numeric_limits<float>::quiet_NaN());
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 4;
    const auto tasks = parse_task_list("ELEM");
    CHECK_THROWS_WITH_AS(train(std::move(m), corpus.train, corpus.val, tasks, tc), doctest::Contains("train-"),
                         TrainingError);
}

TEST_CASE("experts train on a single task") {
    const auto corpus = generate(fixtures::small_generator(32, 8, 8));
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    const Model<float> init(corpus.schema, tiny_config(), 2);
    const auto r = train_expert(init, corpus.train, corpus.val, TaskSpec{TaskKind::Img}, tc);
    for (const auto& e : r.log) CHECK(e.task == "IMG");
    // T experts hold T times the parameters of one model.
    CHECK(5 * r.best.parameters().scalar_count() == 5 * init.parameters().scalar_count());
}

TEST_CASE("overfitting one document reproduces its masked fields") {
    const auto corpus = generate(fixtures::small_generator(1, 1, 1));
    auto c = tiny_config();
    c.d_model = 32;
    c.ffn_dim = 64;
    TrainConfig tc;
    tc.epochs = 300;
    tc.batch_size = 1;
    tc.adam.lr = 3e-3;
    tc.adam.weight_decay = 0.0;
    tc.eval_every = 50;
    const auto tasks = parse_task_list("ATTR");
    std::vector<Document> one{corpus.train[0]};
    const auto r = train(Model<float>(corpus.schema, c, 4), one, one, tasks, tc);
    Rng rng(0);
    const auto t = build_triplet(one[0], corpus.schema, tasks[0], rng);
    const auto pred = r.best.predict(t.input, t.mask);
    for (const auto& f : t.mask) {
        const auto& want = one[0].elements[f.element][f.attribute];
        if (std::holds_alternative<Categorical>(want)) CHECK(pred.elements[f.element][f.attribute] == want);
    }
}
