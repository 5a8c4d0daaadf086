#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "flexdoc/autodiff.hpp"
#include "flexdoc/error.hpp"
#include "flexdoc/grad_check.hpp"

using namespace flexdoc;
using T64 = Tensor<double>;
using V = Var<double>;

namespace {

T64 random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    T64 t(r, c);
    for (auto& x : t.storage()) x = n(rng);
    return t;
}

using OpFn = std::function<V(Tape<double>&, const std::vector<V>&)>;

// Checks d/dx sum(op(x) * R) for a fixed random R against finite differences.
GradCheckReport check_op(std::vector<T64> inputs, const OpFn& op, std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    T64 weights;
    auto run = [&](bool with_backward, std::vector<T64>* grads) {
        Tape<double> tape;
        std::vector<V> leaves;
        for (const auto& x : inputs) leaves.push_back(tape.parameter(x));
        auto out = op(tape, leaves);
        if (weights.size() == 0) weights = random_tensor(out.rows(), out.cols(), rng);
        auto loss = ad::sum(ad::mul(out, tape.constant(weights)));
        if (with_backward) {
            tape.backward(loss);
            for (const auto& l : leaves) grads->push_back(tape.grad(l));
        }
        return loss.value().item();
    };
    std::vector<T64> analytic;
    run(true, &analytic);
    std::vector<T64*> ptrs;
    for (auto& x : inputs) ptrs.push_back(&x);
    GradCheckOptions opt;
    opt.probes = 60;
    opt.seed = seed;
    return grad_check([&] { return run(false, nullptr); }, std::span<T64* const>(ptrs),
                      std::span<const T64>(analytic), opt);
}

}  // namespace

TEST_CASE("softmax and layer norm basics") {
    Tape<double> tape;
    auto s = ad::softmax(tape.constant(T64(1, 2, 0.0)));
    CHECK(s.value()(0, 0) == doctest::Approx(0.5));
    CHECK(s.value()(0, 1) == doctest::Approx(0.5));

    auto ln = ad::layer_norm<double>(tape.constant(T64(2, 5, 3.0)), std::nullopt, std::nullopt);
    for (double x : ln.value().storage()) CHECK(x == 0.0);

    std::mt19937_64 rng(2);
    const auto x = random_tensor(8, 7, rng, 5.0);
    auto sm = ad::softmax(tape.constant(x));
    auto nl = ad::layer_norm<double>(tape.constant(x), std::nullopt, std::nullopt);
    for (std::size_t r = 0; r < 8; ++r) {
        double sum = 0.0, mean = 0.0, var = 0.0;
        for (std::size_t c = 0; c < 7; ++c) {
            sum += sm.value()(r, c);
            mean += nl.value()(r, c) / 7.0;
        }
        for (std::size_t c = 0; c < 7; ++c) var += (nl.value()(r, c) - mean) * (nl.value()(r, c) - mean) / 7.0;
        CHECK(std::abs(sum - 1.0) <= 1e-6);
        CHECK(std::abs(mean) <= 1e-6);
        CHECK(std::abs(var - 1.0) <= 1e-4);
    }
}

TEST_CASE("matmul matches a naive triple loop") {
    std::mt19937_64 rng(3);
    for (auto [m, k, n] : {std::tuple{2, 3, 4}, std::tuple{7, 1, 5}, std::tuple{16, 33, 9}}) {
        const auto a = random_tensor(m, k, rng);
        const auto b = random_tensor(k, n, rng);
        Tape<double> tape;
        const auto c = ad::matmul(tape.constant(a), tape.constant(b)).value();
        REQUIRE(c.rows() == static_cast<std::size_t>(m));
        REQUIRE(c.cols() == static_cast<std::size_t>(n));
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int p = 0; p < k; ++p) s += a(i, p) * b(p, j);
                CHECK(c(i, j) == doctest::Approx(s).epsilon(1e-12));
            }
        }
    }
    Tape<double> tape;
    CHECK_THROWS_AS(ad::matmul(tape.constant(T64(2, 3)), tape.constant(T64(2, 3))), ShapeError);
    CHECK_THROWS_AS(ad::add(tape.constant(T64(2, 3)), tape.constant(T64(3, 2))), ShapeError);
}

TEST_CASE("backward on small graphs") {
    Tape<double> tape;
    auto x = tape.leaf(T64(1, 1, 3.0));
    auto y = tape.leaf(T64(1, 1, -2.0));
    tape.backward(ad::mul(x, y));
    CHECK(tape.grad(x).item() == -2.0);
    CHECK(tape.grad(y).item() == 3.0);

    Tape<double> fan;
    auto a = fan.leaf(T64(1, 1, 1.5));
    fan.backward(ad::add(a, a));
    CHECK(fan.grad(a).item() == 2.0);

    Tape<double> bad;
    auto m = bad.leaf(T64(2, 2, 1.0));
    CHECK_THROWS_AS(bad.backward(m), ShapeError);
    CHECK_THROWS(bad.record(T64(1, 1), {5}, nullptr));
}

TEST_CASE("embedding lookup scatters repeated ids") {
    Tape<double> tape;
    std::mt19937_64 rng(4);
    auto table = tape.leaf(random_tensor(4, 3, rng));
    auto rows = ad::embedding_lookup(table, {2, 0, 2, 2, -1});
    CHECK(rows.value()(4, 0) == 0.0);
    tape.backward(ad::sum(rows));
    const auto g = tape.grad(table);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(g(0, c) == 1.0);
        CHECK(g(1, c) == 0.0);
        CHECK(g(2, c) == 3.0);
        CHECK(g(3, c) == 0.0);
    }
}

TEST_CASE("dropout scaling and identity") {
    Tape<double> tape;
    std::mt19937_64 rng(5);
    auto x = tape.constant(T64(50, 40, 1.0));
    const auto y = ad::dropout(x, 0.25, rng, true).value();
    std::size_t kept = 0;
    for (double v : y.storage()) {
        CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75)));
        kept += v != 0.0;
    }
    CHECK(std::abs(static_cast<double>(kept) / 2000.0 - 0.75) < 0.05);
    CHECK(ad::dropout(x, 0.25, rng, false).value().storage() == x.value().storage());
    CHECK_THROWS(ad::dropout(x, 1.0, rng, true));
    CHECK_THROWS(ad::dropout(x, -0.1, rng, true));
}

TEST_CASE("grad_check on a quadratic") {
    std::mt19937_64 rng(6);
    T64 w = random_tensor(5, 4, rng);
    T64 g(w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) g[i] = 2.0 * w[i];
    auto f = [&] {
        double s = 0.0;
        for (double x : w.storage()) s += x * x;
        return s;
    };
    T64* params[] = {&w};
    GradCheckOptions opt;
    opt.tol = 1e-8;
    const auto r = grad_check(f, std::span<T64* const>(params), std::span<const T64>(&g, 1), opt);
    CHECK(r.passed);
    CHECK(r.max_rel_error <= 1e-8);
    CHECK(r.probes == 200);
}

TEST_CASE("every differentiable op passes a finite-difference check") {
    std::mt19937_64 rng(7);
    auto a = random_tensor(4, 5, rng);
    auto b = random_tensor(4, 5, rng);
    auto w = random_tensor(5, 3, rng);
    auto bias = random_tensor(1, 3, rng);
    auto row = random_tensor(1, 5, rng);

    std::vector<std::pair<const char*, GradCheckReport>> reports;
    reports.emplace_back("matmul", check_op({a, w}, [](auto&, auto& p) { return ad::matmul(p[0], p[1]); }));
    reports.emplace_back("add", check_op({a, b}, [](auto&, auto& p) { return ad::add(p[0], p[1]); }));
    reports.emplace_back("sub", check_op({a, b}, [](auto&, auto& p) { return ad::sub(p[0], p[1]); }));
    reports.emplace_back("mul", check_op({a, b}, [](auto&, auto& p) { return ad::mul(p[0], p[1]); }));
    reports.emplace_back("scale", check_op({a}, [](auto&, auto& p) { return ad::scale(p[0], 0.3); }));
    reports.emplace_back("scale_rows",
                         check_op({a}, [](auto&, auto& p) { return ad::scale_rows<double>(p[0], {1.0, 0.0, 2.0, -1.0}); }));
    reports.emplace_back("linear", check_op({a, w, bias}, [](auto&, auto& p) { return ad::linear(p[0], p[1], p[2]); }));
    reports.emplace_back("add_bias", check_op({a, row}, [](auto&, auto& p) { return ad::add_bias(p[0], p[1]); }));
    reports.emplace_back("gelu", check_op({a}, [](auto&, auto& p) { return ad::gelu(p[0]); }));
    reports.emplace_back("softmax", check_op({a}, [](auto&, auto& p) { return ad::softmax(p[0]); }));
    reports.emplace_back("layer_norm", check_op({a, row, random_tensor(1, 5, rng)}, [](auto&, auto& p) {
                             return ad::layer_norm<double>(p[0], p[1], p[2]);
                         }));
    reports.emplace_back("embedding", check_op({a}, [](auto&, auto& p) { return ad::embedding_lookup<double>(p[0], {3, 1, 3, -1, 0}); }));
    reports.emplace_back("masked_mean", check_op({a}, [](auto&, auto& p) {
                             return ad::masked_mean<double>(p[0], {true, false, true, true});
                         }));
    reports.emplace_back("concat_slice", check_op({a, b}, [](auto&, auto& p) {
                             return ad::slice_rows(ad::concat_rows<double>({p[0], p[1]}), 2, 7);
                         }));
    reports.emplace_back("cross_entropy", check_op({a}, [](auto&, auto& p) { return ad::cross_entropy<double>(p[0], {0, 4, 2, 2}); }));
    reports.emplace_back("mse", check_op({a}, [&](auto&, auto& p) { return ad::mse(p[0], b); }));
    reports.emplace_back("dropout", check_op({a}, [](auto&, auto& p) {
                             std::mt19937_64 r(3);
                             return ad::dropout(p[0], 0.3, r, true);
                         }));

    // Attention over two padded sequences of length 3 with 2 heads.
    auto x = random_tensor(6, 4, rng);
    ad::SequenceLayout layout{2, 3, {true, true, true, true, true, false}};
    reports.emplace_back("attention", check_op({x, random_tensor(6, 4, rng), random_tensor(6, 4, rng)},
                                               [&](auto&, auto& p) { return ad::attention(p[0], p[1], p[2], layout, 2); }));

    for (const auto& [name, r] : reports) {
        INFO(name << " max rel error " << r.max_rel_error << " at " << r.worst);
        CHECK(r.passed);
    }
}

TEST_CASE("a pre-norm transformer block passes a finite-difference check") {
    std::mt19937_64 rng(8);
    const std::size_t d = 8, ffn = 16;
    std::vector<T64> params{random_tensor(5, d, rng),             // x
                            random_tensor(1, d, rng, 0.1),        // ln gamma offset
                            random_tensor(d, d, rng, 0.3), random_tensor(d, d, rng, 0.3), random_tensor(d, d, rng, 0.3),
                            random_tensor(d, d, rng, 0.3),        // wq wk wv wo
                            random_tensor(d, ffn, rng, 0.3), random_tensor(1, ffn, rng, 0.1),
                            random_tensor(ffn, d, rng, 0.3)};
    ad::SequenceLayout layout{1, 5, std::vector<bool>(5, true)};
    const auto r = check_op(params, [&](Tape<double>& t, const std::vector<V>& p) {
        auto ones = t.constant(T64(1, d, 1.0));
        auto gamma = ad::add(ones, p[1]);
        auto h = ad::layer_norm<double>(p[0], gamma, std::nullopt);
        auto att = ad::attention(ad::matmul(h, p[2]), ad::matmul(h, p[3]), ad::matmul(h, p[4]), layout, 2);
        auto x1 = ad::add(p[0], ad::matmul(att, p[5]));
        auto h2 = ad::layer_norm<double>(x1, std::nullopt, std::nullopt);
        return ad::add(x1, ad::matmul(ad::gelu(ad::add_bias(ad::matmul(h2, p[6]), p[7])), p[8]));
    });
    INFO("max rel error " << r.max_rel_error);
    CHECK(r.passed);
}

TEST_CASE("attention ignores padded keys and single keys mix to identity") {
    std::mt19937_64 rng(9);
    auto q = random_tensor(4, 4, rng), k = random_tensor(4, 4, rng), v = random_tensor(4, 4, rng);
    Tape<double> tape;
    ad::SequenceLayout one{4, 1, std::vector<bool>(4, true)};
    const auto out = ad::attention(tape.constant(q), tape.constant(k), tape.constant(v), one, 2).value();
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(v[i]));

    // Changing a padded key/value row leaves the real rows unchanged.
    ad::SequenceLayout padded{1, 4, {true, true, true, false}};
    const auto base = ad::attention(tape.constant(q), tape.constant(k), tape.constant(v), padded, 2).value();
    auto k2 = k, v2 = v;
    for (std::size_t c = 0; c < 4; ++c) {
        k2(3, c) += 10.0;
        v2(3, c) -= 7.0;
    }
    const auto moved = ad::attention(tape.constant(q), tape.constant(k2), tape.constant(v2), padded, 2).value();
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 4; ++c) CHECK(moved(r, c) == base(r, c));
}

TEST_CASE("identical inputs give bit-identical outputs") {
    std::mt19937_64 rng(10);
    const auto x = random_tensor(6, 8, rng);
    auto run = [&] {
        Tape<float> tape;
        auto h = ad::layer_norm<float>(tape.constant(x.cast<float>()), std::nullopt, std::nullopt);
        std::mt19937_64 r(1);
        return ad::dropout(ad::gelu(h), 0.1, r, true).value().storage();
    };
    CHECK(run() == run());
}
