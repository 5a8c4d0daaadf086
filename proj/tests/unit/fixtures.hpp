#pragma once

#include <random>
#include <vector>

#include "flexdoc/document.hpp"
#include "flexdoc/masking.hpp"
#include "flexdoc/schema.hpp"
#include "flexdoc/synth.hpp"

namespace fixtures {

using namespace flexdoc;

// Types: 0 shape, 1 image, 2 text. Text has three image-only attributes, so
// 7 of its 10 fields are non-Null.
inline Schema five_element_schema() {
    using G = AttributeGroup;
    const auto cat = AttributeKind::Categorical;
    const auto num = AttributeKind::Numerical;
    return Schema({{"type", cat, 3, G::Type, {0, 1, 2}},
                   {"pos_x", cat, 8, G::Pos, {0, 1, 2}},
                   {"pos_y", cat, 8, G::Pos, {0, 1, 2}},
                   {"size_w", cat, 8, G::Pos, {0, 1, 2}},
                   {"size_h", cat, 8, G::Pos, {0, 1, 2}},
                   {"font", cat, 5, G::Attr, {2}},
                   {"text_feat", num, 3, G::Txt, {2}},
                   {"image_feat", num, 3, G::Img, {1}},
                   {"image_flip", cat, 2, G::Attr, {1}},
                   {"image_crop", cat, 3, G::Attr, {1}}},
                  {"shape", "image", "text"});
}

/// Random valid document: every applicable field gets a random value.
inline Document random_document(const Schema& schema, std::mt19937_64& rng, std::size_t n, std::string id = "doc") {
    Document d;
    d.id = std::move(id);
    std::uniform_int_distribution<int> pick_type(0, static_cast<int>(schema.num_types()) - 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        Element e = Element::null_element(schema);
        const int type = pick_type(rng);
        for (std::size_t k = 0; k < schema.size(); ++k) {
            const auto& a = schema[k];
            if (k == schema.type_index()) {
                e[k] = Categorical{type};
            } else if (!a.applies(type)) {
                continue;
            } else if (a.is_categorical()) {
                e[k] = Categorical{std::uniform_int_distribution<int>(0, static_cast<int>(a.size) - 1)(rng)};
            } else {
                std::vector<double> v(a.size);
                for (auto& x : v) x = normal(rng);
                e[k] = Numerical{v};
            }
        }
        d.elements.push_back(std::move(e));
    }
    return d;
}

inline Element make_element(const Schema& schema, int type, std::mt19937_64& rng) {
    auto d = random_document(schema, rng, 1);
    Element e = d.elements[0];
    // Re-roll to the requested type.
    while (std::get<Categorical>(e[schema.type_index()]).id != type) e = random_document(schema, rng, 1).elements[0];
    return e;
}

/// Five elements: shape, image, text, text, image.
inline Document five_element_document() {
    const auto schema = five_element_schema();
    std::mt19937_64 rng(5);
    Document d;
    d.id = "five";
    for (int type : {0, 1, 2, 2, 1}) d.elements.push_back(make_element(schema, type, rng));
    return d;
}

inline GeneratorConfig small_generator(std::size_t train = 64, std::size_t val = 16, std::size_t test = 16) {
    GeneratorConfig g;
    g.train_documents = train;
    g.val_documents = val;
    g.test_documents = test;
    g.seed = 11;
    g.check_learnability = false;
    return g;
}

}  // namespace fixtures
