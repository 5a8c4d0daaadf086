#include "flexdoc/document.hpp"

#include <algorithm>
#include <cmath>

#include "flexdoc/error.hpp"

namespace flexdoc {

Element Element::null_element(const Schema& schema) {
    return Element{std::vector<FieldValue>(schema.size(), Null{})};
}

int Document::element_type(const Schema& schema, std::size_t i) const {
    const auto& v = elements.at(i)[schema.type_index()];
    if (const auto* c = std::get_if<Categorical>(&v)) return c->id;
    return -1;
}

ValidationReport validate(const Document& document, const Schema& schema, bool allow_mask) {
    ValidationReport report;
    if (document.elements.empty()) {
        report.push_back({-1, "", "document has no elements"});
    }
    if (document.elements.size() > kMaxElements) {
        report.push_back({-1, "", "document has " + std::to_string(document.elements.size()) +
                                      " elements (limit " + std::to_string(kMaxElements) + ")"});
    }

    const std::size_t type_attr = schema.type_index();
    for (std::size_t e = 0; e < document.elements.size(); ++e) {
        const auto& element = document.elements[e];
        const long idx = static_cast<long>(e);
        if (element.fields.size() != schema.size()) {
            report.push_back({idx, "", "element has " + std::to_string(element.fields.size()) +
                                           " fields, schema has " + std::to_string(schema.size())});
            continue;
        }

        const auto& type_value = element[type_attr];
        std::optional<int> type;
        if (is_null(type_value)) {
            report.push_back({idx, schema[type_attr].name, "TYPE field is Null"});
        } else if (const auto* c = std::get_if<Categorical>(&type_value)) {
            type = c->id;
        }

        for (std::size_t k = 0; k < schema.size(); ++k) {
            const auto& spec = schema[k];
            const auto& value = element[k];
            if (is_mask(value)) {
                if (!allow_mask) report.push_back({idx, spec.name, "unexpected [MASK]"});
            } else if (const auto* c = std::get_if<Categorical>(&value)) {
                if (!spec.is_categorical()) {
                    report.push_back({idx, spec.name, "categorical value for numerical attribute"});
                } else if (c->id < 0 || static_cast<std::size_t>(c->id) >= spec.size) {
                    report.push_back({idx, spec.name, "id out of range"});
                }
            } else if (const auto* n = std::get_if<Numerical>(&value)) {
                if (spec.is_categorical()) {
                    report.push_back({idx, spec.name, "numerical value for categorical attribute"});
                } else if (n->values.size() != spec.size) {
                    report.push_back({idx, spec.name, "vector length " + std::to_string(n->values.size()) +
                                                          " != dim " + std::to_string(spec.size)});
                } else if (!std::all_of(n->values.begin(), n->values.end(),
                                        [](double x) { return std::isfinite(x); })) {
                    report.push_back({idx, spec.name, "non-finite component"});
                }
            }
            // Applicability is only decidable once the type is known.
            if (type && k != type_attr && !spec.applies(*type) && !is_null(value)) {
                report.push_back({idx, spec.name, "non-Null value for inapplicable attribute"});
            }
        }
    }
    return report;
}

Batch pad_batch(const std::vector<Document>& documents, const Schema& schema) {
    if (documents.empty()) throw DataError("pad_batch: empty document list");
    Batch batch;
    for (const auto& d : documents) batch.max_elements = std::max(batch.max_elements, d.size());

    batch.documents.reserve(documents.size());
    batch.pad_mask.reserve(documents.size());
    for (const auto& d : documents) {
        Document padded = d;
        std::vector<bool> mask(batch.max_elements, false);
        std::fill_n(mask.begin(), d.size(), true);
        padded.elements.resize(batch.max_elements, Element::null_element(schema));
        batch.documents.push_back(std::move(padded));
        batch.pad_mask.push_back(std::move(mask));
    }
    return batch;
}

std::vector<Document> unpad_batch(const Batch& batch) {
    std::vector<Document> out;
    out.reserve(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        Document d = batch.documents[b];
        const auto& mask = batch.pad_mask[b];
        const auto real = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
        d.elements.resize(real);
        out.push_back(std::move(d));
    }
    return out;
}

int discretize(double value, int bins) {
    if (bins <= 0) throw DataError("discretize: bins must be positive");
    if (!(value >= 0.0 && value <= 1.0)) throw DataError("discretize: value outside [0,1]");
    const int bin = static_cast<int>(std::floor(value * bins));
    return std::min(bin, bins - 1);
}

double undiscretize(int bin, int bins) {
    if (bins <= 0 || bin < 0 || bin >= bins) throw DataError("undiscretize: bin out of range");
    return (bin + 0.5) / bins;
}

}  // namespace flexdoc
