#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "flexdoc/schema.hpp"

namespace flexdoc {

struct Null {
    bool operator==(const Null&) const = default;
};
struct Mask {
    bool operator==(const Mask&) const = default;
};
struct Categorical {
    int id = 0;
    bool operator==(const Categorical&) const = default;
};
struct Numerical {
    std::vector<double> values;
    bool operator==(const Numerical&) const = default;
};

/// One cell of the element x attribute field array.
using FieldValue = std::variant<Null, Mask, Categorical, Numerical>;

inline bool is_null(const FieldValue& v) { return std::holds_alternative<Null>(v); }
inline bool is_mask(const FieldValue& v) { return std::holds_alternative<Mask>(v); }

/// Field values indexed by the schema's canonical attribute order.
struct Element {
    std::vector<FieldValue> fields;

    const FieldValue& operator[](std::size_t attribute) const { return fields[attribute]; }
    FieldValue& operator[](std::size_t attribute) { return fields[attribute]; }
    bool operator==(const Element&) const = default;

    /// An element of `schema.size()` Null fields (used for padding).
    static Element null_element(const Schema& schema);
};

inline constexpr std::size_t kMaxElements = 50;

/// A set of elements. Storage order is preserved but carries no meaning.
struct Document {
    std::string id;
    std::vector<Element> elements;
    /// Document-level metadata such as "width"/"height" in pixels.
    std::map<std::string, double> canvas;

    std::size_t size() const { return elements.size(); }
    bool operator==(const Document&) const = default;

    /// TYPE id of element `i`, or -1 when the TYPE field is not categorical.
    int element_type(const Schema& schema, std::size_t i) const;
};

struct Violation {
    /// -1 for document-level violations.
    long element = -1;
    std::string attribute;
    std::string message;
};

using ValidationReport = std::vector<Violation>;

/// Checks every Element/Document invariant; violations are returned, not thrown.
/// `allow_mask` accepts [MASK] fields (masked inputs); completed documents pass false.
ValidationReport validate(const Document& document, const Schema& schema, bool allow_mask = true);

/// Padded view over variable-length documents.
struct Batch {
    std::vector<Document> documents;
    /// pad_mask[b][i] is true where position i of document b is a real element.
    std::vector<std::vector<bool>> pad_mask;
    std::size_t max_elements = 0;

    std::size_t size() const { return documents.size(); }
};

Batch pad_batch(const std::vector<Document>& documents, const Schema& schema);
std::vector<Document> unpad_batch(const Batch& batch);

/// Uniform binning of a value in [0,1].
int discretize(double value, int bins);
/// Bin center.
double undiscretize(int bin, int bins);

}  // namespace flexdoc
