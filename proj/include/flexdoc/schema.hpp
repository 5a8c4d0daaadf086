#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace flexdoc {

enum class AttributeGroup { Type, Pos, Img, Txt, Attr };

std::string_view to_string(AttributeGroup group);
AttributeGroup parse_group(std::string_view name);

enum class AttributeKind { Categorical, Numerical };

/// Declarative description of one attribute (one row of the field array).
struct AttributeSpec {
    std::string name;
    AttributeKind kind = AttributeKind::Categorical;
    /// Category count for categorical attributes, vector length for numerical ones.
    std::size_t size = 2;
    AttributeGroup group = AttributeGroup::Attr;
    /// Element-type ids for which the attribute is meaningful. Everything else is [NULL].
    std::set<int> applies_to;

    bool is_categorical() const { return kind == AttributeKind::Categorical; }
    bool applies(int element_type) const { return applies_to.contains(element_type); }
};

/// Ordered attribute list. The order is canonical and defines attribute
/// iteration everywhere (encoders, serialization, masks).
class Schema {
public:
    Schema() = default;
    /// Validates the invariants and throws DataError on violation.
    explicit Schema(std::vector<AttributeSpec> attributes,
                    std::vector<std::string> type_labels = {});

    const std::vector<AttributeSpec>& attributes() const { return attributes_; }
    std::size_t size() const { return attributes_.size(); }
    const AttributeSpec& operator[](std::size_t index) const { return attributes_[index]; }

    std::size_t type_index() const { return type_index_; }
    const AttributeSpec& type_attribute() const { return attributes_[type_index_]; }
    std::size_t num_types() const { return type_attribute().size; }

    std::optional<std::size_t> find(std::string_view name) const;
    std::size_t index_of(std::string_view name) const;

    /// Attribute indices belonging to `group`, in canonical order.
    std::vector<std::size_t> group_members(AttributeGroup group) const;

    /// Optional human readable names for the TYPE categories.
    const std::vector<std::string>& type_labels() const { return type_labels_; }
    std::optional<int> type_id(std::string_view label) const;

    nlohmann::json to_json() const;
    static Schema from_json(const nlohmann::json& j);

    /// FNV-1a over the canonical JSON dump; stored in checkpoints.
    std::uint64_t hash() const;

    bool operator==(const Schema& other) const;

private:
    std::vector<AttributeSpec> attributes_;
    std::vector<std::string> type_labels_;
    std::size_t type_index_ = 0;
};

Schema load_schema(const std::string& path);
void save_schema(const Schema& schema, const std::string& path);

}  // namespace flexdoc
