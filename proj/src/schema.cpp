#include "flexdoc/schema.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "flexdoc/error.hpp"
#include "flexdoc/io.hpp"

namespace flexdoc {

std::string_view to_string(AttributeGroup group) {
    switch (group) {
        case AttributeGroup::Type: return "TYPE";
        case AttributeGroup::Pos: return "POS";
        case AttributeGroup::Img: return "IMG";
        case AttributeGroup::Txt: return "TXT";
        case AttributeGroup::Attr: return "ATTR";
    }
    return "ATTR";
}

AttributeGroup parse_group(std::string_view name) {
    if (name == "TYPE") return AttributeGroup::Type;
    if (name == "POS") return AttributeGroup::Pos;
    if (name == "IMG") return AttributeGroup::Img;
    if (name == "TXT") return AttributeGroup::Txt;
    if (name == "ATTR") return AttributeGroup::Attr;
    throw DataError("unknown attribute group '" + std::string(name) + "'");
}

Schema::Schema(std::vector<AttributeSpec> attributes, std::vector<std::string> type_labels)
    : attributes_(std::move(attributes)), type_labels_(std::move(type_labels)) {
    if (attributes_.empty()) throw DataError("schema has no attributes");

    std::unordered_set<std::string> names;
    std::size_t type_count = 0;
    for (std::size_t i = 0; i < attributes_.size(); ++i) {
        const auto& a = attributes_[i];
        if (a.name.empty()) throw DataError("attribute with empty name");
        if (!names.insert(a.name).second) throw DataError("duplicate attribute name '" + a.name + "'");
        if (a.is_categorical() && a.size < 2)
            throw DataError("categorical attribute '" + a.name + "' needs cardinality >= 2");
        if (!a.is_categorical() && a.size < 1)
            throw DataError("numerical attribute '" + a.name + "' needs dim >= 1");
        if (a.group == AttributeGroup::Type) {
            if (!a.is_categorical()) throw DataError("TYPE attribute must be categorical");
            type_index_ = i;
            ++type_count;
        }
    }
    if (type_count != 1) throw DataError("schema needs exactly one TYPE attribute");

    const auto& type = attributes_[type_index_];
    for (const auto& a : attributes_) {
        for (int t : a.applies_to) {
            if (t < 0 || static_cast<std::size_t>(t) >= type.size)
                throw DataError("attribute '" + a.name + "' applies to unknown type " + std::to_string(t));
        }
    }
    for (int t = 0; t < static_cast<int>(type.size); ++t) {
        if (!type.applies(t)) throw DataError("TYPE attribute must apply to every type");
    }
    if (!type_labels_.empty() && type_labels_.size() != type.size)
        throw DataError("type_labels length must equal the TYPE cardinality");
}

std::optional<std::size_t> Schema::find(std::string_view name) const {
    for (std::size_t i = 0; i < attributes_.size(); ++i) {
        if (attributes_[i].name == name) return i;
    }
    return std::nullopt;
}

std::size_t Schema::index_of(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw DataError("unknown attribute '" + std::string(name) + "'");
}

std::vector<std::size_t> Schema::group_members(AttributeGroup group) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < attributes_.size(); ++i) {
        if (attributes_[i].group == group) out.push_back(i);
    }
    return out;
}

std::optional<int> Schema::type_id(std::string_view label) const {
    auto it = std::find(type_labels_.begin(), type_labels_.end(), label);
    if (it == type_labels_.end()) return std::nullopt;
    return static_cast<int>(it - type_labels_.begin());
}

nlohmann::json Schema::to_json() const {
    nlohmann::json attrs = nlohmann::json::array();
    for (const auto& a : attributes_) {
        nlohmann::json j;
        j["name"] = a.name;
        j["kind"] = a.is_categorical() ? "categorical" : "numerical";
        j[a.is_categorical() ? "cardinality" : "dim"] = a.size;
        j["group"] = std::string(to_string(a.group));
        j["applies_to"] = std::vector<int>(a.applies_to.begin(), a.applies_to.end());
        attrs.push_back(std::move(j));
    }
    nlohmann::json out;
    out["attributes"] = std::move(attrs);
    if (!type_labels_.empty()) out["type_labels"] = type_labels_;
    return out;
}

Schema Schema::from_json(const nlohmann::json& j) {
    try {
        std::vector<AttributeSpec> attributes;
        for (const auto& item : j.at("attributes")) {
            AttributeSpec a;
            a.name = item.at("name").get<std::string>();
            const auto kind = item.at("kind").get<std::string>();
            if (kind == "categorical") {
                a.kind = AttributeKind::Categorical;
                a.size = item.at("cardinality").get<std::size_t>();
            } else if (kind == "numerical") {
                a.kind = AttributeKind::Numerical;
                a.size = item.at("dim").get<std::size_t>();
            } else {
                throw DataError("attribute '" + a.name + "' has unknown kind '" + kind + "'");
            }
            a.group = parse_group(item.at("group").get<std::string>());
            for (int t : item.at("applies_to")) a.applies_to.insert(t);
            attributes.push_back(std::move(a));
        }
        std::vector<std::string> labels;
        if (j.contains("type_labels")) labels = j.at("type_labels").get<std::vector<std::string>>();
        return Schema(std::move(attributes), std::move(labels));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed schema: ") + e.what());
    }
}

std::uint64_t Schema::hash() const { return fnv1a(to_json().dump()); }

bool Schema::operator==(const Schema& other) const {
    return to_json() == other.to_json();
}

Schema load_schema(const std::string& path) {
    const std::string text = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("cannot parse schema " + path + ": " + e.what());
    }
    return Schema::from_json(j);
}

void save_schema(const Schema& schema, const std::string& path) {
    write_file_atomic(path, schema.to_json().dump(2) + "\n");
}

}  // namespace flexdoc
