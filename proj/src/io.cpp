#include "flexdoc/io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "flexdoc/error.hpp"

namespace flexdoc {

namespace {

nlohmann::json field_to_json(const FieldValue& v) {
    return std::visit(
        [](const auto& x) -> nlohmann::json {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, Null>) return std::string(kNullSentinel);
            else if constexpr (std::is_same_v<T, Mask>) return std::string(kMaskSentinel);
            else if constexpr (std::is_same_v<T, Categorical>) return x.id;
            else return x.values;
        },
        v);
}

FieldValue field_from_json(const nlohmann::json& j, const AttributeSpec& spec) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == kNullSentinel) return Null{};
        if (s == kMaskSentinel) return Mask{};
        throw DataError("attribute '" + spec.name + "': unknown sentinel '" + s + "'");
    }
    if (spec.is_categorical()) {
        if (!j.is_number_integer()) throw DataError("attribute '" + spec.name + "': expected integer id");
        const auto id = j.get<long long>();
        if (id < 0 || static_cast<std::size_t>(id) >= spec.size)
            throw DataError("attribute '" + spec.name + "': id out of range");
        return Categorical{static_cast<int>(id)};
    }
    if (!j.is_array()) throw DataError("attribute '" + spec.name + "': expected number array");
    Numerical n;
    n.values.reserve(j.size());
    for (const auto& x : j) {
        if (!x.is_number()) throw DataError("attribute '" + spec.name + "': non-numeric component");
        n.values.push_back(x.get<double>());
    }
    if (n.values.size() != spec.size)
        throw DataError("attribute '" + spec.name + "': wrong-length vector (" +
                        std::to_string(n.values.size()) + " != " + std::to_string(spec.size) + ")");
    return n;
}

}  // namespace

nlohmann::json document_to_json(const Document& document, const Schema& schema) {
    nlohmann::json elements = nlohmann::json::array();
    for (const auto& e : document.elements) {
        nlohmann::json obj = nlohmann::json::object();
        for (std::size_t k = 0; k < schema.size(); ++k) obj[schema[k].name] = field_to_json(e[k]);
        elements.push_back(std::move(obj));
    }
    nlohmann::json out;
    out["id"] = document.id;
    if (!document.canvas.empty()) out["canvas"] = document.canvas;
    out["elements"] = std::move(elements);
    return out;
}

Document document_from_json(const nlohmann::json& j, const Schema& schema) {
    if (!j.is_object()) throw DataError("document must be a JSON object");
    Document d;
    for (const auto& [key, value] : j.items()) {
        if (key != "id" && key != "canvas" && key != "elements")
            throw DataError("unknown document key '" + key + "'");
    }
    if (j.contains("id")) {
        if (!j["id"].is_string()) throw DataError("document id must be a string");
        d.id = j["id"].get<std::string>();
    }
    if (j.contains("canvas")) {
        for (const auto& [key, value] : j["canvas"].items()) {
            if (!value.is_number()) throw DataError("canvas entry '" + key + "' must be numeric");
            d.canvas[key] = value.get<double>();
        }
    }
    if (!j.contains("elements") || !j["elements"].is_array())
        throw DataError("document '" + d.id + "' has no elements array");
    for (const auto& obj : j["elements"]) {
        if (!obj.is_object()) throw DataError("element must be a JSON object");
        Element e = Element::null_element(schema);
        std::vector<bool> seen(schema.size(), false);
        for (const auto& [key, value] : obj.items()) {
            const auto k = schema.find(key);
            if (!k) throw DataError("unknown attribute name '" + key + "'");
            e[*k] = field_from_json(value, schema[*k]);
            seen[*k] = true;
        }
        for (std::size_t k = 0; k < schema.size(); ++k) {
            if (!seen[k]) throw DataError("element is missing attribute '" + schema[k].name + "'");
        }
        d.elements.push_back(std::move(e));
    }
    return d;
}

std::string serialize(const Document& document, const Schema& schema) {
    return document_to_json(document, schema).dump();
}

Document deserialize(std::string_view text, const Schema& schema) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed document JSON: ") + e.what());
    }
    return document_from_json(j, schema);
}

std::vector<Document> read_jsonl(const std::string& path, const Schema& schema) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<Document> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(deserialize(line, schema));
        } catch (const DataError& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void write_jsonl(const std::string& path, const std::vector<Document>& documents,
                 const Schema& schema) {
    std::string text;
    for (const auto& d : documents) {
        text += serialize(d, schema);
        text += '\n';
    }
    write_file_atomic(path, text);
}

void write_file_atomic(const std::string& path, std::string_view contents) {
    const std::filesystem::path target(path);
    if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp);
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw DataError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, target);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace flexdoc
