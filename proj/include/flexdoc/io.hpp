#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexdoc/document.hpp"

namespace flexdoc {

inline constexpr std::string_view kNullSentinel = "__NULL__";
inline constexpr std::string_view kMaskSentinel = "__MASK__";

nlohmann::json document_to_json(const Document& document, const Schema& schema);
/// Throws DataError on unknown attributes, out-of-range ids or wrong-length vectors.
Document document_from_json(const nlohmann::json& j, const Schema& schema);

/// Canonical single-line JSON text.
std::string serialize(const Document& document, const Schema& schema);
Document deserialize(std::string_view text, const Schema& schema);

std::vector<Document> read_jsonl(const std::string& path, const Schema& schema);
void write_jsonl(const std::string& path, const std::vector<Document>& documents,
                 const Schema& schema);

/// Writes to `path + ".tmp"` and renames over `path`.
void write_file_atomic(const std::string& path, std::string_view contents);
std::string read_file(const std::string& path);

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace flexdoc
