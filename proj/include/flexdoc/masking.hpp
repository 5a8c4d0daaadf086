#pragma once

#include <cstddef>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "flexdoc/document.hpp"

namespace flexdoc {

using Rng = std::mt19937_64;

/// One (element, attribute) cell of the field array.
struct FieldRef {
    std::size_t element = 0;
    std::size_t attribute = 0;
    auto operator<=>(const FieldRef&) const = default;
};

/// The set of fields a model has to predict.
using MaskSet = std::set<FieldRef>;

enum class TaskKind { Elem, Pos, Attr, Img, Txt, Random };

inline constexpr std::size_t kNumTaskKinds = 6;

/// A design task expressed as a masking pattern.
struct TaskSpec {
    TaskKind kind = TaskKind::Elem;
    /// Only used by RANDOM.
    double p = 0.15;

    std::string name() const;
    /// Attribute groups targeted by attribute-masking tasks; empty for ELEM and RANDOM.
    std::vector<AttributeGroup> target_groups() const;
    std::size_t index() const { return static_cast<std::size_t>(kind); }
    bool operator==(const TaskSpec&) const = default;
};

/// Parses "ELEM", "POS", "ATTR", "IMG", "TXT" or "RANDOM" (case-insensitive).
TaskSpec parse_task(std::string_view name, double random_p = 0.15);
std::vector<TaskSpec> parse_task_list(std::string_view comma_separated, double random_p = 0.15);

/// Input with masked fields replaced by [MASK], the complete target and the mask.
struct Triplet {
    Document input;
    Document target;
    MaskSet mask;
};

/// Every non-Null field of the selected elements.
MaskSet element_mask(const Document& document, const std::set<std::size_t>& element_indices);

/// Every non-Null field whose attribute belongs to one of `groups`, across all elements.
MaskSet attribute_mask(const Document& document, const Schema& schema,
                       const std::vector<AttributeGroup>& groups);

/// Each non-Null field independently with probability p; redrawn until non-empty.
/// Returns an empty set only when the document has no non-Null field at all.
MaskSet random_mask(const Document& document, double p, Rng& rng);

/// Replaces the fields in `mask` by [MASK].
Document apply_mask(const Document& document, const MaskSet& mask);

Triplet build_triplet(const Document& target, const Schema& schema, const TaskSpec& task, Rng& rng);

TaskSpec sample_task(const std::vector<TaskSpec>& tasks, Rng& rng);

/// Fields currently holding [MASK].
MaskSet mask_of(const Document& input);

}  // namespace flexdoc
