#include "flexdoc/masking.hpp"

#include <algorithm>
#include <cctype>

#include "flexdoc/error.hpp"

namespace flexdoc {

std::string TaskSpec::name() const {
    switch (kind) {
        case TaskKind::Elem: return "ELEM";
        case TaskKind::Pos: return "POS";
        case TaskKind::Attr: return "ATTR";
        case TaskKind::Img: return "IMG";
        case TaskKind::Txt: return "TXT";
        case TaskKind::Random: return "RANDOM";
    }
    return "?";
}

std::vector<AttributeGroup> TaskSpec::target_groups() const {
    switch (kind) {
        case TaskKind::Pos: return {AttributeGroup::Pos};
        case TaskKind::Attr: return {AttributeGroup::Attr};
        case TaskKind::Img: return {AttributeGroup::Img};
        case TaskKind::Txt: return {AttributeGroup::Txt};
        default: return {};
    }
}

TaskSpec parse_task(std::string_view name, double random_p) {
    std::string upper(name);
    std::transform(upper.begin(), upper.end(), upper.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (upper == "ELEM") return {TaskKind::Elem};
    if (upper == "POS") return {TaskKind::Pos};
    if (upper == "ATTR") return {TaskKind::Attr};
    if (upper == "IMG") return {TaskKind::Img};
    if (upper == "TXT") return {TaskKind::Txt};
    if (upper == "RANDOM") {
        if (!(random_p > 0.0 && random_p < 1.0)) throw ConfigError("RANDOM p must lie in (0,1)");
        return {TaskKind::Random, random_p};
    }
    throw ConfigError("unknown task '" + std::string(name) + "'");
}

std::vector<TaskSpec> parse_task_list(std::string_view comma_separated, double random_p) {
    std::vector<TaskSpec> out;
    std::size_t start = 0;
    while (start <= comma_separated.size()) {
        auto end = comma_separated.find(',', start);
        if (end == std::string_view::npos) end = comma_separated.size();
        auto token = comma_separated.substr(start, end - start);
        while (!token.empty() && std::isspace(static_cast<unsigned char>(token.front()))) token.remove_prefix(1);
        while (!token.empty() && std::isspace(static_cast<unsigned char>(token.back()))) token.remove_suffix(1);
        if (!token.empty()) out.push_back(parse_task(token, random_p));
        start = end + 1;
    }
    if (out.empty()) throw ConfigError("empty task list");
    return out;
}

MaskSet element_mask(const Document& document, const std::set<std::size_t>& element_indices) {
    MaskSet mask;
    for (std::size_t e : element_indices) {
        if (e >= document.size()) throw DataError("element_mask: index " + std::to_string(e) + " out of range");
        const auto& element = document.elements[e];
        for (std::size_t k = 0; k < element.fields.size(); ++k) {
            if (!is_null(element[k])) mask.insert({e, k});
        }
    }
    return mask;
}

MaskSet attribute_mask(const Document& document, const Schema& schema,
                       const std::vector<AttributeGroup>& groups) {
    if (groups.empty()) throw DataError("attribute_mask: no groups selected");
    std::vector<std::size_t> attrs;
    for (auto g : groups) {
        for (auto k : schema.group_members(g)) attrs.push_back(k);
    }
    MaskSet mask;
    for (std::size_t e = 0; e < document.size(); ++e) {
        for (auto k : attrs) {
            if (!is_null(document.elements[e][k])) mask.insert({e, k});
        }
    }
    return mask;
}

MaskSet random_mask(const Document& document, double p, Rng& rng) {
    if (!(p > 0.0 && p < 1.0)) throw DataError("random_mask: p must lie in (0,1)");
    std::vector<FieldRef> candidates;
    for (std::size_t e = 0; e < document.size(); ++e) {
        const auto& element = document.elements[e];
        for (std::size_t k = 0; k < element.fields.size(); ++k) {
            if (!is_null(element[k])) candidates.push_back({e, k});
        }
    }
    if (candidates.empty()) return {};
    std::bernoulli_distribution keep(p);
    for (;;) {
        MaskSet mask;
        for (const auto& f : candidates) {
            if (keep(rng)) mask.insert(f);
        }
        if (!mask.empty()) return mask;
    }
}

Document apply_mask(const Document& document, const MaskSet& mask) {
    Document out = document;
    for (const auto& f : mask) out.elements.at(f.element).fields.at(f.attribute) = Mask{};
    return out;
}

Triplet build_triplet(const Document& target, const Schema& schema, const TaskSpec& task, Rng& rng) {
    for (const auto& e : target.elements) {
        for (const auto& v : e.fields) {
            if (is_mask(v)) throw DataError("build_triplet: target '" + target.id + "' contains [MASK]");
        }
    }
    MaskSet mask;
    switch (task.kind) {
        case TaskKind::Elem: {
            if (target.elements.empty()) throw DataError("build_triplet: ELEM on an empty document");
            std::uniform_int_distribution<std::size_t> pick(0, target.size() - 1);
            mask = element_mask(target, {pick(rng)});
            break;
        }
        case TaskKind::Random:
            mask = random_mask(target, task.p, rng);
            break;
        default:
            mask = attribute_mask(target, schema, task.target_groups());
            break;
    }
    return Triplet{apply_mask(target, mask), target, std::move(mask)};
}

TaskSpec sample_task(const std::vector<TaskSpec>& tasks, Rng& rng) {
    if (tasks.empty()) throw DataError("sample_task: empty task list");
    std::uniform_int_distribution<std::size_t> pick(0, tasks.size() - 1);
    return tasks[pick(rng)];
}

MaskSet mask_of(const Document& input) {
    MaskSet mask;
    for (std::size_t e = 0; e < input.size(); ++e) {
        const auto& element = input.elements[e];
        for (std::size_t k = 0; k < element.fields.size(); ++k) {
            if (is_mask(element[k])) mask.insert({e, k});
        }
    }
    return mask;
}

}  // namespace flexdoc
