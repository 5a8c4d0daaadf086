#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "flexdoc/document.hpp"
#include "flexdoc/evaluation.hpp"

namespace flexdoc {

struct GalleryAsset {
    std::string asset_id;
    std::vector<double> vector;
    /// Reference to the real asset (file name, text, document location...).
    std::string payload;
};

/// Retrieval candidates per numerical attribute.
class AssetGallery {
public:
    /// Throws DataError when the vector length differs from earlier assets of the attribute.
    void add(const std::string& attribute, GalleryAsset asset);
    const std::vector<GalleryAsset>& assets(const std::string& attribute) const;
    bool contains(const std::string& attribute) const { return assets_.contains(attribute); }
    std::size_t size() const;

    /// Every non-Null numerical field of the documents; ids are "<doc id>/<element>".
    static AssetGallery from_documents(std::span<const Document> documents, const Schema& schema);

    /// JSONL of {attribute, asset_id, vector, payload}.
    static AssetGallery load(const std::string& path);
    void save(const std::string& path) const;

private:
    std::map<std::string, std::vector<GalleryAsset>> assets_;
};

/// Asset with the highest cosine similarity to `query`; ties go to the
/// lexicographically lowest asset id. Throws on an empty gallery or a length mismatch.
const GalleryAsset& nn_retrieve(std::span<const double> query, const AssetGallery& gallery,
                                const std::string& attribute);

struct RenderStyle {
    double width = 512.0;
    double height = 512.0;
    std::map<int, std::string> type_colors{{0, "#2ca02c"}, {1, "#d62bd6"}, {2, "#7b3fbf"}, {3, "#f2d22e"}};
    std::string fallback_color = "#888888";
    double fill_opacity = 0.35;
    bool labels = false;
};

struct RenderResult {
    std::string svg;
    std::size_t rectangles = 0;
    /// Elements drawn as dashed placeholders because a POS field was missing.
    std::vector<std::size_t> unresolved;
};

/// Box of element `i` from the pos_x/pos_y/size_w/size_h bins, or nullopt when a
/// field is missing or not categorical.
std::optional<Box> element_box(const Document& document, const Schema& schema, std::size_t i);

RenderResult render_svg(const Document& document, const Schema& schema, const RenderStyle& style = {});

}  // namespace flexdoc
