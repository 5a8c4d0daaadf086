#include "flexdoc/render.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "flexdoc/error.hpp"
#include "flexdoc/io.hpp"

namespace flexdoc {

void AssetGallery::add(const std::string& attribute, GalleryAsset asset) {
    auto& list = assets_[attribute];
    if (asset.vector.empty()) throw DataError("gallery asset '" + asset.asset_id + "' has an empty vector");
    if (!list.empty() && list.front().vector.size() != asset.vector.size())
        throw DataError("gallery asset '" + asset.asset_id + "' has dimension " + std::to_string(asset.vector.size()) +
                        ", expected " + std::to_string(list.front().vector.size()));
    list.push_back(std::move(asset));
}

const std::vector<GalleryAsset>& AssetGallery::assets(const std::string& attribute) const {
    auto it = assets_.find(attribute);
    if (it == assets_.end() || it->second.empty())
        throw DataError("gallery has no assets for attribute '" + attribute + "'");
    return it->second;
}

std::size_t AssetGallery::size() const {
    std::size_t n = 0;
    for (const auto& [k, v] : assets_) n += v.size();
    return n;
}

AssetGallery AssetGallery::from_documents(std::span<const Document> documents, const Schema& schema) {
    AssetGallery g;
    for (const auto& d : documents) {
        for (std::size_t i = 0; i < d.size(); ++i) {
            for (std::size_t k = 0; k < schema.size(); ++k) {
                const auto* n = std::get_if<Numerical>(&d.elements[i][k]);
                if (!n) continue;
                const auto id = d.id + "/" + std::to_string(i);
                g.add(schema[k].name, {id, n->values, id + "#" + schema[k].name});
            }
        }
    }
    return g;
}

AssetGallery AssetGallery::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open gallery '" + path + "'");
    AssetGallery g;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            GalleryAsset a{j.at("asset_id").get<std::string>(), j.at("vector").get<std::vector<double>>(),
                           j.value("payload", std::string())};
            g.add(j.at("attribute").get<std::string>(), std::move(a));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return g;
}

void AssetGallery::save(const std::string& path) const {
    std::string out;
    for (const auto& [attr, list] : assets_) {
        for (const auto& a : list) {
            out += nlohmann::json{{"attribute", attr}, {"asset_id", a.asset_id}, {"vector", a.vector}, {"payload", a.payload}}
                       .dump();
            out += '\n';
        }
    }
    write_file_atomic(path, out);
}

constexpr double kTieTolerance = 1e-12;

const GalleryAsset& nn_retrieve(std::span<const double> query, const AssetGallery& gallery,
                                const std::string& attribute) {
    const auto& list = gallery.assets(attribute);
    if (query.size() != list.front().vector.size())
        throw ShapeError("query has dimension " + std::to_string(query.size()) + ", gallery '" + attribute + "' has " +
                         std::to_string(list.front().vector.size()));
    double qn = 0.0;
    for (double q : query) qn += q * q;
    qn = std::sqrt(qn);
    const GalleryAsset* best = nullptr;
    double best_sim = 0.0;
    for (const auto& a : list) {
        double dot = 0.0, an = 0.0;
        for (std::size_t i = 0; i < query.size(); ++i) {
            dot += query[i] * a.vector[i];
            an += a.vector[i] * a.vector[i];
        }
        const double denom = qn * std::sqrt(an);
        const double sim = denom > 0.0 ? dot / denom : 0.0;
        // Similarities within rounding of each other count as a tie.
        const bool tie = best && std::abs(sim - best_sim) <= kTieTolerance;
        if (!best || (!tie && sim > best_sim) || (tie && a.asset_id < best->asset_id)) {
            best = &a;
            best_sim = sim;
        }
    }
    return *best;
}

// --- SVG --------------------------------------------------------------------

std::optional<Box> element_box(const Document& document, const Schema& schema, std::size_t i) {
    const char* names[4] = {"pos_x", "pos_y", "size_w", "size_h"};
    int v[4];
    std::size_t bins[4];
    for (int j = 0; j < 4; ++j) {
        const auto k = schema.find(names[j]);
        if (!k) return std::nullopt;
        const auto* c = std::get_if<Categorical>(&document.elements.at(i)[*k]);
        if (!c) return std::nullopt;
        v[j] = c->id;
        bins[j] = schema[*k].size;
    }
    // Positions are bin starts; a size bin s spans s + 1 bins, so the last bin reaches the edge.
    return Box{static_cast<double>(v[0]) / static_cast<double>(bins[0]),
               static_cast<double>(v[1]) / static_cast<double>(bins[1]),
               static_cast<double>(v[2] + 1) / static_cast<double>(bins[2]),
               static_cast<double>(v[3] + 1) / static_cast<double>(bins[3])};
}

namespace {

std::string fmt_num(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", x);
    return buf;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

RenderResult render_svg(const Document& document, const Schema& schema, const RenderStyle& style) {
    RenderResult r;
    const double W = style.width, H = style.height;
    std::ostringstream ss;
    ss << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
       << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << fmt_num(W) << "\" height=\""
       << fmt_num(H) << "\" viewBox=\"0 0 " << fmt_num(W) << ' ' << fmt_num(H) << "\">\n"
       << "  <title>" << xml_escape(document.id) << "</title>\n"
       << "  <rect class=\"canvas\" x=\"0\" y=\"0\" width=\"" << fmt_num(W) << "\" height=\"" << fmt_num(H)
       << "\" fill=\"#ffffff\" stroke=\"#000000\"/>\n";
    for (std::size_t i = 0; i < document.size(); ++i) {
        const int type = document.element_type(schema, i);
        auto it = style.type_colors.find(type);
        const std::string color = it == style.type_colors.end() ? style.fallback_color : it->second;
        const std::string label =
            type >= 0 && static_cast<std::size_t>(type) < schema.type_labels().size() ? schema.type_labels()[type] : "unknown";
        const auto box = element_box(document, schema, i);
        if (box) {
            ss << "  <rect class=\"element " << xml_escape(label) << "\" data-index=\"" << i << "\" x=\""
               << fmt_num(box->left * W) << "\" y=\"" << fmt_num(box->top * H) << "\" width=\""
               << fmt_num(box->width * W) << "\" height=\"" << fmt_num(box->height * H) << "\" fill=\"" << color
               << "\" fill-opacity=\"" << fmt_num(style.fill_opacity) << "\" stroke=\"" << color << "\"/>\n";
            ++r.rectangles;
        } else {
            const double w = W / 8.0, h = H / 8.0;
            ss << "  <rect class=\"element unresolved " << xml_escape(label) << "\" data-index=\"" << i << "\" x=\""
               << fmt_num(W / 2.0 - w / 2.0) << "\" y=\"" << fmt_num(H / 2.0 - h / 2.0) << "\" width=\""
               << fmt_num(w) << "\" height=\"" << fmt_num(h) << "\" fill=\"none\" stroke=\"" << color
               << "\" stroke-dasharray=\"4 2\"/>\n";
            r.unresolved.push_back(i);
        }
        if (style.labels && box) {
            ss << "  <text x=\"" << fmt_num(box->left * W + 2.0) << "\" y=\"" << fmt_num(box->top * H + 10.0)
               << "\" font-size=\"9\">" << xml_escape(label) << "</text>\n";
        }
    }
    ss << "</svg>\n";
    r.svg = ss.str();
    return r;
}

}  // namespace flexdoc
