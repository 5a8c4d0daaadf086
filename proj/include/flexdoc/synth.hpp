#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexdoc/document.hpp"
#include "flexdoc/evaluation.hpp"
#include "flexdoc/masking.hpp"

namespace flexdoc {

/// Element types of the crello-like preset.
enum class SynthType : int { Shape = 0, Image = 1, Text = 2, Fill = 3 };

struct GeneratorConfig {
    std::size_t train_documents = 4000;
    std::size_t val_documents = 500;
    std::size_t test_documents = 500;
    /// Element count is uniform on [min_elements, max_elements].
    std::size_t min_elements = 2;
    std::size_t max_elements = 12;
    /// Probability that a field follows its planted rule; otherwise it is drawn uniformly.
    double rho = 0.9;
    std::uint64_t seed = 0;
    std::size_t num_themes = 4;
    /// Per-element latent variants (layout slot, feature cluster, font).
    std::size_t num_variants = 2;
    std::size_t feature_dim = 16;
    /// Share of text among the elements that are neither the fill nor the image.
    double text_probability = 0.6;
    /// Feature noise standard deviation at rho = 0 (scaled by 1 - rho).
    double feature_jitter = 1.0;
    std::size_t position_bins = 64;
    std::size_t color_bins = 16;
    std::size_t num_fonts = 8;
    /// For rho >= 0.8, require oracle - Most-frequent >= 0.2 on ATTR and ELEM,
    /// re-seeding the planted rules when the check fails.
    bool check_learnability = true;
    /// Re-seed counter of the planted rules; set by generate().
    std::size_t attempt = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static GeneratorConfig from_json(const nlohmann::json& j, const std::string& path = "generator");
};

/// Schema of the crello-like preset: type, pos_x, pos_y, size_w, size_h,
/// color_r, color_g, color_b, font, image_feat, text_feat.
Schema crello_schema(const GeneratorConfig& config);

enum class Split : int { Train = 0, Val = 1, Test = 2 };
std::string_view to_string(Split s);
std::string document_id(Split split, std::size_t index);

/// Hidden variables behind one generated document.
struct DocumentLatents {
    std::size_t theme = 0;
    std::vector<int> types;
    std::vector<std::size_t> variants;
};

/// The planted rules for one configuration and their sampler.
class SyntheticWorld {
public:
    explicit SyntheticWorld(GeneratorConfig config);

    const GeneratorConfig& config() const { return config_; }
    const Schema& schema() const { return schema_; }

    Document generate(Split split, std::size_t index, DocumentLatents* latents = nullptr) const;

    /// Planted value of a categorical field (noise-free).
    int planted_category(std::size_t attribute, int type, std::size_t theme, std::size_t variant) const;
    /// Planted feature cluster center.
    const std::vector<double>& feature_center(std::size_t attribute, std::size_t theme, std::size_t variant) const;
    /// Expected feature vector: rho * own center + (1 - rho) * mean of all centers.
    std::vector<double> expected_feature(std::size_t attribute, std::size_t theme, std::size_t variant) const;

private:
    GeneratorConfig config_;
    Schema schema_;
    // layout_[type][variant] = {x, y, w, h} bins
    std::vector<std::vector<std::array<int, 4>>> layout_;
    // palette_[theme][type][channel]
    std::vector<std::vector<std::array<int, 3>>> palette_;
    // font_[theme][variant]
    std::vector<std::vector<int>> font_;
    // centers_[0 image | 1 text][theme * variants + variant]
    std::array<std::vector<std::vector<double>>, 2> centers_;
    std::array<std::vector<double>, 2> center_mean_;
};

struct Corpus {
    GeneratorConfig config;
    Schema schema;
    std::vector<Document> train;
    std::vector<Document> val;
    std::vector<Document> test;
    nlohmann::json manifest;
};

/// Deterministic in the config: the same seed gives byte-identical splits.
Corpus generate(GeneratorConfig config);

/// Writes schema.json, {train,val,test}.jsonl and manifest.json into `dir`.
void write_corpus(const Corpus& corpus, const std::string& dir);
/// Reads a corpus directory (generated or external); manifest.json is optional.
Corpus read_corpus(const std::string& dir);

/// Completes masked fields from the planted rules: categorical fields get the
/// planted value, numerical fields the expected feature. Throws DataError when
/// the document id does not parse or its visible fields do not match the
/// generator's output.
Document bayes_oracle(const Document& input, const MaskSet& mask, const SyntheticWorld& world);

class BayesOraclePredictor : public Predictor {
public:
    explicit BayesOraclePredictor(GeneratorConfig config) : world_(std::move(config)) {}
    std::string name() const override { return "Oracle"; }
    std::vector<Document> predict(std::span<const Document> inputs, std::span<const MaskSet> masks,
                                  const TaskSpec& task) const override;

private:
    SyntheticWorld world_;
};

}  // namespace flexdoc
