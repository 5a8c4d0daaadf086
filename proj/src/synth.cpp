#include "flexdoc/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <sstream>

#include <spdlog/spdlog.h>

#include "flexdoc/config_util.hpp"
#include "flexdoc/error.hpp"
#include "flexdoc/io.hpp"

namespace flexdoc {

namespace {

constexpr int kShape = static_cast<int>(SynthType::Shape);
constexpr int kImage = static_cast<int>(SynthType::Image);
constexpr int kText = static_cast<int>(SynthType::Text);
constexpr int kFill = static_cast<int>(SynthType::Fill);

// Attribute order of the preset.
enum Attr : std::size_t { kType, kPosX, kPosY, kSizeW, kSizeH, kColorR, kColorG, kColorB, kFont, kImageFeat, kTextFeat };

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
    std::uint32_t w[2];
    seq.generate(w, w + 2);
    return (static_cast<std::uint64_t>(w[0]) << 32) | w[1];
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace

// --- Config -----------------------------------------------------------------

void GeneratorConfig::validate() const {
    if (min_elements < 2) throw ConfigError("generator.min_elements must be at least 2 (one fill and one image)");
    if (max_elements < min_elements) throw ConfigError("generator.max_elements must be >= min_elements");
    if (max_elements > kMaxElements) throw ConfigError("generator.max_elements exceeds the element limit");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("generator.rho must lie in [0,1]");
    if (!(text_probability >= 0.0 && text_probability <= 1.0))
        throw ConfigError("generator.text_probability must lie in [0,1]");
    if (!(feature_jitter >= 0.0)) throw ConfigError("generator.feature_jitter must be non-negative");
    if (num_themes == 0 || num_variants == 0) throw ConfigError("generator.num_themes/num_variants must be positive");
    if (feature_dim == 0) throw ConfigError("generator.feature_dim must be positive");
    if (position_bins < 8) throw ConfigError("generator.position_bins must be at least 8");
    if (color_bins < 2 || num_fonts < 2) throw ConfigError("generator.color_bins/num_fonts must be at least 2");
}

nlohmann::json GeneratorConfig::to_json() const {
    return {{"train_documents", train_documents},
            {"val_documents", val_documents},
            {"test_documents", test_documents},
            {"min_elements", min_elements},
            {"max_elements", max_elements},
            {"rho", rho},
            {"seed", seed},
            {"num_themes", num_themes},
            {"num_variants", num_variants},
            {"feature_dim", feature_dim},
            {"text_probability", text_probability},
            {"feature_jitter", feature_jitter},
            {"position_bins", position_bins},
            {"color_bins", color_bins},
            {"num_fonts", num_fonts},
            {"check_learnability", check_learnability},
            {"attempt", attempt}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j, const std::string& path) {
    GeneratorConfig c;
    KeyReader r(j, path);
    r.read("train_documents", c.train_documents);
    r.read("val_documents", c.val_documents);
    r.read("test_documents", c.test_documents);
    r.read("min_elements", c.min_elements);
    r.read("max_elements", c.max_elements);
    r.read("rho", c.rho);
    r.read("seed", c.seed);
    r.read("num_themes", c.num_themes);
    r.read("num_variants", c.num_variants);
    r.read("feature_dim", c.feature_dim);
    r.read("text_probability", c.text_probability);
    r.read("feature_jitter", c.feature_jitter);
    r.read("position_bins", c.position_bins);
    r.read("color_bins", c.color_bins);
    r.read("num_fonts", c.num_fonts);
    r.read("check_learnability", c.check_learnability);
    r.read("attempt", c.attempt);
    r.finish();
    return c;
}

Schema crello_schema(const GeneratorConfig& config) {
    using G = AttributeGroup;
    const auto cat = AttributeKind::Categorical;
    const auto num = AttributeKind::Numerical;
    const std::set<int> all{kShape, kImage, kText, kFill};
    const std::set<int> colored{kShape, kText, kFill};
    std::vector<AttributeSpec> a{
        {"type", cat, 4, G::Type, all},
        {"pos_x", cat, config.position_bins, G::Pos, all},
        {"pos_y", cat, config.position_bins, G::Pos, all},
        {"size_w", cat, config.position_bins, G::Pos, all},
        {"size_h", cat, config.position_bins, G::Pos, all},
        {"color_r", cat, config.color_bins, G::Attr, colored},
        {"color_g", cat, config.color_bins, G::Attr, colored},
        {"color_b", cat, config.color_bins, G::Attr, colored},
        {"font", cat, config.num_fonts, G::Attr, {kText}},
        {"image_feat", num, config.feature_dim, G::Img, {kImage}},
        {"text_feat", num, config.feature_dim, G::Txt, {kText}},
    };
    return Schema(std::move(a), {"shape", "image", "text", "fill"});
}

std::string_view to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

std::string document_id(Split split, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "-%06zu", index);
    return std::string(to_string(split)) + buf;
}

// --- Planted rules ----------------------------------------------------------

SyntheticWorld::SyntheticWorld(GeneratorConfig config) : config_(std::move(config)) {
    config_.validate();
    schema_ = crello_schema(config_);
    Rng rng(stream_seed(config_.seed, config_.attempt, 0x3057a7e5ULL));
    const int bins = static_cast<int>(config_.position_bins);
    const std::size_t V = config_.num_variants, K = config_.num_themes;

    layout_.assign(4, std::vector<std::array<int, 4>>(V));
    for (int type = 0; type < 4; ++type) {
        for (std::size_t v = 0; v < V; ++v) {
            if (type == kFill) {
                layout_[type][v] = {0, 0, bins - 1, bins - 1};
                continue;
            }
            // Distinct boxes per variant so that layout reveals the variant.
            for (;;) {
                const int w = uniform_int(rng, bins / 8, bins / 2);
                const int h = uniform_int(rng, bins / 16, bins / 3);
                std::array<int, 4> box{uniform_int(rng, 0, bins - 1 - w), uniform_int(rng, 0, bins - 1 - h), w, h};
                bool clash = false;
                for (std::size_t u = 0; u < v; ++u) {
                    for (int j = 0; j < 4; ++j) clash = clash || layout_[type][u][j] == box[j];
                }
                if (!clash) {
                    layout_[type][v] = box;
                    break;
                }
            }
        }
    }

    const int colors = static_cast<int>(config_.color_bins);
    palette_.assign(K, std::vector<std::array<int, 3>>(4, {0, 0, 0}));
    for (std::size_t t = 0; t < K; ++t) {
        for (int type : {kShape, kText, kFill}) {
            for (int ch = 0; ch < 3; ++ch) palette_[t][type][ch] = uniform_int(rng, 0, colors - 1);
        }
    }
    font_.assign(K, std::vector<int>(V));
    for (std::size_t t = 0; t < K; ++t) {
        for (std::size_t v = 0; v < V; ++v) font_[t][v] = uniform_int(rng, 0, static_cast<int>(config_.num_fonts) - 1);
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto f : {0, 1}) {
        centers_[f].assign(K * V, std::vector<double>(config_.feature_dim));
        center_mean_[f].assign(config_.feature_dim, 0.0);
        for (auto& c : centers_[f]) {
            for (std::size_t d = 0; d < c.size(); ++d) {
                c[d] = normal(rng);
                center_mean_[f][d] += c[d] / static_cast<double>(K * V);
            }
        }
    }
}

int SyntheticWorld::planted_category(std::size_t attribute, int type, std::size_t theme, std::size_t variant) const {
    switch (attribute) {
        case kType: return type;
        case kPosX:
        case kPosY:
        case kSizeW:
        case kSizeH: return layout_.at(type).at(variant)[attribute - kPosX];
        case kColorR:
        case kColorG:
        case kColorB: return palette_.at(theme).at(type)[attribute - kColorR];
        case kFont: return font_.at(theme).at(variant);
        default: throw DataError("planted_category: attribute is not categorical");
    }
}

const std::vector<double>& SyntheticWorld::feature_center(std::size_t attribute, std::size_t theme,
                                                          std::size_t variant) const {
    if (attribute != kImageFeat && attribute != kTextFeat) throw DataError("feature_center: not a feature attribute");
    return centers_[attribute == kTextFeat].at(theme * config_.num_variants + variant);
}

std::vector<double> SyntheticWorld::expected_feature(std::size_t attribute, std::size_t theme,
                                                     std::size_t variant) const {
    const auto& own = feature_center(attribute, theme, variant);
    const auto& mean = center_mean_[attribute == kTextFeat];
    std::vector<double> out(own.size());
    for (std::size_t d = 0; d < own.size(); ++d) out[d] = config_.rho * own[d] + (1.0 - config_.rho) * mean[d];
    return out;
}

Document SyntheticWorld::generate(Split split, std::size_t index, DocumentLatents* latents) const {
    Rng rng(stream_seed(config_.seed ^ (static_cast<std::uint64_t>(config_.attempt) << 48),
                        static_cast<std::uint64_t>(split), index));
    const auto& cfg = config_;
    DocumentLatents lat;
    lat.theme = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(cfg.num_themes) - 1));
    const std::size_t n = static_cast<std::size_t>(
        uniform_int(rng, static_cast<int>(cfg.min_elements), static_cast<int>(cfg.max_elements)));
    lat.types = {kFill, kImage};
    for (std::size_t i = 2; i < n; ++i) lat.types.push_back(uniform01(rng) < cfg.text_probability ? kText : kShape);
    std::shuffle(lat.types.begin(), lat.types.end(), rng);

    Document doc;
    doc.id = document_id(split, index);
    doc.canvas = {{"width", 512.0}, {"height", 512.0}};
    std::normal_distribution<double> jitter(0.0, cfg.feature_jitter * (1.0 - cfg.rho));
    const std::size_t n_components = cfg.num_themes * cfg.num_variants;

    auto noisy = [&](int planted, std::size_t cardinality) {
        if (uniform01(rng) < cfg.rho) return planted;
        return uniform_int(rng, 0, static_cast<int>(cardinality) - 1);
    };

    for (std::size_t i = 0; i < n; ++i) {
        const int type = lat.types[i];
        const std::size_t variant =
            static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(cfg.num_variants) - 1));
        lat.variants.push_back(variant);
        Element e = Element::null_element(schema_);
        e[kType] = Categorical{type};
        for (std::size_t k = kPosX; k <= kFont; ++k) {
            if (!schema_[k].applies(type)) continue;
            e[k] = Categorical{noisy(planted_category(k, type, lat.theme, variant), schema_[k].size)};
        }
        for (std::size_t k : {std::size_t(kImageFeat), std::size_t(kTextFeat)}) {
            if (!schema_[k].applies(type)) continue;
            std::size_t component = lat.theme * cfg.num_variants + variant;
            if (uniform01(rng) >= cfg.rho)
                component = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(n_components) - 1));
            std::vector<double> x = centers_[k == kTextFeat][component];
            for (auto& v : x) v += jitter(rng);
            e[k] = Numerical{std::move(x)};
        }
        doc.elements.push_back(std::move(e));
    }
    if (latents) *latents = std::move(lat);
    return doc;
}

// --- Oracle -----------------------------------------------------------------

namespace {

std::pair<Split, std::size_t> parse_document_id(const std::string& id) {
    const auto dash = id.rfind('-');
    if (dash == std::string::npos) throw DataError("document '" + id + "' was not produced by the generator");
    const auto prefix = id.substr(0, dash);
    Split split;
    if (prefix == "train") split = Split::Train;
    else if (prefix == "val") split = Split::Val;
    else if (prefix == "test") split = Split::Test;
    else throw DataError("document '" + id + "' was not produced by the generator");
    std::size_t index = 0;
    const char* b = id.data() + dash + 1;
    const char* e = id.data() + id.size();
    auto [ptr, ec] = std::from_chars(b, e, index);
    if (ec != std::errc() || ptr != e || b == e) throw DataError("document '" + id + "' was not produced by the generator");
    return {split, index};
}

bool same_field(const FieldValue& a, const FieldValue& b) {
    const auto* na = std::get_if<Numerical>(&a);
    const auto* nb = std::get_if<Numerical>(&b);
    if (na && nb) {
        if (na->values.size() != nb->values.size()) return false;
        for (std::size_t i = 0; i < na->values.size(); ++i) {
            if (std::abs(na->values[i] - nb->values[i]) > 1e-9 * (1.0 + std::abs(nb->values[i]))) return false;
        }
        return true;
    }
    return a == b;
}

}  // namespace

Document bayes_oracle(const Document& input, const MaskSet& mask, const SyntheticWorld& world) {
    const auto [split, index] = parse_document_id(input.id);
    DocumentLatents lat;
    const Document truth = world.generate(split, index, &lat);
    if (truth.size() != input.size())
        throw DataError("document '" + input.id + "' does not match the generator (element count)");
    for (std::size_t i = 0; i < input.size(); ++i) {
        for (std::size_t k = 0; k < world.schema().size(); ++k) {
            if (mask.contains(FieldRef{i, k})) continue;
            if (!same_field(input.elements[i][k], truth.elements[i][k]))
                throw DataError("document '" + input.id + "' does not match the generator (element " +
                                std::to_string(i) + ", " + world.schema()[k].name + ")");
        }
    }
    Document out = input;
    for (const auto& f : mask) {
        const int type = lat.types.at(f.element);
        const auto& spec = world.schema()[f.attribute];
        auto& field = out.elements.at(f.element)[f.attribute];
        if (!spec.applies(type)) field = Null{};
        else if (spec.is_categorical())
            field = Categorical{world.planted_category(f.attribute, type, lat.theme, lat.variants[f.element])};
        else field = Numerical{world.expected_feature(f.attribute, lat.theme, lat.variants[f.element])};
    }
    return out;
}

std::vector<Document> BayesOraclePredictor::predict(std::span<const Document> inputs, std::span<const MaskSet> masks,
                                                    const TaskSpec&) const {
    std::vector<Document> out;
    out.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) out.push_back(bayes_oracle(inputs[i], masks[i], world_));
    return out;
}

// --- Corpus -----------------------------------------------------------------

Corpus generate(GeneratorConfig config) {
    config.validate();
    constexpr std::size_t kMaxAttempts = 16;
    const std::size_t first = config.attempt;
    for (std::size_t attempt = first; attempt < first + kMaxAttempts; ++attempt) {
        config.attempt = attempt;
        SyntheticWorld world(config);
        Corpus c;
        c.config = config;
        c.schema = world.schema();
        for (std::size_t i = 0; i < config.train_documents; ++i) c.train.push_back(world.generate(Split::Train, i));
        for (std::size_t i = 0; i < config.val_documents; ++i) c.val.push_back(world.generate(Split::Val, i));
        for (std::size_t i = 0; i < config.test_documents; ++i) c.test.push_back(world.generate(Split::Test, i));

        c.manifest = {{"config", config.to_json()},
                      {"schema_hash", c.schema.hash()},
                      {"splits", {{"train", c.train.size()}, {"val", c.val.size()}, {"test", c.test.size()}}}};

        if (!config.check_learnability || config.rho < 0.8 || c.train.empty() || c.val.empty()) return c;

        const MostFrequentPredictor mf(FrequencyTable::build(c.train, c.schema));
        const BayesOraclePredictor oracle(config);
        const std::vector<TaskSpec> tasks{TaskSpec{TaskKind::Attr}, TaskSpec{TaskKind::Elem}};
        const auto probe = std::span<const Document>(c.val).first(std::min<std::size_t>(c.val.size(), 500));
        const auto r_mf = evaluate(mf, probe, c.schema, tasks, config.seed);
        const auto r_or = evaluate(oracle, probe, c.schema, tasks, config.seed);
        bool ok = true;
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            const double gap = r_or.tasks[t].score - r_mf.tasks[t].score;
            c.manifest["learnability"][tasks[t].name()] = {
                {"oracle", r_or.tasks[t].score}, {"most_frequent", r_mf.tasks[t].score}, {"gap", gap}};
            ok = ok && gap >= 0.2;
        }
        if (ok) return c;
        spdlog::warn("learnability gap below 0.2 with attempt {}; re-seeding planted rules", attempt);
    }
    throw DataError("could not plant learnable rules within " + std::to_string(kMaxAttempts) + " attempts");
}

void write_corpus(const Corpus& corpus, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::filesystem::path d(dir);
    save_schema(corpus.schema, (d / "schema.json").string());
    write_jsonl((d / "train.jsonl").string(), corpus.train, corpus.schema);
    write_jsonl((d / "val.jsonl").string(), corpus.val, corpus.schema);
    write_jsonl((d / "test.jsonl").string(), corpus.test, corpus.schema);
    if (!corpus.manifest.is_null()) write_file_atomic((d / "manifest.json").string(), corpus.manifest.dump(2) + "\n");
}

Corpus read_corpus(const std::string& dir) {
    const std::filesystem::path d(dir);
    if (!std::filesystem::is_directory(d)) throw DataError("corpus directory '" + dir + "' does not exist");
    Corpus c;
    c.schema = load_schema((d / "schema.json").string());
    c.train = read_jsonl((d / "train.jsonl").string(), c.schema);
    c.val = read_jsonl((d / "val.jsonl").string(), c.schema);
    c.test = read_jsonl((d / "test.jsonl").string(), c.schema);
    const auto manifest = d / "manifest.json";
    if (std::filesystem::exists(manifest)) {
        c.manifest = nlohmann::json::parse(read_file(manifest.string()));
        if (c.manifest.contains("config")) c.config = GeneratorConfig::from_json(c.manifest["config"]);
    }
    for (const auto* split : {&c.train, &c.val, &c.test}) {
        for (const auto& doc : *split) {
            const auto v = validate(doc, c.schema, false);
            if (!v.empty())
                throw DataError("document '" + doc.id + "' violates the schema: " + v.front().attribute + ": " +
                                v.front().message);
        }
    }
    return c;
}

}  // namespace flexdoc
