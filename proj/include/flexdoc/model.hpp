#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexdoc/autodiff.hpp"
#include "flexdoc/document.hpp"
#include "flexdoc/masking.hpp"

namespace flexdoc {

struct ModelConfig {
    std::size_t d_model = 256;
    std::size_t num_layers = 4;
    std::size_t num_heads = 8;
    std::size_t ffn_dim = 1024;
    double dropout = 0.1;
    bool use_positional_embedding = false;
    /// Prepends a learnable per-task query as an extra sequence position.
    bool use_task_embedding = false;
    /// false gives the feed-forward-only ablation.
    bool use_attention = true;
    std::size_t max_elements = kMaxElements;

    void validate() const;
    nlohmann::json to_json() const;
    /// Strict: unknown keys throw ConfigError naming the key path under `path`.
    static ModelConfig from_json(const nlohmann::json& j, const std::string& path = "model");
};

/// Named parameter tensors, in registration order.
template <class T>
class ParameterStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        /// Whether L2 weight decay applies (false for embedding tables and layer norms).
        bool decay = true;
    };

    std::size_t add(std::string name, Tensor<T> value, bool decay);
    std::size_t size() const { return entries_.size(); }
    std::size_t scalar_count() const;
    std::optional<std::size_t> find(const std::string& name) const;
    std::size_t index_of(const std::string& name) const;

    Entry& operator[](std::size_t i) { return entries_[i]; }
    const Entry& operator[](std::size_t i) const { return entries_[i]; }
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    bool all_finite() const;

private:
    std::vector<Entry> entries_;
};

/// Rows of a padded batch as seen by the network: document b occupies rows
/// [b*seq_len, (b+1)*seq_len); when the task query is enabled it sits at the
/// first row of each document and elements follow.
struct RowLayout {
    std::size_t batch = 0;
    std::size_t elements = 0;  // padded element count
    std::size_t offset = 0;    // 1 with a task query
    std::size_t seq_len() const { return elements + offset; }
    std::size_t row(std::size_t b, std::size_t i) const { return b * seq_len() + offset + i; }
};

/// Encoder inputs derived from a batch of (possibly masked) documents.
template <class T>
struct EncodedInputs {
    struct Attribute {
        std::vector<long> ids;         // categorical: category, C for [NULL], C+1 for [MASK]
        Tensor<T> values;              // numerical: [rows, dim], zeros on special rows
        std::vector<T> value_weight;   // numerical: 1 on value rows, 0 otherwise
        std::vector<long> special;     // numerical: -1 value, 0 [NULL], 1 [MASK]
    };
    RowLayout layout;
    std::vector<Attribute> attributes;
    std::vector<long> positions;
    std::vector<long> task_ids;
    ad::SequenceLayout sequence;
};

/// Masked field prediction network: per-attribute encoders summed per element,
/// transformer blocks over elements, per-attribute linear decoders.
template <class T>
class Model {
public:
    Model(Schema schema, ModelConfig config, std::uint64_t seed);
    Model(Schema schema, ModelConfig config, ParameterStore<T> parameters);

    const Schema& schema() const { return schema_; }
    const ModelConfig& config() const { return config_; }
    ParameterStore<T>& parameters() { return params_; }
    const ParameterStore<T>& parameters() const { return params_; }

    /// Registers every parameter as a leaf on `tape` (index-aligned with parameters()).
    std::vector<Var<T>> bind(Tape<T>& tape) const;

    EncodedInputs<T> prepare(const std::vector<const Document*>& inputs, const std::vector<long>& task_ids) const;

    /// h_enc, one row per sequence position.
    Var<T> encode(Tape<T>& tape, const std::vector<Var<T>>& p, const EncodedInputs<T>& in, bool train,
                  Rng& rng) const;
    /// h_dec; padded positions never act as keys.
    Var<T> transform(Tape<T>& tape, const std::vector<Var<T>>& p, Var<T> h, const ad::SequenceLayout& seq,
                     bool train, Rng& rng) const;
    /// Head output for the given rows: logits (categorical) or vectors (numerical).
    Var<T> decode(const std::vector<Var<T>>& p, Var<T> h_dec, std::size_t attribute,
                  const std::vector<long>& rows) const;

    /// Mean over documents of the masked-field loss sum.
    Var<T> loss(Tape<T>& tape, const std::vector<Var<T>>& p, std::span<const Triplet> triplets,
                std::span<const TaskSpec> tasks, bool train, Rng& rng) const;

    struct Prediction {
        std::vector<Document> documents;
        /// Sum of per-document losses, only when targets were given.
        double loss_sum = 0.0;
    };

    /// Completes masked fields (dropout off). Categorical fields take the argmax
    /// (ties to the lowest id); a masked TYPE is decoded first and fields that are
    /// inapplicable to the predicted type become [NULL].
    Prediction predict_batch(std::span<const Document> inputs, std::span<const MaskSet> masks,
                             std::optional<TaskSpec> task, std::span<const Document> targets = {}) const;

    Document predict(const Document& input, const MaskSet& mask, std::optional<TaskSpec> task = std::nullopt) const;

private:
    void init_parameters(std::uint64_t seed);
    std::string attr_prefix(std::size_t k) const;

    Schema schema_;
    ModelConfig config_;
    ParameterStore<T> params_;
    // Indices into params_ resolved once after construction.
    struct AttrParams {
        std::size_t table = 0;  // categorical
        std::size_t weight = 0, bias = 0, special = 0;  // numerical
        std::size_t dec_weight = 0, dec_bias = 0;
    };
    struct BlockParams {
        std::size_t ln1_g = 0, ln1_b = 0, wq = 0, bq = 0, wk = 0, wv = 0, bv = 0, wo = 0, bo = 0;
        std::size_t ln2_g = 0, ln2_b = 0, w1 = 0, b1 = 0, w2 = 0, b2 = 0;
    };
    std::vector<AttrParams> attr_params_;
    std::vector<BlockParams> block_params_;
    std::size_t pos_table_ = 0, task_table_ = 0, final_g_ = 0, final_b_ = 0;
    void resolve_indices();
};

/// Argmax with ties broken towards the lowest index.
std::size_t argmax_lowest(std::span<const double> values);

struct CheckpointInfo {
    std::uint64_t schema_hash = 0;
    Schema schema;
    ModelConfig config;
    nlohmann::json meta;
};

/// JSON header (schema hash, config, tensor manifest) followed by a
/// little-endian float32 payload. Written atomically.
template <class T>
void save_checkpoint(const Model<T>& model, const std::string& path, const nlohmann::json& meta = {});

/// Throws DataError when the stored schema hash differs from `schema`'s.
template <class T>
Model<T> load_checkpoint(const std::string& path, const Schema& schema, CheckpointInfo* info = nullptr);

CheckpointInfo read_checkpoint_info(const std::string& path);

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;
extern template class Model<float>;
extern template class Model<double>;

}  // namespace flexdoc
