#include "flexdoc/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "flexdoc/config_util.hpp"
#include "flexdoc/error.hpp"
#include "flexdoc/io.hpp"

namespace flexdoc {

// --- ModelConfig -----------------------------------------------------------

void ModelConfig::validate() const {
    if (d_model == 0 || num_heads == 0 || ffn_dim == 0) throw ConfigError("model dimensions must be positive");
    if (d_model % num_heads != 0) throw ConfigError("model.d_model must be divisible by model.num_heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0,1)");
    if (max_elements == 0) throw ConfigError("model.max_elements must be positive");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"d_model", d_model},
            {"num_layers", num_layers},
            {"num_heads", num_heads},
            {"ffn_dim", ffn_dim},
            {"dropout", dropout},
            {"use_positional_embedding", use_positional_embedding},
            {"use_task_embedding", use_task_embedding},
            {"use_attention", use_attention},
            {"max_elements", max_elements}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j, const std::string& path) {
    ModelConfig c;
    KeyReader r(j, path);
    r.read("d_model", c.d_model);
    r.read("num_layers", c.num_layers);
    r.read("num_heads", c.num_heads);
    r.read("ffn_dim", c.ffn_dim);
    r.read("dropout", c.dropout);
    r.read("use_positional_embedding", c.use_positional_embedding);
    r.read("use_task_embedding", c.use_task_embedding);
    r.read("use_attention", c.use_attention);
    r.read("max_elements", c.max_elements);
    r.finish();
    c.validate();
    return c;
}

// --- ParameterStore --------------------------------------------------------

template <class T>
std::size_t ParameterStore<T>::add(std::string name, Tensor<T> value, bool decay) {
    if (find(name)) throw ShapeError("duplicate parameter '" + name + "'");
    entries_.push_back({std::move(name), std::move(value), decay});
    return entries_.size() - 1;
}

template <class T>
std::size_t ParameterStore<T>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

template <class T>
std::optional<std::size_t> ParameterStore<T>::find(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].name == name) return i;
    }
    return std::nullopt;
}

template <class T>
std::size_t ParameterStore<T>::index_of(const std::string& name) const {
    if (auto i = find(name)) return *i;
    throw ShapeError("unknown parameter '" + name + "'");
}

template <class T>
bool ParameterStore<T>::all_finite() const {
    for (const auto& e : entries_) {
        if (!e.value.all_finite()) return false;
    }
    return true;
}

// --- Model -----------------------------------------------------------------

template <class T>
Model<T>::Model(Schema schema, ModelConfig config, std::uint64_t seed)
    : schema_(std::move(schema)), config_(config) {
    config_.validate();
    init_parameters(seed);
    resolve_indices();
}

template <class T>
Model<T>::Model(Schema schema, ModelConfig config, ParameterStore<T> parameters)
    : schema_(std::move(schema)), config_(config), params_(std::move(parameters)) {
    config_.validate();
    // Validate the manifest against a freshly laid-out store.
    Model<T> reference(schema_, config_, 0);
    if (reference.params_.size() != params_.size()) throw DataError("parameter count does not match model layout");
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& a = reference.params_[i];
        const auto& b = params_[i];
        if (a.name != b.name || a.value.shape() != b.value.shape())
            throw DataError("parameter '" + b.name + "' does not match model layout (expected '" + a.name + "' " +
                            shape_string(a.value.shape()) + ")");
        params_[i].decay = a.decay;
    }
    resolve_indices();
}

template <class T>
std::string Model<T>::attr_prefix(std::size_t k) const {
    return "attr." + schema_[k].name + ".";
}

template <class T>
void Model<T>::init_parameters(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t d = config_.d_model;
    auto normal = [&](std::size_t rows, std::size_t cols, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        Tensor<T> t(rows, cols);
        for (auto& x : t.storage()) x = static_cast<T>(dist(rng));
        return t;
    };
    auto xavier = [&](std::size_t fan_in, std::size_t fan_out) {
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-a, a);
        Tensor<T> t(fan_in, fan_out);
        for (auto& x : t.storage()) x = static_cast<T>(dist(rng));
        return t;
    };
    auto zeros = [](std::size_t n) { return Tensor<T>(1, n, T(0)); };
    auto ones = [](std::size_t n) { return Tensor<T>(1, n, T(1)); };
    constexpr double kEmbeddingStd = 0.02;

    for (std::size_t k = 0; k < schema_.size(); ++k) {
        const auto& a = schema_[k];
        const auto prefix = attr_prefix(k);
        if (a.is_categorical()) {
            params_.add(prefix + "enc.table", normal(a.size + 2, d, kEmbeddingStd), false);
        } else {
            params_.add(prefix + "enc.weight", xavier(a.size, d), true);
            params_.add(prefix + "enc.bias", zeros(d), true);
            params_.add(prefix + "enc.special", normal(2, d, kEmbeddingStd), false);
        }
    }
    if (config_.use_positional_embedding)
        params_.add("pos.table", normal(config_.max_elements, d, kEmbeddingStd), false);
    if (config_.use_task_embedding) params_.add("task.table", normal(kNumTaskKinds, d, kEmbeddingStd), false);

    for (std::size_t l = 0; l < config_.num_layers; ++l) {
        const auto p = "block." + std::to_string(l) + ".";
        if (config_.use_attention) {
            params_.add(p + "ln1.gamma", ones(d), false);
            params_.add(p + "ln1.beta", zeros(d), false);
            for (const char* w : {"q", "k", "v", "o"}) {
                params_.add(p + "attn.w" + w, xavier(d, d), true);
                // A key bias shifts every score of a query equally and cancels in the softmax.
                if (std::string_view(w) != "k") params_.add(p + "attn.b" + w, zeros(d), true);
            }
        }
        params_.add(p + "ln2.gamma", ones(d), false);
        params_.add(p + "ln2.beta", zeros(d), false);
        params_.add(p + "ffn.w1", xavier(d, config_.ffn_dim), true);
        params_.add(p + "ffn.b1", zeros(config_.ffn_dim), true);
        params_.add(p + "ffn.w2", xavier(config_.ffn_dim, d), true);
        params_.add(p + "ffn.b2", zeros(d), true);
    }
    params_.add("final_ln.gamma", ones(d), false);
    params_.add("final_ln.beta", zeros(d), false);

    for (std::size_t k = 0; k < schema_.size(); ++k) {
        const auto& a = schema_[k];
        const auto prefix = attr_prefix(k);
        params_.add(prefix + "dec.weight", xavier(d, a.size), true);
        params_.add(prefix + "dec.bias", zeros(a.size), true);
    }
}

template <class T>
void Model<T>::resolve_indices() {
    attr_params_.assign(schema_.size(), {});
    for (std::size_t k = 0; k < schema_.size(); ++k) {
        const auto prefix = attr_prefix(k);
        auto& ap = attr_params_[k];
        if (schema_[k].is_categorical()) {
            ap.table = params_.index_of(prefix + "enc.table");
        } else {
            ap.weight = params_.index_of(prefix + "enc.weight");
            ap.bias = params_.index_of(prefix + "enc.bias");
            ap.special = params_.index_of(prefix + "enc.special");
        }
        ap.dec_weight = params_.index_of(prefix + "dec.weight");
        ap.dec_bias = params_.index_of(prefix + "dec.bias");
    }
    block_params_.assign(config_.num_layers, {});
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
        const auto p = "block." + std::to_string(l) + ".";
        auto& bp = block_params_[l];
        if (config_.use_attention) {
            bp.ln1_g = params_.index_of(p + "ln1.gamma");
            bp.ln1_b = params_.index_of(p + "ln1.beta");
            bp.wq = params_.index_of(p + "attn.wq");
            bp.bq = params_.index_of(p + "attn.bq");
            bp.wk = params_.index_of(p + "attn.wk");
            bp.wv = params_.index_of(p + "attn.wv");
            bp.bv = params_.index_of(p + "attn.bv");
            bp.wo = params_.index_of(p + "attn.wo");
            bp.bo = params_.index_of(p + "attn.bo");
        }
        bp.ln2_g = params_.index_of(p + "ln2.gamma");
        bp.ln2_b = params_.index_of(p + "ln2.beta");
        bp.w1 = params_.index_of(p + "ffn.w1");
        bp.b1 = params_.index_of(p + "ffn.b1");
        bp.w2 = params_.index_of(p + "ffn.w2");
        bp.b2 = params_.index_of(p + "ffn.b2");
    }
    if (config_.use_positional_embedding) pos_table_ = params_.index_of("pos.table");
    if (config_.use_task_embedding) task_table_ = params_.index_of("task.table");
    final_g_ = params_.index_of("final_ln.gamma");
    final_b_ = params_.index_of("final_ln.beta");
}

template <class T>
std::vector<Var<T>> Model<T>::bind(Tape<T>& tape) const {
    std::vector<Var<T>> vars;
    vars.reserve(params_.size());
    for (const auto& e : params_.entries()) vars.push_back(tape.parameter(e.value));
    return vars;
}

template <class T>
EncodedInputs<T> Model<T>::prepare(const std::vector<const Document*>& inputs,
                                   const std::vector<long>& task_ids) const {
    if (inputs.empty()) throw DataError("model: empty batch");
    EncodedInputs<T> in;
    std::size_t max_len = 0;
    for (const auto* d : inputs) max_len = std::max(max_len, d->size());
    if (config_.use_positional_embedding && max_len > config_.max_elements)
        throw DataError("document longer than model.max_elements");
    in.layout = RowLayout{inputs.size(), max_len, config_.use_task_embedding ? std::size_t{1} : std::size_t{0}};
    const std::size_t rows = inputs.size() * max_len;

    in.attributes.resize(schema_.size());
    for (std::size_t k = 0; k < schema_.size(); ++k) {
        const auto& spec = schema_[k];
        auto& a = in.attributes[k];
        const long C = static_cast<long>(spec.size);
        if (spec.is_categorical()) {
            a.ids.assign(rows, C);  // padding rows are [NULL]
        } else {
            a.values = Tensor<T>(rows, spec.size);
            a.value_weight.assign(rows, T(0));
            a.special.assign(rows, 0);
        }
        for (std::size_t b = 0; b < inputs.size(); ++b) {
            const auto& doc = *inputs[b];
            for (std::size_t i = 0; i < doc.size(); ++i) {
                const auto& el = doc.elements[i];
                if (el.fields.size() != schema_.size()) throw DataError("element does not match schema");
                const auto& v = el[k];
                const std::size_t r = b * max_len + i;
                if (spec.is_categorical()) {
                    if (is_mask(v)) a.ids[r] = C + 1;
                    else if (const auto* c = std::get_if<Categorical>(&v)) {
                        if (c->id < 0 || c->id >= C) throw DataError("categorical id out of range for '" + spec.name + "'");
                        a.ids[r] = c->id;
                    } else if (!is_null(v)) {
                        throw DataError("numerical value in categorical attribute '" + spec.name + "'");
                    }
                } else {
                    if (is_mask(v)) a.special[r] = 1;
                    else if (const auto* n = std::get_if<Numerical>(&v)) {
                        if (n->values.size() != spec.size) throw DataError("wrong vector length for '" + spec.name + "'");
                        a.special[r] = -1;
                        a.value_weight[r] = T(1);
                        for (std::size_t j = 0; j < spec.size; ++j) a.values(r, j) = static_cast<T>(n->values[j]);
                    } else if (!is_null(v)) {
                        throw DataError("categorical value in numerical attribute '" + spec.name + "'");
                    }
                }
            }
        }
    }

    in.positions.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) in.positions[r] = static_cast<long>(r % max_len);

    in.task_ids = task_ids;
    if (config_.use_task_embedding && task_ids.size() != inputs.size())
        throw DataError("task embedding enabled but task ids missing");

    const auto& L = in.layout;
    in.sequence.batch = L.batch;
    in.sequence.seq_len = L.seq_len();
    in.sequence.key_valid.assign(L.batch * L.seq_len(), false);
    for (std::size_t b = 0; b < inputs.size(); ++b) {
        if (L.offset) in.sequence.key_valid[b * L.seq_len()] = true;
        for (std::size_t i = 0; i < inputs[b]->size(); ++i) in.sequence.key_valid[L.row(b, i)] = true;
    }
    return in;
}

template <class T>
Var<T> Model<T>::encode(Tape<T>& tape, const std::vector<Var<T>>& p, const EncodedInputs<T>& in, bool train,
                        Rng& rng) const {
    std::optional<Var<T>> h;
    auto accumulate = [&](Var<T> term) { h = h ? ad::add(*h, term) : term; };
    for (std::size_t k = 0; k < schema_.size(); ++k) {
        const auto& ap = attr_params_[k];
        const auto& a = in.attributes[k];
        if (schema_[k].is_categorical()) {
            accumulate(ad::embedding_lookup(p[ap.table], a.ids));
        } else {
            auto x = tape.constant(a.values);
            auto projected = ad::scale_rows(ad::linear(x, p[ap.weight], p[ap.bias]), a.value_weight);
            accumulate(ad::add(projected, ad::embedding_lookup(p[ap.special], a.special)));
        }
    }
    if (config_.use_positional_embedding) accumulate(ad::embedding_lookup(p[pos_table_], in.positions));

    Var<T> out = *h;
    const auto& L = in.layout;
    if (L.offset) {
        auto queries = ad::embedding_lookup(p[task_table_], in.task_ids);
        auto stacked = ad::concat_rows<T>({out, queries});
        std::vector<long> order;
        order.reserve(L.batch * L.seq_len());
        for (std::size_t b = 0; b < L.batch; ++b) {
            order.push_back(static_cast<long>(L.batch * L.elements + b));
            for (std::size_t i = 0; i < L.elements; ++i) order.push_back(static_cast<long>(b * L.elements + i));
        }
        out = ad::embedding_lookup(stacked, order);
    }
    return ad::dropout(out, config_.dropout, rng, train);
}

template <class T>
Var<T> Model<T>::transform(Tape<T>& tape, const std::vector<Var<T>>& p, Var<T> h, const ad::SequenceLayout& seq,
                           bool train, Rng& rng) const {
    (void)tape;
    for (const auto& bp : block_params_) {
        if (config_.use_attention) {
            auto x = ad::layer_norm<T>(h, p[bp.ln1_g], p[bp.ln1_b]);
            auto q = ad::linear(x, p[bp.wq], p[bp.bq]);
            auto k = ad::matmul(x, p[bp.wk]);
            auto v = ad::linear(x, p[bp.wv], p[bp.bv]);
            auto att = ad::attention(q, k, v, seq, config_.num_heads);
            auto o = ad::linear(att, p[bp.wo], p[bp.bo]);
            h = ad::add(h, ad::dropout(o, config_.dropout, rng, train));
        }
        auto x = ad::layer_norm<T>(h, p[bp.ln2_g], p[bp.ln2_b]);
        auto f = ad::linear(ad::gelu(ad::linear(x, p[bp.w1], p[bp.b1])), p[bp.w2], p[bp.b2]);
        h = ad::add(h, ad::dropout(f, config_.dropout, rng, train));
    }
    return ad::layer_norm<T>(h, p[final_g_], p[final_b_]);
}

template <class T>
Var<T> Model<T>::decode(const std::vector<Var<T>>& p, Var<T> h_dec, std::size_t attribute,
                        const std::vector<long>& rows) const {
    const auto& ap = attr_params_.at(attribute);
    return ad::linear(ad::embedding_lookup(h_dec, rows), p[ap.dec_weight], p[ap.dec_bias]);
}

namespace {

template <class T>
std::vector<long> task_ids_for(std::span<const TaskSpec> tasks, std::size_t n) {
    std::vector<long> ids(n, static_cast<long>(TaskKind::Random));
    for (std::size_t i = 0; i < n && i < tasks.size(); ++i) ids[i] = static_cast<long>(tasks[i].index());
    return ids;
}

}  // namespace

template <class T>
Var<T> Model<T>::loss(Tape<T>& tape, const std::vector<Var<T>>& p, std::span<const Triplet> triplets,
                      std::span<const TaskSpec> tasks, bool train, Rng& rng) const {
    if (triplets.empty()) throw DataError("loss: empty batch");
    std::vector<const Document*> inputs;
    for (const auto& t : triplets) {
        if (t.mask.empty()) throw DataError("loss: empty mask for document '" + t.target.id + "'");
        inputs.push_back(&t.input);
    }
    const auto in = prepare(inputs, task_ids_for<T>(tasks, triplets.size()));
    auto h = transform(tape, p, encode(tape, p, in, train, rng), in.sequence, train, rng);

    std::optional<Var<T>> total;
    for (std::size_t k = 0; k < schema_.size(); ++k) {
        const auto& spec = schema_[k];
        std::vector<long> rows;
        std::vector<int> cat_targets;
        std::vector<T> num_targets;
        for (std::size_t b = 0; b < triplets.size(); ++b) {
            for (const auto& f : triplets[b].mask) {
                if (f.attribute != k) continue;
                rows.push_back(static_cast<long>(in.layout.row(b, f.element)));
                const auto& v = triplets[b].target.elements.at(f.element)[k];
                if (spec.is_categorical()) {
                    cat_targets.push_back(std::get<Categorical>(v).id);
                } else {
                    for (double x : std::get<Numerical>(v).values) num_targets.push_back(static_cast<T>(x));
                }
            }
        }
        if (rows.empty()) continue;
        auto out = decode(p, h, k, rows);
        Var<T> term = spec.is_categorical()
                          ? ad::cross_entropy(out, cat_targets)
                          : ad::mse(out, Tensor<T>(Shape{rows.size(), spec.size}, std::move(num_targets)));
        total = total ? ad::add(*total, term) : term;
    }
    return ad::scale(*total, T(1) / static_cast<T>(triplets.size()));
}

std::size_t argmax_lowest(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return best;
}

template <class T>
typename Model<T>::Prediction Model<T>::predict_batch(std::span<const Document> inputs, std::span<const MaskSet> masks,
                                                      std::optional<TaskSpec> task,
                                                      std::span<const Document> targets) const {
    if (inputs.size() != masks.size()) throw DataError("predict: inputs/masks length mismatch");
    if (!targets.empty() && targets.size() != inputs.size()) throw DataError("predict: targets length mismatch");
    Prediction result;
    result.documents.assign(inputs.begin(), inputs.end());
    if (inputs.empty()) return result;

    for (std::size_t b = 0; b < inputs.size(); ++b) {
        for (const auto& f : masks[b]) {
            if (f.element >= inputs[b].size() || !is_mask(inputs[b].elements[f.element][f.attribute]))
                throw DataError("predict: mask entry is not [MASK] in input '" + inputs[b].id + "'");
        }
        if (mask_of(inputs[b]).size() != masks[b].size())
            throw DataError("predict: input '" + inputs[b].id + "' has [MASK] fields outside the mask");
    }

    std::vector<const Document*> ptrs;
    for (const auto& d : inputs) ptrs.push_back(&d);
    const long task_id = static_cast<long>(task ? task->index() : static_cast<std::size_t>(TaskKind::Random));
    const auto in = prepare(ptrs, std::vector<long>(inputs.size(), task_id));
    Tape<T> tape;
    const auto p = bind(tape);
    Rng unused(0);
    auto h = transform(tape, p, encode(tape, p, in, false, unused), in.sequence, false, unused);

    // TYPE first: its prediction decides applicability of the other heads.
    const std::size_t type_k = schema_.type_index();
    std::vector<std::vector<int>> types(inputs.size());
    {
        std::vector<long> rows;
        std::vector<std::pair<std::size_t, std::size_t>> where;
        for (std::size_t b = 0; b < inputs.size(); ++b) {
            types[b].resize(inputs[b].size(), -1);
            for (std::size_t i = 0; i < inputs[b].size(); ++i) types[b][i] = inputs[b].element_type(schema_, i);
            for (const auto& f : masks[b]) {
                if (f.attribute != type_k) continue;
                rows.push_back(static_cast<long>(in.layout.row(b, f.element)));
                where.emplace_back(b, f.element);
            }
        }
        if (!rows.empty()) {
            auto logits = decode(p, h, type_k, rows).value();
            std::vector<double> row(logits.cols());
            for (std::size_t r = 0; r < rows.size(); ++r) {
                for (std::size_t c = 0; c < row.size(); ++c) row[c] = static_cast<double>(logits(r, c));
                const int id = static_cast<int>(argmax_lowest(row));
                auto [b, e] = where[r];
                types[b][e] = id;
                result.documents[b].elements[e][type_k] = Categorical{id};
            }
        }
    }

    for (std::size_t k = 0; k < schema_.size(); ++k) {
        if (k == type_k) continue;
        const auto& spec = schema_[k];
        std::vector<long> rows;
        std::vector<std::pair<std::size_t, std::size_t>> where;
        for (std::size_t b = 0; b < inputs.size(); ++b) {
            for (const auto& f : masks[b]) {
                if (f.attribute != k) continue;
                const int type = types[b][f.element];
                if (type >= 0 && !spec.applies(type)) {
                    result.documents[b].elements[f.element][k] = Null{};
                    continue;
                }
                rows.push_back(static_cast<long>(in.layout.row(b, f.element)));
                where.emplace_back(b, f.element);
            }
        }
        if (rows.empty()) continue;
        const auto out = decode(p, h, k, rows).value();
        std::vector<double> row(out.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t c = 0; c < row.size(); ++c) row[c] = static_cast<double>(out(r, c));
            auto [b, e] = where[r];
            auto& field = result.documents[b].elements[e][k];
            if (spec.is_categorical()) field = Categorical{static_cast<int>(argmax_lowest(row))};
            else field = Numerical{row};
        }
    }

    if (!targets.empty()) {
        std::vector<Triplet> triplets;
        std::vector<TaskSpec> tasks;
        for (std::size_t b = 0; b < inputs.size(); ++b) {
            if (masks[b].empty()) continue;
            triplets.push_back({inputs[b], targets[b], masks[b]});
            tasks.push_back(task.value_or(TaskSpec{TaskKind::Random}));
        }
        if (!triplets.empty()) {
            Tape<T> loss_tape;
            const auto lp = bind(loss_tape);
            auto l = loss(loss_tape, lp, triplets, tasks, false, unused);
            result.loss_sum = static_cast<double>(l.value().item()) * static_cast<double>(triplets.size());
        }
    }
    return result;
}

template <class T>
Document Model<T>::predict(const Document& input, const MaskSet& mask, std::optional<TaskSpec> task) const {
    if (mask.empty()) {
        if (!mask_of(input).empty()) throw DataError("predict: input has [MASK] fields outside the mask");
        return input;
    }
    return predict_batch(std::span<const Document>(&input, 1), std::span<const MaskSet>(&mask, 1), task)
        .documents.front();
}

// --- Checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'L', 'X', 'D', 'C', 'K', 'P', '1'};

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

void put_f32_le(std::string& out, float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32_le(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(bits);
}

struct RawCheckpoint {
    nlohmann::json header;
    std::string bytes;
    std::size_t payload_offset = 0;
};

RawCheckpoint read_raw(const std::string& path) {
    RawCheckpoint raw;
    raw.bytes = read_file(path);
    const auto* data = reinterpret_cast<const unsigned char*>(raw.bytes.data());
    if (raw.bytes.size() < 16 || std::memcmp(data, kMagic, 8) != 0) throw DataError(path + ": not a checkpoint file");
    const auto header_len = get_u64_le(data + 8);
    if (16 + header_len > raw.bytes.size()) throw DataError(path + ": truncated checkpoint header");
    try {
        raw.header = nlohmann::json::parse(raw.bytes.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": malformed checkpoint header: " + e.what());
    }
    raw.payload_offset = 16 + header_len;
    return raw;
}

}  // namespace

template <class T>
void save_checkpoint(const Model<T>& model, const std::string& path, const nlohmann::json& meta) {
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& e : model.parameters().entries()) {
        tensors.push_back({{"name", e.name}, {"shape", e.value.shape()}, {"offset", offset}});
        offset += e.value.size() * sizeof(float);
    }
    nlohmann::json header{{"format", "flexdoc-checkpoint"},
                          {"version", 1},
                          {"dtype", "float32-le"},
                          {"schema_hash", hex64(model.schema().hash())},
                          {"schema", model.schema().to_json()},
                          {"config", model.config().to_json()},
                          {"tensors", std::move(tensors)},
                          {"payload_bytes", offset},
                          {"meta", meta.is_null() ? nlohmann::json::object() : meta}};
    const std::string header_text = header.dump();
    std::string out(kMagic, kMagic + 8);
    put_u64_le(out, header_text.size());
    out += header_text;
    out.reserve(out.size() + offset);
    for (const auto& e : model.parameters().entries()) {
        for (T x : e.value.storage()) put_f32_le(out, static_cast<float>(x));
    }
    write_file_atomic(path, out);
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
    const auto raw = read_raw(path);
    CheckpointInfo info;
    try {
        info.schema_hash = std::stoull(raw.header.at("schema_hash").get<std::string>(), nullptr, 16);
        info.schema = Schema::from_json(raw.header.at("schema"));
        info.config = ModelConfig::from_json(raw.header.at("config"));
        info.meta = raw.header.value("meta", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": malformed checkpoint header: " + e.what());
    }
    return info;
}

template <class T>
Model<T> load_checkpoint(const std::string& path, const Schema& schema, CheckpointInfo* info_out) {
    const auto raw = read_raw(path);
    auto info = read_checkpoint_info(path);
    if (info.schema_hash != schema.hash())
        throw DataError(path + ": schema hash mismatch (checkpoint " + hex64(info.schema_hash) + ", expected " +
                        hex64(schema.hash()) + ")");
    ParameterStore<T> store;
    const auto* payload = reinterpret_cast<const unsigned char*>(raw.bytes.data()) + raw.payload_offset;
    const std::size_t payload_size = raw.bytes.size() - raw.payload_offset;
    for (const auto& t : raw.header.at("tensors")) {
        const auto shape = t.at("shape").get<Shape>();
        const auto offset = t.at("offset").get<std::size_t>();
        const auto count = Tensor<T>::element_count(shape);
        if (offset + count * sizeof(float) > payload_size) throw DataError(path + ": truncated tensor payload");
        std::vector<T> data(count);
        for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<T>(get_f32_le(payload + offset + 4 * i));
        store.add(t.at("name").get<std::string>(), Tensor<T>(shape, std::move(data)), true);
    }
    if (info_out) *info_out = info;
    return Model<T>(schema, info.config, std::move(store));
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Model<float>;
template class Model<double>;
template void save_checkpoint<float>(const Model<float>&, const std::string&, const nlohmann::json&);
template void save_checkpoint<double>(const Model<double>&, const std::string&, const nlohmann::json&);
template Model<float> load_checkpoint<float>(const std::string&, const Schema&, CheckpointInfo*);
template Model<double> load_checkpoint<double>(const std::string&, const Schema&, CheckpointInfo*);

}  // namespace flexdoc
