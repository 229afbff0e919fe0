// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/model.hpp"

#include <cmath>

#include "neuronlab/error.hpp"
#include "neuronlab/rng.hpp"

namespace nlab {

std::string_view tag_name(MatrixTag tag) noexcept { return tag == MatrixTag::W1 ? "W1" : "W2"; }

MatrixTag parse_tag(std::string_view name) {
    if (name == "W1") return MatrixTag::W1;
    if (name == "W2") return MatrixTag::W2;
    throw InputError("unknown matrix tag '" + std::string(name) + "'");
}

std::string to_string(const NeuronId& id) {
    return "(" + std::to_string(id.layer) + "," + std::string(tag_name(id.tag)) + "," + std::to_string(id.index) + ")";
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (num_layers < 1) fail("num_layers must be >= 1");
    if (d_model < 1) fail("d_model must be >= 1");
    if (d_ff < 1) fail("d_ff must be >= 1");
    if (num_heads < 1 || d_model % num_heads != 0) fail("d_model must be divisible by num_heads");
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (max_seq_len < 2) fail("max_seq_len must be >= 2");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"num_layers", c.num_layers},
                       {"d_model", c.d_model},
                       {"d_ff", c.d_ff},
                       {"num_heads", c.num_heads},
                       {"vocab_size", c.vocab_size},
                       {"max_seq_len", c.max_seq_len},
                       {"activation", std::string(ag::activation_name(c.activation))},
                       {"seed", c.seed},
                       {"w1_only", c.w1_only}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.num_layers = j.value("num_layers", d.num_layers);
    c.d_model = j.value("d_model", d.d_model);
    // d_ff follows 4 * d_model unless given explicitly
    c.d_ff = j.value("d_ff", 4 * c.d_model);
    c.num_heads = j.value("num_heads", d.num_heads);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.activation = ag::parse_activation(j.value("activation", std::string(ag::activation_name(d.activation))));
    c.seed = j.value("seed", d.seed);
    c.w1_only = j.value("w1_only", d.w1_only);
}

// -- inventory ---------------------------------------------------------------

std::size_t neurons_per_layer(const ModelConfig& cfg) {
    return static_cast<std::size_t>(cfg.d_ff) + (cfg.w1_only ? 0 : static_cast<std::size_t>(cfg.d_model));
}

std::size_t total_neurons(const ModelConfig& cfg) {
    return neurons_per_layer(cfg) * static_cast<std::size_t>(cfg.num_layers);
}

std::vector<NeuronId> all_neurons(const ModelConfig& cfg) {
    std::vector<NeuronId> out;
    out.reserve(total_neurons(cfg));
    for (std::size_t i = 0; i < total_neurons(cfg); ++i) out.push_back(neuron_at(cfg, i));
    return out;
}

void check_neuron(const ModelConfig& cfg, const NeuronId& id) {
    bool ok = id.layer >= 0 && id.layer < cfg.num_layers && id.index >= 0;
    if (ok) {
        if (id.tag == MatrixTag::W1) {
            ok = id.index < cfg.d_ff;
        } else {
            ok = !cfg.w1_only && id.index < cfg.d_model;
        }
    }
    if (!ok) throw InputError("neuron " + to_string(id) + " is outside the model inventory");
}

std::size_t flat_index(const ModelConfig& cfg, const NeuronId& id) {
    check_neuron(cfg, id);
    std::size_t base = static_cast<std::size_t>(id.layer) * neurons_per_layer(cfg);
    std::size_t off = id.tag == MatrixTag::W1 ? 0 : static_cast<std::size_t>(cfg.d_ff);
    return base + off + static_cast<std::size_t>(id.index);
}

NeuronId neuron_at(const ModelConfig& cfg, std::size_t flat) {
    if (flat >= total_neurons(cfg)) throw InputError("neuron index out of range");
    std::size_t per = neurons_per_layer(cfg);
    int layer = static_cast<int>(flat / per);
    std::size_t r = flat % per;
    if (r < static_cast<std::size_t>(cfg.d_ff)) return {layer, MatrixTag::W1, static_cast<int>(r)};
    return {layer, MatrixTag::W2, static_cast<int>(r - static_cast<std::size_t>(cfg.d_ff))};
}

ColumnSet::ColumnSet(const ModelConfig& cfg) : d_ff_(cfg.d_ff), d_model_(cfg.d_model), w1_only_(cfg.w1_only) {
    w1_.assign(static_cast<std::size_t>(cfg.num_layers), std::vector<char>(static_cast<std::size_t>(cfg.d_ff), 0));
    w2_.assign(static_cast<std::size_t>(cfg.num_layers), std::vector<char>(static_cast<std::size_t>(cfg.d_model), 0));
}

ColumnSet ColumnSet::of(const ModelConfig& cfg, std::span<const NeuronId> ids) {
    ColumnSet s(cfg);
    for (const auto& id : ids) {
        check_neuron(cfg, id);
        s.insert(id);
    }
    return s;
}

ColumnSet ColumnSet::everything(const ModelConfig& cfg) {
    auto ids = all_neurons(cfg);
    return of(cfg, ids);
}

void ColumnSet::insert(const NeuronId& id) {
    auto& row = id.tag == MatrixTag::W1 ? w1_.at(static_cast<std::size_t>(id.layer)) : w2_.at(static_cast<std::size_t>(id.layer));
    char& slot = row.at(static_cast<std::size_t>(id.index));
    if (!slot) {
        slot = 1;
        ++count_;
    }
}

bool ColumnSet::contains(const NeuronId& id) const {
    if (id.layer < 0 || static_cast<std::size_t>(id.layer) >= w1_.size() || id.index < 0) return false;
    const auto& row = id.tag == MatrixTag::W1 ? w1_[static_cast<std::size_t>(id.layer)] : w2_[static_cast<std::size_t>(id.layer)];
    return static_cast<std::size_t>(id.index) < row.size() && row[static_cast<std::size_t>(id.index)];
}

bool ColumnSet::any_in_layer(int layer) const {
    for (char c : w1_.at(static_cast<std::size_t>(layer))) if (c) return true;
    for (char c : w2_.at(static_cast<std::size_t>(layer))) if (c) return true;
    return false;
}

std::vector<NeuronId> ColumnSet::members() const {
    std::vector<NeuronId> out;
    for (std::size_t l = 0; l < w1_.size(); ++l) {
        for (std::size_t j = 0; j < w1_[l].size(); ++j) {
            if (w1_[l][j]) out.push_back({static_cast<int>(l), MatrixTag::W1, static_cast<int>(j)});
        }
        for (std::size_t j = 0; j < w2_[l].size(); ++j) {
            if (w2_[l][j]) out.push_back({static_cast<int>(l), MatrixTag::W2, static_cast<int>(j)});
        }
    }
    return out;
}

// -- weights -----------------------------------------------------------------

namespace {

std::string layer_prefix(int layer) { return "layer" + std::to_string(layer) + "."; }

}  // namespace

std::string ModelState::w1_name(int layer) { return layer_prefix(layer) + "ffn.w1"; }
std::string ModelState::w2_name(int layer) { return layer_prefix(layer) + "ffn.w2"; }

std::vector<std::string> parameter_names(const ModelConfig& cfg) {
    std::vector<std::string> names = {"embed.token", "embed.position"};
    for (int l = 0; l < cfg.num_layers; ++l) {
        auto p = layer_prefix(l);
        for (const char* n : {"ln1.gain", "ln1.bias", "attn.q", "attn.k", "attn.v", "attn.o", "ln2.gain", "ln2.bias",
                              "ffn.w1", "ffn.w2"}) {
            names.push_back(p + n);
        }
    }
    names.insert(names.end(), {"final_ln.gain", "final_ln.bias", "unembed"});
    return names;
}

ModelState::ModelState(ModelConfig cfg, std::map<std::string, Tensor> params)
    : config_(std::move(cfg)), params_(std::move(params)) {
    config_.validate();
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto f = static_cast<std::size_t>(config_.d_ff);
    const auto v = static_cast<std::size_t>(config_.vocab_size);
    const auto t = static_cast<std::size_t>(config_.max_seq_len);
    auto expect = [&](const std::string& name, std::vector<std::size_t> shape) {
        auto it = params_.find(name);
        if (it == params_.end()) throw SchemaError("model is missing tensor '" + name + "'");
        if (it->second.shape() != shape) {
            throw SchemaError("tensor '" + name + "' has shape " + it->second.shape_string());
        }
        it->second.require_finite("load:" + name);
    };
    expect("embed.token", {v, d});
    expect("embed.position", {t, d});
    for (int l = 0; l < config_.num_layers; ++l) {
        auto p = layer_prefix(l);
        for (const char* n : {"ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"}) expect(p + n, {1, d});
        for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.o"}) expect(p + n, {d, d});
        expect(p + "ffn.w1", {d, f});
        expect(p + "ffn.w2", {f, d});
    }
    expect("final_ln.gain", {1, d});
    expect("final_ln.bias", {1, d});
    expect("unembed", {d, v});
    if (params_.size() != parameter_names(config_).size()) throw SchemaError("model has unexpected extra tensors");
}

ModelState ModelState::initialize(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto f = static_cast<std::size_t>(cfg.d_ff);
    const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.num_layers);
    auto gaussian = [&](std::vector<std::size_t> shape, double sd) {
        Tensor t(std::move(shape));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = sd * rng.normal();
        return t;
    };
    std::map<std::string, Tensor> p;
    for (const auto& name : parameter_names(cfg)) {
        if (name == "embed.token") {
            p[name] = gaussian({static_cast<std::size_t>(cfg.vocab_size), d}, 0.3);
        } else if (name == "embed.position") {
            p[name] = gaussian({static_cast<std::size_t>(cfg.max_seq_len), d}, 0.3);
        } else if (name.ends_with(".gain")) {
            p[name] = Tensor({1, d}, 1.0);
        } else if (name.ends_with(".bias")) {
            p[name] = Tensor({1, d}, 0.0);
        } else if (name.ends_with("attn.o")) {
            p[name] = gaussian({d, d}, resid_scale / std::sqrt(static_cast<double>(d)));
        } else if (name.find("attn.") != std::string::npos) {
            p[name] = gaussian({d, d}, 1.0 / std::sqrt(static_cast<double>(d)));
        } else if (name.ends_with("ffn.w1")) {
            p[name] = gaussian({d, f}, 1.0 / std::sqrt(static_cast<double>(d)));
        } else if (name.ends_with("ffn.w2")) {
            p[name] = gaussian({f, d}, resid_scale / std::sqrt(static_cast<double>(f)));
        } else if (name == "unembed") {
            p[name] = gaussian({d, static_cast<std::size_t>(cfg.vocab_size)}, 1.0 / std::sqrt(static_cast<double>(d)));
        }
    }
    return ModelState(cfg, std::move(p));
}

const Tensor& ModelState::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractViolation("no parameter named '" + name + "'");
    return it->second;
}

Tensor& ModelState::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractViolation("no parameter named '" + name + "'");
    return it->second;
}

bool ModelState::bit_equal(const ModelState& other) const {
    if (!(config_ == other.config_) || params_.size() != other.params_.size()) return false;
    for (const auto& [k, v] : params_) {
        auto it = other.params_.find(k);
        if (it == other.params_.end() || !v.bit_equal(it->second)) return false;
    }
    return true;
}

std::size_t ModelState::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) n += v.size();
    return n;
}

// -- forward -----------------------------------------------------------------

std::string activation_tap(int layer) { return "act" + std::to_string(layer); }
std::string ffn_output_tap(int layer) { return "ffn" + std::to_string(layer); }

ForwardGraph build_forward(ag::Tape& tape, const ModelState& model, std::span<const int> tokens,
                           const ForwardOptions& opts) {
    return build_forward_packed(tape, model, {tokens}, opts);
}

ForwardGraph build_forward_packed(ag::Tape& tape, const ModelState& model,
                                  const std::vector<std::span<const int>>& sequences, const ForwardOptions& opts) {
    using namespace ag;
    const ModelConfig& cfg = model.config();
    if (sequences.empty()) throw InputError("forward: no sequences");
    std::vector<int> tokens, positions;
    std::vector<std::size_t> first_col;
    for (const auto& seq : sequences) {
        if (seq.empty()) throw InputError("forward: empty token sequence");
        if (seq.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
            throw InputError("forward: sequence of " + std::to_string(seq.size()) + " tokens exceeds max_seq_len " +
                             std::to_string(cfg.max_seq_len));
        }
        const std::size_t start = tokens.size();
        for (std::size_t i = 0; i < seq.size(); ++i) {
            int t = seq[i];
            if (t < 0 || t >= cfg.vocab_size) throw InputError("forward: token " + std::to_string(t) + " is out of vocabulary");
            tokens.push_back(t);
            positions.push_back(static_cast<int>(i));
            first_col.push_back(start);
        }
    }
    auto leaf = [&](const std::string& name) {
        const Tensor& t = model.param(name);
        bool tracked = opts.track_params && (!opts.track_filter || opts.track_filter(name));
        return tracked ? tape.parameter(name, t) : tape.constant_ref(t);
    };

    ForwardGraph g;
    Var x = add(embedding(leaf("embed.token"), tokens), embedding(leaf("embed.position"), positions));
    const int heads = cfg.num_heads;
    const std::size_t head_dim = static_cast<std::size_t>(cfg.d_model / heads);
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    for (int l = 0; l < cfg.num_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Var a = layer_norm(x, leaf(p + "ln1.gain"), leaf(p + "ln1.bias"));
        Var q = matmul(a, leaf(p + "attn.q"));
        Var k = matmul(a, leaf(p + "attn.k"));
        Var v = matmul(a, leaf(p + "attn.v"));
        std::vector<Var> head_out;
        head_out.reserve(static_cast<std::size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            std::size_t off = static_cast<std::size_t>(h) * head_dim;
            Var qh = slice_cols(q, off, head_dim);
            Var kh = slice_cols(k, off, head_dim);
            Var vh = slice_cols(v, off, head_dim);
            Var att = softmax_segments(scale(matmul(qh, transpose(kh)), att_scale), first_col);
            head_out.push_back(matmul(att, vh));
        }
        Var attn = heads == 1 ? head_out[0] : concat_cols(head_out);
        x = add(x, matmul(attn, leaf(p + "attn.o")));

        if (opts.bypass_ffn) continue;
        Var h_tilde = layer_norm(x, leaf(p + "ln2.gain"), leaf(p + "ln2.bias"));
        Var act = activation(matmul(h_tilde, leaf(p + "ffn.w1")), cfg.activation);
        if (opts.deactivated) act = zero_cols(act, opts.deactivated->w1(l));
        Var out = matmul(act, leaf(p + "ffn.w2"));
        if (opts.deactivated && !cfg.w1_only) out = zero_cols(out, opts.deactivated->w2(l));
        if (opts.tap_neurons) {
            tape.tap(act, activation_tap(l));
            tape.tap(out, ffn_output_tap(l));
        }
        g.activations.push_back(act);
        g.ffn_outputs.push_back(out);
        x = add(x, out);
    }
    g.features = layer_norm(x, leaf("final_ln.gain"), leaf("final_ln.bias"));
    g.logits = matmul(g.features, leaf("unembed"));
    return g;
}

double ForwardTrace::omega(const NeuronId& id, std::size_t t) const {
    const auto& src = id.tag == MatrixTag::W1 ? activations : ffn_outputs;
    const Tensor& m = src.at(static_cast<std::size_t>(id.layer));
    if (t >= m.rows() || id.index < 0 || static_cast<std::size_t>(id.index) >= m.cols()) {
        throw InputError("omega: coordinate out of range");
    }
    return m.at(t, static_cast<std::size_t>(id.index));
}

ForwardTrace forward_with_trace(const ModelState& model, std::span<const int> tokens, const ColumnSet* deactivated) {
    ag::Tape tape;
    ForwardOptions opts;
    opts.deactivated = deactivated;
    auto g = build_forward(tape, model, tokens, opts);
    ForwardTrace tr;
    tr.logits = g.logits.value();
    tr.features = g.features.value();
    for (auto& v : g.activations) tr.activations.push_back(v.value());
    for (auto& v : g.ffn_outputs) tr.ffn_outputs.push_back(v.value());
    return tr;
}

std::vector<double> ffn_forward(std::span<const double> h_tilde, const Tensor& w1, const Tensor& w2, ag::Activation act) {
    if (w1.rank() != 2 || w2.rank() != 2 || h_tilde.size() != w1.rows() || w1.cols() != w2.rows()) {
        throw ContractViolation("ffn_forward: shapes do not chain (h " + std::to_string(h_tilde.size()) + ", W1 " +
                                w1.shape_string() + ", W2 " + w2.shape_string() + ")");
    }
    std::vector<double> hidden(w1.cols(), 0.0);
    for (std::size_t j = 0; j < w1.cols(); ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < w1.rows(); ++i) s += h_tilde[i] * w1.at(i, j);
        hidden[j] = ag::activate(act, s);
    }
    std::vector<double> out(w2.cols(), 0.0);
    for (std::size_t j = 0; j < w2.cols(); ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < w2.rows(); ++i) s += hidden[i] * w2.at(i, j);
        out[j] = s;
    }
    return out;
}

double cross_entropy_loss(const Tensor& logits, std::span<const int> targets) {
    ag::Tape tape;
    return ag::cross_entropy(tape.constant_ref(logits), targets).value().item();
}

}  // namespace nlab
