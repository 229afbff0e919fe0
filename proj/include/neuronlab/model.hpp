// SPDX-License-Identifier: Apache-2.0
#pragma once

// Compact pre-layer-norm decoder-only transformer whose feed-forward blocks
// compute f(h W1) W2 with no biases. Every column of W1 and W2 is a neuron:
// a W1 column j yields the activation scalar f((hW1)_j) per token, and a W2
// column j yields component j of the block output per token.

#include <compare>
#include <functional>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuronlab/autograd.hpp"
#include "neuronlab/tensor.hpp"

namespace nlab {

enum class MatrixTag : std::uint8_t { W1 = 0, W2 = 1 };

std::string_view tag_name(MatrixTag tag) noexcept;
MatrixTag parse_tag(std::string_view name);

struct NeuronId {
    int layer = 0;
    MatrixTag tag = MatrixTag::W1;
    int index = 0;

    auto operator<=>(const NeuronId&) const = default;
};

std::string to_string(const NeuronId& id);

struct ModelConfig {
    int num_layers = 4;
    int d_model = 64;
    int d_ff = 256;
    int num_heads = 4;
    int vocab_size = 256;
    int max_seq_len = 64;
    ag::Activation activation = ag::Activation::gelu;
    std::uint64_t seed = 0;
    /// Restrict the neuron inventory to W1 columns.
    bool w1_only = false;

    /// Throws ConfigError on any violated invariant.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// -- neuron inventory ------------------------------------------------------

std::size_t neurons_per_layer(const ModelConfig& cfg);
std::size_t total_neurons(const ModelConfig& cfg);
/// Every neuron in (layer, tag, index) order.
std::vector<NeuronId> all_neurons(const ModelConfig& cfg);
std::size_t flat_index(const ModelConfig& cfg, const NeuronId& id);
NeuronId neuron_at(const ModelConfig& cfg, std::size_t flat);
/// Throws InputError when `id` is outside the inventory.
void check_neuron(const ModelConfig& cfg, const NeuronId& id);

/// Membership flags over the neuron inventory, laid out per layer and matrix
/// so they can be applied directly as column masks.
class ColumnSet {
public:
    ColumnSet() = default;
    explicit ColumnSet(const ModelConfig& cfg);
    static ColumnSet of(const ModelConfig& cfg, std::span<const NeuronId> ids);
    static ColumnSet everything(const ModelConfig& cfg);

    void insert(const NeuronId& id);
    bool contains(const NeuronId& id) const;
    std::size_t count() const noexcept { return count_; }
    bool empty() const noexcept { return count_ == 0; }
    std::span<const char> w1(int layer) const { return w1_[static_cast<std::size_t>(layer)]; }
    std::span<const char> w2(int layer) const { return w2_[static_cast<std::size_t>(layer)]; }
    bool any_in_layer(int layer) const;
    std::vector<NeuronId> members() const;

private:
    std::vector<std::vector<char>> w1_, w2_;
    std::size_t count_ = 0;
    int d_ff_ = 0, d_model_ = 0;
    bool w1_only_ = false;
};

// -- weights ---------------------------------------------------------------

class ModelState {
public:
    ModelState() = default;
    ModelState(ModelConfig cfg, std::map<std::string, Tensor> params);

    /// Random initialisation drawn from `cfg.seed`.
    static ModelState initialize(const ModelConfig& cfg);

    const ModelConfig& config() const noexcept { return config_; }
    const std::map<std::string, Tensor>& params() const noexcept { return params_; }
    const Tensor& param(const std::string& name) const;
    Tensor& param(const std::string& name);

    static std::string w1_name(int layer);
    static std::string w2_name(int layer);
    const Tensor& w1(int layer) const { return param(w1_name(layer)); }
    const Tensor& w2(int layer) const { return param(w2_name(layer)); }
    Tensor& w1(int layer) { return param(w1_name(layer)); }
    Tensor& w2(int layer) { return param(w2_name(layer)); }

    bool bit_equal(const ModelState& other) const;
    std::size_t parameter_count() const;

private:
    ModelConfig config_;
    std::map<std::string, Tensor> params_;
};

/// Names of every tensor an initialised model owns, in a fixed order.
std::vector<std::string> parameter_names(const ModelConfig& cfg);

// -- forward ---------------------------------------------------------------

struct ForwardOptions {
    /// Neurons clamped to an output of exactly 0 at every token.
    const ColumnSet* deactivated = nullptr;
    /// Skip every feed-forward block (attention-only model).
    bool bypass_ffn = false;
    /// Register weights as tape parameters so backward reports their gradients.
    bool track_params = false;
    /// With track_params, only weights accepted by this filter are registered (empty = all).
    std::function<bool(const std::string&)> track_filter;
    /// Tap activations and block outputs so backward reports d loss / d omega.
    bool tap_neurons = false;
};

struct ForwardGraph {
    ag::Var logits;                    ///< T x vocab
    ag::Var features;                  ///< T x d, final layer-norm output
    std::vector<ag::Var> activations;  ///< per layer, T x d_ff (W1 neuron outputs)
    std::vector<ag::Var> ffn_outputs;  ///< per layer, T x d (W2 neuron outputs)
};

std::string activation_tap(int layer);
std::string ffn_output_tap(int layer);

/// Records one causal forward pass over `tokens` on `tape`.
ForwardGraph build_forward(ag::Tape& tape, const ModelState& model, std::span<const int> tokens,
                           const ForwardOptions& opts = {});

/// Sequences stacked row-wise in one pass; attention never crosses a sequence boundary.
ForwardGraph build_forward_packed(ag::Tape& tape, const ModelState& model,
                                  const std::vector<std::span<const int>>& sequences, const ForwardOptions& opts = {});

struct ForwardTrace {
    Tensor logits;
    Tensor features;
    std::vector<Tensor> activations;
    std::vector<Tensor> ffn_outputs;

    /// Output of `id` at token position `t`.
    double omega(const NeuronId& id, std::size_t t) const;
};

ForwardTrace forward_with_trace(const ModelState& model, std::span<const int> tokens,
                                const ColumnSet* deactivated = nullptr);

/// f(h W1) W2 for one input vector, outside any tape.
std::vector<double> ffn_forward(std::span<const double> h_tilde, const Tensor& w1, const Tensor& w2,
                                ag::Activation act);

/// Mean cross-entropy over rows whose target is >= 0.
double cross_entropy_loss(const Tensor& logits, std::span<const int> targets);

}  // namespace nlab
