// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "neuronlab/model.hpp"
#include "neuronlab/tasks.hpp"
#include "neuronlab/train.hpp"

namespace nlab::testing {

/// Smallest config that covers the synthetic vocabulary.
inline ModelConfig tiny_task_config(std::uint64_t seed = 1) {
    ModelConfig c;
    c.num_layers = 2;
    c.d_model = 16;
    c.d_ff = 32;
    c.num_heads = 2;
    c.vocab_size = 64;
    c.max_seq_len = 32;
    c.seed = seed;
    return c;
}

inline Dataset head(const Dataset& d, std::size_t n) { return Dataset(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(std::min(n, d.size()))); }

inline TrainHyperparams quick_hp(int steps, std::uint64_t seed = 0) {
    TrainHyperparams hp;
    hp.steps = steps;
    hp.batch_size = 8;
    hp.learning_rate = 1e-2;
    hp.optimizer = OptimizerKind::adam;
    hp.seed = seed;
    return hp;
}

}  // namespace nlab::testing
