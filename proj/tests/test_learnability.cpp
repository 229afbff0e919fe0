// SPDX-License-Identifier: Apache-2.0
// Calibration gate: every synthetic suite is learnable by the desk-scale model
// within the experiment step budget. Pretrains (or reuses) the base checkpoint.
#include <doctest.h>

#include <iostream>

#include "neuronlab/experiment.hpp"

using namespace nlab;

TEST_CASE("each suite is learnable by full fine-tuning from the base model") {
    auto cfg = ExperimentConfig::defaults();
    cfg.pretrain.checkpoint = "learnability_base.ckpt";
    const ModelState base = ensure_base_model(cfg);
    auto hp = cfg.hyperparams;
    hp.seed = 1;
    for (const auto& task : cfg.tasks) {
        auto td = experiment_data(cfg, task, 1);
        auto tuned = train(base, td.train, TrainableSet::everything(), hp).model;
        double metric = evaluate_task(tuned, td.test, td.spec.kind(), {nullptr, cfg.max_new_tokens});
        std::cout << task << " " << metric << "\n";
        CAPTURE(task);
        if (td.spec.kind() == TaskKind::classification) {
            CHECK(metric >= 0.9);
        } else {
            CHECK(metric >= 0.7);
        }
    }
}
