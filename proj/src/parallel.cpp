// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/parallel.hpp"

#include <cstdlib>
#include <string>

namespace nlab {

std::size_t worker_count() {
    static const std::size_t count = [] {
        if (const char* env = std::getenv("NLAB_THREADS")) {
            try {
                long v = std::stol(env);
                if (v >= 1) return static_cast<std::size_t>(v);
            } catch (...) {
            }
        }
        unsigned hw = std::thread::hardware_concurrency();
        return static_cast<std::size_t>(hw == 0 ? 1 : hw);
    }();
    return count;
}

}  // namespace nlab
