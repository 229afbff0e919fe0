// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "neuronlab/error.hpp"

namespace nlab {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'N', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw SchemaError("checkpoint truncated");
    return v;
}

}  // namespace

void save_checkpoint(const ModelState& model, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FileError("cannot write checkpoint " + path.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kVersion);
    std::string cfg = nlohmann::json(model.config()).dump();
    put<std::uint64_t>(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    put<std::uint64_t>(os, model.params().size());
    for (const auto& [name, t] : model.params()) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) put<std::uint64_t>(os, e);
        os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw FileError("failed writing checkpoint " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FileError("cannot open checkpoint " + path.string());
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw SchemaError(path.string() + " is not a checkpoint");
    if (get<std::uint32_t>(is) != kVersion) throw SchemaError("unsupported checkpoint version");
    auto cfg_len = get<std::uint64_t>(is);
    if (cfg_len > (1u << 20)) throw SchemaError("checkpoint config block too large");
    std::string cfg_text(cfg_len, '\0');
    is.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
    if (!is) throw SchemaError("checkpoint truncated");
    ModelConfig cfg;
    try {
        cfg = nlohmann::json::parse(cfg_text).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("checkpoint config: ") + e.what());
    }
    auto count = get<std::uint64_t>(is);
    std::map<std::string, Tensor> params;
    for (std::uint64_t i = 0; i < count; ++i) {
        auto name_len = get<std::uint32_t>(is);
        if (name_len > 4096) throw SchemaError("checkpoint tensor name too long");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        auto rank = get<std::uint32_t>(is);
        if (rank > 2) throw SchemaError("checkpoint tensor rank > 2");
        std::vector<std::size_t> shape(rank);
        std::size_t n = 1;
        for (auto& e : shape) {
            e = get<std::uint64_t>(is);
            if (e == 0 || e > (1u << 28)) throw SchemaError("checkpoint tensor extent invalid");
            n *= e;
        }
        std::vector<double> data(n);
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!is) throw SchemaError("checkpoint truncated in tensor '" + name + "'");
        params.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return ModelState(cfg, std::move(params));
}

}  // namespace nlab
