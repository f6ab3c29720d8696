#include "mole/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace mole {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'L', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void put_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void put_bytes(std::ofstream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void put_doubles(std::ofstream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::uint32_t get_u32(std::ifstream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw IoError("checkpoint truncated");
    return v;
}
std::uint64_t get_u64(std::ifstream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw IoError("checkpoint truncated");
    return v;
}
std::string get_bytes(std::ifstream& in) {
    const auto n = get_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw IoError("checkpoint truncated");
    return s;
}
std::vector<double> get_doubles(std::ifstream& in, std::size_t n) {
    std::vector<double> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw IoError("checkpoint truncated");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write(kMagic, sizeof(kMagic));
    put_u32(out, kVersion);
    put_u64(out, ckpt.step);
    put_u64(out, ckpt.rng_state);
    put_bytes(out, ckpt.config.serialize());
    put_u32(out, static_cast<std::uint32_t>(ckpt.param_values.size()));
    for (std::size_t i = 0; i < ckpt.param_values.size(); ++i) {
        put_bytes(out, ckpt.param_names[i]);
        const Tensor& t = ckpt.param_values[i];
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) put_u32(out, static_cast<std::uint32_t>(t.dim(d)));
        put_doubles(out, t.values());
    }
    put_u32(out, ckpt.has_optimizer ? 1 : 0);
    if (ckpt.has_optimizer) {
        put_u64(out, static_cast<std::uint64_t>(ckpt.optimizer.t));
        for (std::size_t i = 0; i < ckpt.param_values.size(); ++i) {
            put_doubles(out, ckpt.optimizer.m[i]);
            put_doubles(out, ckpt.optimizer.v[i]);
        }
    }
    if (!out) throw IoError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError("not a checkpoint file: " + path);
    }
    const auto version = get_u32(in);
    if (version != kVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.step = get_u64(in);
    ckpt.rng_state = get_u64(in);
    ckpt.config = ModelConfig::parse(get_bytes(in));
    const auto n_params = get_u32(in);
    for (std::uint32_t i = 0; i < n_params; ++i) {
        ckpt.param_names.push_back(get_bytes(in));
        const auto rank = get_u32(in);
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(get_u32(in)));
        auto values = get_doubles(in, static_cast<std::size_t>(numel(shape)));
        ckpt.param_values.emplace_back(shape, std::move(values));
    }
    ckpt.has_optimizer = get_u32(in) != 0;
    if (ckpt.has_optimizer) {
        ckpt.optimizer.t = static_cast<std::int64_t>(get_u64(in));
        for (std::uint32_t i = 0; i < n_params; ++i) {
            const auto n = static_cast<std::size_t>(ckpt.param_values[i].size());
            ckpt.optimizer.m.push_back(get_doubles(in, n));
            ckpt.optimizer.v.push_back(get_doubles(in, n));
        }
    }
    return ckpt;
}

Checkpoint snapshot_model(Model& model, std::uint64_t step, std::uint64_t rng_state) {
    Checkpoint ckpt;
    ckpt.config = model.config;
    ckpt.step = step;
    ckpt.rng_state = rng_state;
    for (auto& p : named_params(model)) {
        ckpt.param_names.push_back(p.name);
        ckpt.param_values.emplace_back(p.tensor.shape(), p.tensor.values());
    }
    return ckpt;
}

Model restore_model(const Checkpoint& ckpt) {
    Model model = build_model(ckpt.config);
    auto params = named_params(model);
    if (params.size() != ckpt.param_values.size()) {
        throw ConfigError("checkpoint parameter count does not match its config");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].name != ckpt.param_names[i]) {
            throw ConfigError("checkpoint parameter '" + ckpt.param_names[i] +
                              "' does not match model parameter '" + params[i].name + "'");
        }
        if (params[i].tensor.shape() != ckpt.param_values[i].shape()) {
            throw ConfigError("checkpoint parameter '" + ckpt.param_names[i] + "' has shape " +
                              shape_str(ckpt.param_values[i].shape()) + ", model expects " +
                              shape_str(params[i].tensor.shape()));
        }
        params[i].tensor.values() = ckpt.param_values[i].values();
    }
    return model;
}

Model restore_model(const Checkpoint& ckpt, const ModelConfig& expected) {
    if (ckpt.config.serialize() != expected.serialize()) {
        throw ConfigError("checkpoint config does not match the expected config");
    }
    return restore_model(ckpt);
}

}  // namespace mole
