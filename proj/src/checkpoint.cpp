#include "lumix/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace lumix::checkpoint {

namespace {

constexpr std::string_view kMagic = "LMX1";

template <class T>
void put(std::string& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <class T>
    T get(const char* what) {
        need(sizeof(T), what);
        T value = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return value;
    }

    std::string_view take(std::size_t n, const char* what) {
        need(n, what);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }
    std::size_t offset() const { return pos_; }

private:
    void need(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) {
            throw CheckpointError(fmt::format("truncated at byte {} while reading {}", pos_, what));
        }
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string serialize(const Checkpoint& ckpt) {
    std::string out(kMagic);
    put<std::uint32_t>(out, kFormatVersion);
    const std::string cfg = config::emit(ckpt.config);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
    out += cfg;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
        for (double v : t.data()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    return out;
}

Checkpoint deserialize(std::string_view bytes) {
    Reader r(bytes);
    if (r.take(4, "magic") != kMagic) throw CheckpointError("not an LMX1 checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kFormatVersion) throw CheckpointError(fmt::format("unsupported format version {}", version));
    Checkpoint ckpt;
    const auto cfg_len = r.get<std::uint32_t>("config length");
    try {
        ckpt.config = config::parse(r.take(cfg_len, "config"));
    } catch (const config::ConfigError& e) {
        throw CheckpointError(std::string("config block: ") + e.what());
    }
    const auto count = r.get<std::uint32_t>("record count");
    std::string previous;
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::string name(r.take(r.get<std::uint32_t>("name length"), "name"));
        if (k > 0 && name <= previous) throw CheckpointError(fmt::format("record '{}' out of order", name));
        const auto rank = r.get<std::uint32_t>("rank");
        if (rank > 8) throw CheckpointError(fmt::format("record '{}' has implausible rank {}", name, rank));
        Shape shape(rank);
        std::uint64_t total = 1;
        for (auto& e : shape) {
            e = r.get<std::uint64_t>("extent");
            total *= e;
            if (total > bytes.size()) throw CheckpointError(fmt::format("record '{}' is larger than the file", name));
        }
        Tensor t(shape);
        for (auto& v : t.data()) v = static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>("values")));
        ckpt.tensors.emplace(name, std::move(t));
        previous = name;
    }
    if (!r.done()) throw CheckpointError(fmt::format("{} trailing bytes", bytes.size() - r.offset()));
    return ckpt;
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    const std::string bytes = serialize(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return deserialize(ss.str());
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

Checkpoint from_model(const diffusion::Model& model, const diffusion::TrainConfig& train) {
    return Checkpoint{{model.config(), train}, model.parameters()};
}

diffusion::Model to_model(const Checkpoint& ckpt) {
    diffusion::Model model(ckpt.config.model);
    auto& params = model.parameters();
    if (params.size() != ckpt.tensors.size()) {
        throw CheckpointError(fmt::format("config expects {} tensors, checkpoint has {}", params.size(),
                                          ckpt.tensors.size()));
    }
    for (auto& [name, t] : params) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) throw CheckpointError("missing tensor '" + name + "'");
        if (it->second.shape() != t.shape()) {
            throw CheckpointError(fmt::format("tensor '{}' has shape {}, expected {}", name,
                                              shape_string(it->second.shape()), shape_string(t.shape())));
        }
        t = it->second;
    }
    return model;
}

}  // namespace lumix::checkpoint
