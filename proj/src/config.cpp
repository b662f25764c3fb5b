#include "lumix/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include <fmt/format.h>

namespace lumix::config {

namespace {

struct Field {
    const char* key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T>
T number(const std::string& text) {
    T value{};
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) throw std::invalid_argument("'" + text + "' is not a valid number");
    return value;
}

bool boolean(const std::string& text) {
    if (text == "true") return true;
    if (text == "false") return false;
    throw std::invalid_argument("'" + text + "' is not true or false");
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<scenes::Property> property_list(const std::string& text) {
    std::vector<scenes::Property> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(scenes::parse_property(trim(item)));
    return out;
}

std::string property_text(const std::vector<scenes::Property>& ps) {
    std::string out;
    for (std::size_t i = 0; i < ps.size(); ++i) out += (i ? "," : "") + scenes::to_string(ps[i]);
    return out;
}

#define SIZE_FIELD(key, member)                                                       \
    Field {                                                                           \
        key, [](RunConfig& c, const std::string& v) { c.member = number<std::size_t>(v); }, \
            [](const RunConfig& c) { return fmt::format("{}", c.member); }            \
    }
#define DOUBLE_FIELD(key, member)                                                \
    Field {                                                                      \
        key, [](RunConfig& c, const std::string& v) { c.member = number<double>(v); }, \
            [](const RunConfig& c) { return fmt::format("{}", c.member); }       \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table{
        SIZE_FIELD("image_size", model.image_size),
        SIZE_FIELD("patch_size", model.patch_size),
        SIZE_FIELD("d", model.d),
        SIZE_FIELD("heads", model.heads),
        SIZE_FIELD("depth", model.depth),
        SIZE_FIELD("mlp_ratio", model.mlp_ratio),
        Field{"properties", [](RunConfig& c, const std::string& v) { c.model.properties = property_list(v); },
              [](const RunConfig& c) { return property_text(c.model.properties); }},
        Field{"attention", [](RunConfig& c, const std::string& v) { c.model.attention = attention::parse_variant(v); },
              [](const RunConfig& c) { return attention::to_string(c.model.attention); }},
        Field{"lora", [](RunConfig& c, const std::string& v) { c.model.lora.kind = lora::parse_kind(v); },
              [](const RunConfig& c) { return lora::to_string(c.model.lora.kind); }},
        SIZE_FIELD("rank", model.lora.rank),
        SIZE_FIELD("rank2", model.lora.rank2),
        Field{"adapters", [](RunConfig& c, const std::string& v) { c.model.adapters = boolean(v); },
              [](const RunConfig& c) { return std::string(c.model.adapters ? "true" : "false"); }},
        Field{"regime", [](RunConfig& c, const std::string& v) { c.model.regime = diffusion::parse_regime(v); },
              [](const RunConfig& c) { return diffusion::to_string(c.model.regime); }},
        Field{"property_embedding", [](RunConfig& c, const std::string& v) { c.model.property_embedding = boolean(v); },
              [](const RunConfig& c) { return std::string(c.model.property_embedding ? "true" : "false"); }},
        DOUBLE_FIELD("max_depth", model.max_depth),
        SIZE_FIELD("steps", train.steps),
        SIZE_FIELD("batch", train.batch),
        DOUBLE_FIELD("lr", train.lr),
        Field{"lr_schedule", [](RunConfig& c, const std::string& v) { c.train.lr_schedule = diffusion::parse_schedule(v); },
              [](const RunConfig& c) { return diffusion::to_string(c.train.lr_schedule); }},
        DOUBLE_FIELD("beta1", train.beta1),
        DOUBLE_FIELD("beta2", train.beta2),
        DOUBLE_FIELD("eps", train.eps),
        DOUBLE_FIELD("descriptor_dropout", train.descriptor_dropout),
        Field{"seed", [](RunConfig& c, const std::string& v) { c.train.seed = number<std::uint64_t>(v); },
              [](const RunConfig& c) { return fmt::format("{}", c.train.seed); }},
    };
    return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD

}  // namespace

RunConfig parse(std::string_view text) {
    RunConfig cfg;
    std::set<std::string> seen;
    bool rank2_given = false;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError(fmt::format("line {}: expected key = value", line_no));
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        const auto& table = fields();
        auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
        if (it == table.end()) throw ConfigError(fmt::format("line {}: unknown key '{}'", line_no, key));
        if (!seen.insert(key).second) throw ConfigError(fmt::format("line {}: key '{}' repeated", line_no, key));
        try {
            it->set(cfg, value);
        } catch (const std::exception& e) {
            throw ConfigError(fmt::format("line {}: {}: {}", line_no, key, e.what()));
        }
        rank2_given |= key == "rank2";
    }
    auto& lv = cfg.model.lora;
    if (lv.kind == lora::Kind::Separate || lv.kind == lora::Kind::Fused) {
        lv.rank2 = lv.rank;
    } else if (lv.kind == lora::Kind::Hybrid && !rank2_given) {
        lv = lora::Variant::hybrid(lv.rank);
    }
    try {
        cfg.model.validate();
        cfg.train.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("invalid configuration: ") + e.what());
    }
    return cfg;
}

RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string emit(const RunConfig& config) {
    std::string out;
    for (const auto& f : fields()) out += fmt::format("{} = {}\n", f.key, f.get(config));
    return out;
}

}  // namespace lumix::config
