#include "lumix/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

namespace lumix::diffusion {

namespace {

using scenes::Property;

// Descriptor tables. Row 0 of every table is the null entry.
constexpr std::size_t kCountRows = 5;    // null, 1..4 objects
constexpr std::size_t kShapeRows = 4;    // null, sphere, box, absent
constexpr std::size_t kPaletteRows = 17;
constexpr std::size_t kLightRows = 9;
constexpr std::size_t kAmbientRows = 4;

const std::string kPropertyEmbedding = "embed/property";

std::string block_name(std::size_t i, const std::string& leaf) { return fmt::format("block{}/{}", i, leaf); }

lora::Dims adapter_dims(const DiTConfig& c) { return lora::Dims::square(c.m(), c.d); }

struct DescriptorRows {
    std::size_t count, shapes[4], palette, light, ambient;
};

DescriptorRows rows_for(const Condition& c) {
    if (!c) return {0, {0, 0, 0, 0}, 0, 0, 0};
    const auto& d = *c;
    DescriptorRows r{static_cast<std::size_t>(d.object_count), {}, static_cast<std::size_t>(d.palette) + 1,
                     static_cast<std::size_t>(d.light_bucket) + 1, static_cast<std::size_t>(d.ambient) + 1};
    for (int s = 0; s < 4; ++s)
        r.shapes[s] = s < d.object_count ? static_cast<std::size_t>(d.shapes[static_cast<std::size_t>(s)]) + 1 : 3;
    return r;
}

const Var& lookup(const Bindings& p, const std::string& name) {
    auto it = p.find(name);
    if (it == p.end()) throw std::out_of_range("model has no parameter '" + name + "'");
    return it->second;
}

double xavier_bound(const Shape& s) { return std::sqrt(6.0 / static_cast<double>(s[0] + s[1])); }

bool is_zero_init(const std::string& name) {
    const auto leaf = name.substr(name.rfind('/') + 1);
    return name.ends_with("_b") || name.ends_with("/b") || name.ends_with("b1") || name.ends_with("b2") ||
           leaf == "ada_w" || name.starts_with("final/");
}

}  // namespace

std::string to_string(Regime r) { return r == Regime::TwoPhase ? "two_phase" : "from_scratch_joint"; }

Regime parse_regime(const std::string& text) {
    if (text == "from_scratch_joint") return Regime::FromScratchJoint;
    if (text == "two_phase") return Regime::TwoPhase;
    throw std::invalid_argument("unknown regime '" + text + "' (expected from_scratch_joint or two_phase)");
}

std::string to_string(Schedule s) { return s == Schedule::Cosine ? "cosine" : "constant"; }

Schedule parse_schedule(const std::string& text) {
    if (text == "constant") return Schedule::Constant;
    if (text == "cosine") return Schedule::Cosine;
    throw std::invalid_argument("unknown lr schedule '" + text + "' (expected constant or cosine)");
}

std::size_t DiTConfig::color_index() const {
    auto it = std::find(properties.begin(), properties.end(), Property::Color);
    return it == properties.end() ? 0 : static_cast<std::size_t>(it - properties.begin());
}

attention::Config DiTConfig::attention_config() const { return {d, heads, m(), color_index(), attention}; }

void DiTConfig::validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        throw std::invalid_argument(
            fmt::format("image_size {} is not a positive multiple of patch_size {}", image_size, patch_size));
    }
    if (d == 0 || d % 4 != 0) throw std::invalid_argument(fmt::format("d={} must be a positive multiple of 4", d));
    if (depth == 0 || mlp_ratio == 0) throw std::invalid_argument("depth and mlp_ratio must be positive");
    if (properties.empty()) throw std::invalid_argument("at least one property is required");
    for (std::size_t i = 0; i < properties.size(); ++i)
        for (std::size_t j = i + 1; j < properties.size(); ++j)
            if (properties[i] == properties[j]) {
                throw std::invalid_argument("property '" + scenes::to_string(properties[i]) + "' listed twice");
            }
    if (max_depth <= 0.0) throw std::invalid_argument("max_depth must be positive");
    if (regime == Regime::TwoPhase && !adapters) throw std::invalid_argument("two_phase trains adapters only; enable them");
    lora.validate();
    attention_config().validate();
}

void TrainConfig::validate() const {
    if (steps == 0 || batch == 0) throw std::invalid_argument("steps and batch must be positive");
    if (!(lr > 0.0) || !(eps > 0.0)) throw std::invalid_argument("lr and eps must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw std::invalid_argument("betas must be in [0, 1)");
    if (descriptor_dropout < 0.0 || descriptor_dropout > 1.0) {
        throw std::invalid_argument("descriptor_dropout must be in [0, 1]");
    }
}

double TrainConfig::lr_at(std::size_t step) const {
    if (lr_schedule == Schedule::Constant) return lr;
    const double frac = static_cast<double>(step) / static_cast<double>(steps);
    return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

std::vector<std::pair<std::string, Shape>> parameter_shapes(const DiTConfig& c) {
    c.validate();
    const std::size_t d = c.d, hidden = c.mlp_ratio * d, pd = c.patch_dim();
    std::map<std::string, Shape> out{
        {"embed/patch_w", {pd, d}},       {"embed/patch_b", {d}},
        {"time/w1", {d, d}},              {"time/b1", {d}},
        {"time/w2", {d, d}},              {"time/b2", {d}},
        {"cond/count", {kCountRows, d}},  {"cond/palette", {kPaletteRows, d}},
        {"cond/light", {kLightRows, d}},  {"cond/ambient", {kAmbientRows, d}},
        {"final/ada_w", {d, 2 * d}},      {"final/ada_b", {2 * d}},
        {"final/w", {d, pd}},             {"final/b", {pd}},
    };
    for (int s = 0; s < 4; ++s) out.emplace(fmt::format("cond/shape{}", s), Shape{kShapeRows, d});
    if (c.uses_property_embedding()) out.emplace(kPropertyEmbedding, Shape{c.m(), d});
    for (std::size_t i = 0; i < c.depth; ++i) {
        out.emplace(block_name(i, "ada_w"), Shape{d, 6 * d});
        out.emplace(block_name(i, "ada_b"), Shape{6 * d});
        for (const char* w : {"wq", "wk", "wv", "wo"}) out.emplace(block_name(i, fmt::format("attn/{}", w)), Shape{d, d});
        if (c.adapters)
            for (const char* proj : {"k", "v"})
                for (const auto& [name, shape] : lora::factor_shapes(c.lora, adapter_dims(c)))
                    out.emplace(block_name(i, fmt::format("attn/lora_{}/{}", proj, name)), shape);
        out.emplace(block_name(i, "mlp_w1"), Shape{d, hidden});
        out.emplace(block_name(i, "mlp_b1"), Shape{hidden});
        out.emplace(block_name(i, "mlp_w2"), Shape{hidden, d});
        out.emplace(block_name(i, "mlp_b2"), Shape{d});
    }
    return {out.begin(), out.end()};
}

Model::Model(DiTConfig config) : config_(std::move(config)) {
    for (auto& [name, shape] : parameter_shapes(config_)) params_.emplace(name, Tensor(shape));
}

Model Model::initialized(const DiTConfig& config, Rng& rng) {
    Model model(config);
    const Rng root = rng.split("init");
    // Adapters: one initialization per projection so the update starts at exactly zero.
    for (std::size_t i = 0; i < config.depth && config.adapters; ++i)
        for (const char* proj : {"k", "v"}) {
            Rng ar = root.split(block_name(i, fmt::format("attn/lora_{}", proj)));
            const auto adapter = lora::Adapter::initialized(config.lora, adapter_dims(config), ar);
            for (const auto& [name, t] : adapter.factors)
                model.params_.at(block_name(i, fmt::format("attn/lora_{}/{}", proj, name))) = t;
        }
    for (auto& [name, t] : model.params_) {
        if (model.is_adapter(name) || is_zero_init(name)) continue;
        Rng r = root.split(name);
        if (name.starts_with("cond/") || name.starts_with("time/") || name == kPropertyEmbedding) {
            for (auto& v : t.data()) v = 0.02 * r.normal();
        } else {
            const double bound = xavier_bound(t.shape());
            for (auto& v : t.data()) v = r.uniform(-bound, bound);
        }
    }
    return model;
}

bool Model::is_adapter(const std::string& name) const { return name.find("/lora_") != std::string::npos; }

bool Model::trainable(const std::string& name) const {
    return config_.regime == Regime::FromScratchJoint || is_adapter(name);
}

Bindings Model::bind(Tape& tape, bool train) const {
    Bindings out;
    for (const auto& [name, t] : params_)
        out.emplace(name, train && trainable(name) ? tape.leaf(t) : tape.constant(t));
    return out;
}

Var Model::velocity(const Bindings& p, Var z, std::span<const double> t, std::span<const Condition> conditions) const {
    const DiTConfig& c = config_;
    const std::size_t G = conditions.size(), M = c.m(), S = G * M, d = c.d;
    const Shape& zs = z.shape();
    if (G == 0 || zs.size() != 3 || zs[0] != S || zs[1] != c.tokens() || zs[2] != c.patch_dim()) {
        throw ShapeError(fmt::format("velocity: latent {} is not [{} x {} x {}]", shape_string(zs), S, c.tokens(),
                                     c.patch_dim()));
    }
    if (t.size() != S) throw ShapeError(fmt::format("velocity: {} timesteps for {} slices", t.size(), S));
    Tape& tape = *z.tape;
    auto P = [&](const std::string& name) { return lookup(p, name); };

    Var x = ad::linear(z, P("embed/patch_w"), P("embed/patch_b"));
    x = ad::add_suffix(x, tape.constant(position_table(c.grid(), d)));
    if (c.uses_property_embedding()) x = ad::add_slices(x, ad::tile_rows(P(kPropertyEmbedding), G));

    Var temb = ad::linear(tape.constant(timestep_features(t, d)), P("time/w1"), P("time/b1"));
    temb = ad::linear(ad::silu(temb), P("time/w2"), P("time/b2"));

    std::vector<DescriptorRows> rows;
    for (const auto& cond : conditions) rows.push_back(rows_for(cond));
    auto gather = [&](const std::string& table, auto field) {
        std::vector<std::size_t> idx;
        for (const auto& r : rows) idx.push_back(field(r));
        return ad::gather_rows(P(table), idx);
    };
    Var desc = gather("cond/count", [](const DescriptorRows& r) { return r.count; });
    for (std::size_t s = 0; s < 4; ++s)
        desc = ad::add(desc, gather(fmt::format("cond/shape{}", s), [s](const DescriptorRows& r) { return r.shapes[s]; }));
    desc = ad::add(desc, gather("cond/palette", [](const DescriptorRows& r) { return r.palette; }));
    desc = ad::add(desc, gather("cond/light", [](const DescriptorRows& r) { return r.light; }));
    desc = ad::add(desc, gather("cond/ambient", [](const DescriptorRows& r) { return r.ambient; }));
    const Var cond = ad::silu(ad::add(temb, ad::repeat_rows(desc, M)));

    const attention::Config acfg = c.attention_config();
    for (std::size_t i = 0; i < c.depth; ++i) {
        auto B = [&](const std::string& leaf) { return P(block_name(i, leaf)); };
        const Var mod = ad::linear(cond, B("ada_w"), B("ada_b"));
        auto chunk = [&](std::size_t k) { return ad::columns(mod, k * d, d); };

        attention::BlockVars bv{B("attn/wq"), B("attn/wk"), B("attn/wv"), B("attn/wo"), std::nullopt, std::nullopt,
                                std::nullopt};
        for (auto [slot, proj] : {std::pair{&bv.lora_k, "k"}, std::pair{&bv.lora_v, "v"}}) {
            if (!c.adapters) break;
            attention::LoraVars lv{c.lora, {}};
            for (const auto& [name, shape] : lora::factor_shapes(c.lora, adapter_dims(c)))
                lv.factors.emplace(name, B(fmt::format("attn/lora_{}/{}", proj, name)));
            *slot = std::move(lv);
        }
        const Var h = attention::forward(acfg, bv, ad::modulate(ad::layer_norm(x), chunk(0), chunk(1)));
        x = ad::gated_add(x, h, chunk(2));

        Var f = ad::linear(ad::modulate(ad::layer_norm(x), chunk(3), chunk(4)), B("mlp_w1"), B("mlp_b1"));
        f = ad::linear(ad::gelu(f), B("mlp_w2"), B("mlp_b2"));
        x = ad::gated_add(x, f, chunk(5));
    }

    const Var fmod = ad::linear(cond, P("final/ada_w"), P("final/ada_b"));
    x = ad::modulate(ad::layer_norm(x), ad::columns(fmod, 0, d), ad::columns(fmod, d, d));
    return ad::linear(x, P("final/w"), P("final/b"));
}

Tensor Model::velocity(const Tensor& z, std::span<const double> t, std::span<const Condition> conditions) const {
    Tape tape;
    const auto p = bind(tape, false);
    return velocity(p, tape.constant(z), t, conditions).value();
}

Tensor patchify(const Tensor& image, std::size_t patch) {
    if (image.rank() != 3 || image.extent(0) != image.extent(1) || patch == 0 || image.extent(0) % patch != 0) {
        throw ShapeError(fmt::format("patchify: {} is not a square image divisible by patch {}",
                                     shape_string(image.shape()), patch));
    }
    const std::size_t S = image.extent(0), C = image.extent(2), g = S / patch;
    Tensor out({g * g, patch * patch * C});
    std::size_t k = 0;
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx)
            for (std::size_t py = 0; py < patch; ++py)
                for (std::size_t px = 0; px < patch; ++px)
                    for (std::size_t ch = 0; ch < C; ++ch)
                        out[k++] = image[((gy * patch + py) * S + gx * patch + px) * C + ch];
    return out;
}

Tensor unpatchify(const Tensor& tokens, std::size_t image_size, std::size_t patch, std::size_t channels) {
    const std::size_t g = patch == 0 ? 0 : image_size / patch;
    if (patch == 0 || image_size % patch != 0 || tokens.rank() != 2 || tokens.extent(0) != g * g ||
        tokens.extent(1) != patch * patch * channels) {
        throw ShapeError(fmt::format("unpatchify: tokens {} do not form a {}x{}x{} image with patch {}",
                                     shape_string(tokens.shape()), image_size, image_size, channels, patch));
    }
    Tensor out({image_size, image_size, channels});
    std::size_t k = 0;
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx)
            for (std::size_t py = 0; py < patch; ++py)
                for (std::size_t px = 0; px < patch; ++px)
                    for (std::size_t ch = 0; ch < channels; ++ch)
                        out[((gy * patch + py) * image_size + gx * patch + px) * channels + ch] = tokens[k++];
    return out;
}

Tensor encode_property(const DiTConfig& config, Property p, const Tensor& image) {
    if (image.rank() != 3 || image.extent(0) != config.image_size || image.extent(1) != config.image_size ||
        image.extent(2) != scenes::channels(p)) {
        throw ShapeError(fmt::format("{} image {} does not match [{} x {} x {}]", scenes::to_string(p),
                                     shape_string(image.shape()), config.image_size, config.image_size,
                                     scenes::channels(p)));
    }
    return patchify(scenes::to_model_space(p, image, config.max_depth), config.patch_size);
}

Tensor encode(const DiTConfig& config, const scenes::IntrinsicSample& sample) {
    const std::size_t L = config.tokens(), pd = config.patch_dim();
    Tensor out({config.m(), L, pd});
    for (std::size_t m = 0; m < config.m(); ++m) {
        const Property p = config.properties[m];
        const Tensor& image = sample.get(p);
        if (image.size() == 0) throw std::invalid_argument("sample is missing its " + scenes::to_string(p) + " image");
        const Tensor tok = encode_property(config, p, image);
        std::copy_n(tok.raw(), tok.size(), out.raw() + m * L * pd);
    }
    return out;
}

std::vector<Tensor> decode(const DiTConfig& config, const Tensor& tokens) {
    const std::size_t L = config.tokens(), pd = config.patch_dim();
    if (tokens.size() != config.m() * L * pd) {
        throw ShapeError(fmt::format("decode: {} is not [{} x {} x {}]", shape_string(tokens.shape()), config.m(), L, pd));
    }
    std::vector<Tensor> out;
    for (std::size_t m = 0; m < config.m(); ++m) {
        Tensor slice({L, pd});
        std::copy_n(tokens.raw() + m * L * pd, L * pd, slice.raw());
        out.push_back(scenes::from_model_space(
            config.properties[m], unpatchify(slice, config.image_size, config.patch_size, kModelChannels),
            config.max_depth));
    }
    return out;
}

Tensor timestep_features(std::span<const double> t, std::size_t width) {
    const std::size_t half = width / 2;
    Tensor out({t.size(), width});
    for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
            const double arg = 1000.0 * t[i] * freq;
            out[i * width + k] = std::cos(arg);
            out[i * width + half + k] = std::sin(arg);
        }
    return out;
}

Tensor position_table(std::size_t grid, std::size_t d) {
    const std::size_t quarter = d / 4;
    Tensor out({grid * grid, d});
    for (std::size_t y = 0; y < grid; ++y)
        for (std::size_t x = 0; x < grid; ++x) {
            double* row = out.raw() + (y * grid + x) * d;
            for (std::size_t k = 0; k < quarter; ++k) {
                const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(quarter));
                row[k] = std::sin(static_cast<double>(y) * omega);
                row[quarter + k] = std::cos(static_cast<double>(y) * omega);
                row[2 * quarter + k] = std::sin(static_cast<double>(x) * omega);
                row[3 * quarter + k] = std::cos(static_cast<double>(x) * omega);
            }
        }
    return out;
}

FlowBatch flow_batch(Tensor clean, Tensor noise, std::vector<double> t) {
    require_same_shape(clean, noise, "flow_batch");
    if (clean.rank() == 0 || t.size() != clean.extent(0)) {
        throw ShapeError(fmt::format("flow_batch: {} timesteps for latent {}", t.size(), shape_string(clean.shape())));
    }
    const std::size_t per = clean.size() / clean.extent(0);
    Tensor noisy(clean.shape()), target(clean.shape());
    for (std::size_t s = 0; s < t.size(); ++s) {
        if (!(t[s] >= 0.0 && t[s] <= 1.0)) throw std::invalid_argument(fmt::format("timestep {} outside [0, 1]", t[s]));
        for (std::size_t i = s * per; i < (s + 1) * per; ++i) {
            noisy[i] = (1.0 - t[s]) * clean[i] + t[s] * noise[i];
            target[i] = noise[i] - clean[i];
        }
    }
    return {std::move(clean), std::move(noise), std::move(noisy), std::move(target), std::move(t)};
}

FlowBatch draw_flow_batch(Tensor clean, Rng& rng) {
    if (clean.rank() == 0) throw ShapeError("draw_flow_batch: empty latent");
    std::vector<double> t(clean.extent(0));
    for (auto& v : t) v = rng.uniform();
    Tensor noise(clean.shape());
    for (auto& v : noise.data()) v = rng.normal();
    return flow_batch(std::move(clean), std::move(noise), std::move(t));
}

// Every property slice has the same element count, so the mean of per-property
// means is the mean over all elements.
Var flow_matching_loss(Var prediction, const FlowBatch& batch) { return ad::mse(prediction, batch.target); }

Model two_phase_init(const DiTConfig& config, const Model& base, Rng& rng) {
    const DiTConfig& b = base.config();
    if (b.m() != 1 || b.properties[0] != Property::Color) {
        throw std::invalid_argument("two_phase base must be a color-only model");
    }
    if (b.image_size != config.image_size || b.patch_size != config.patch_size || b.d != config.d ||
        b.heads != config.heads || b.depth != config.depth || b.mlp_ratio != config.mlp_ratio) {
        throw std::invalid_argument("two_phase base architecture does not match the config");
    }
    Model model = Model::initialized(config, rng);
    for (auto& [name, t] : model.parameters()) {
        if (model.is_adapter(name)) continue;
        auto it = base.parameters().find(name);
        if (it == base.parameters().end() || it->second.shape() != t.shape()) {
            throw std::invalid_argument("two_phase base lacks a compatible '" + name + "'");
        }
        t = it->second;
    }
    if (!b.adapters) return model;
    // x W + (Delta x^T)^T = x (W + Delta^T)
    for (std::size_t i = 0; i < b.depth; ++i)
        for (const char* proj : {"k", "v"}) {
            lora::Adapter a = lora::Adapter::zeros(b.lora, adapter_dims(b));
            for (auto& [name, f] : a.factors) f = base.parameters().at(block_name(i, fmt::format("attn/lora_{}/{}", proj, name)));
            const Tensor delta = transpose(lora::materialize(a));
            Tensor& w = model.parameters().at(block_name(i, fmt::format("attn/w{}", proj)));
            for (std::size_t k = 0; k < w.size(); ++k) w[k] += delta[k];
        }
    return model;
}

TrainResult train(const DiTConfig& config, const TrainConfig& tc, const std::vector<scenes::IntrinsicSample>& data,
                  const Model* base, const StepCallback& on_step) {
    config.validate();
    tc.validate();
    if (data.empty()) throw std::invalid_argument("training needs a nonempty dataset");
    const Rng root(tc.seed);
    Rng init = root.split("model");
    Model model = [&] {
        if (config.regime == Regime::FromScratchJoint) return Model::initialized(config, init);
        if (!base) throw std::invalid_argument("two_phase training requires a base checkpoint");
        return two_phase_init(config, *base, init);
    }();

    std::vector<Tensor> encoded;
    for (const auto& s : data) encoded.push_back(encode(config, s));
    const std::size_t M = config.m(), slice = encoded[0].size();

    struct Moments {
        Tensor m, v;
    };
    std::map<std::string, Moments> adam;
    for (const auto& [name, t] : model.parameters())
        if (model.trainable(name)) adam.emplace(name, Moments{Tensor(t.shape()), Tensor(t.shape())});

    TrainResult result{model, {}};
    Model& mdl = result.model;
    for (std::size_t step = 0; step < tc.steps; ++step) {
        Rng rng = root.split("step").split(step);
        Tensor clean({tc.batch * M, config.tokens(), config.patch_dim()});
        std::vector<Condition> conds;
        for (std::size_t b = 0; b < tc.batch; ++b) {
            const std::size_t i = rng.below(data.size());
            std::copy_n(encoded[i].raw(), slice, clean.raw() + b * slice);
            const bool drop = rng.uniform() < tc.descriptor_dropout;
            conds.push_back(drop ? Condition{} : Condition{data[i].descriptor});
        }
        const FlowBatch fb = draw_flow_batch(std::move(clean), rng);

        Tape tape;
        const auto p = mdl.bind(tape, true);
        const Var loss = flow_matching_loss(mdl.velocity(p, tape.constant(fb.noisy), fb.t, conds), fb);
        const double value = loss.value().item();
        if (!std::isfinite(value)) {
            throw TrainingError(fmt::format("training diverged at step {}: loss {} (lr {})", step, value, tc.lr));
        }
        tape.backward(loss);

        const double k = static_cast<double>(step + 1);
        const double c1 = 1.0 - std::pow(tc.beta1, k), c2 = 1.0 - std::pow(tc.beta2, k);
        const double lr = tc.lr_at(step);
        for (auto& [name, mom] : adam) {
            const Tensor g = tape.grad(p.at(name));
            Tensor& w = mdl.parameters().at(name);
            for (std::size_t i = 0; i < w.size(); ++i) {
                mom.m[i] = tc.beta1 * mom.m[i] + (1.0 - tc.beta1) * g[i];
                mom.v[i] = tc.beta2 * mom.v[i] + (1.0 - tc.beta2) * g[i] * g[i];
                w[i] -= lr * (mom.m[i] / c1) / (std::sqrt(mom.v[i] / c2) + tc.eps);
            }
        }
        result.losses.push_back(value);
        if (on_step) on_step(step, value);
    }
    return result;
}

std::pair<double, double> smoothed_ends(const std::vector<double>& losses, std::size_t window) {
    if (losses.empty() || window == 0) return {0.0, 0.0};
    const std::size_t w = std::min(window, losses.size());
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < w; ++i) {
        head += losses[i];
        tail += losses[losses.size() - w + i];
    }
    return {head / static_cast<double>(w), tail / static_cast<double>(w)};
}

Tensor euler(const VelocityFn& velocity, Tensor z, const std::vector<bool>& clamped, std::size_t steps) {
    if (steps == 0) throw std::invalid_argument("euler: steps must be at least 1");
    if (z.rank() == 0 || clamped.size() != z.extent(0)) {
        throw ShapeError(fmt::format("euler: {} clamp flags for latent {}", clamped.size(), shape_string(z.shape())));
    }
    const std::size_t S = z.extent(0), per = z.size() / S;
    const double dt = 1.0 / static_cast<double>(steps);
    std::vector<double> t(S);
    for (std::size_t k = 0; k < steps; ++k) {
        const double tk = 1.0 - static_cast<double>(k) / static_cast<double>(steps);
        for (std::size_t s = 0; s < S; ++s) t[s] = clamped[s] ? 0.0 : tk;
        const Tensor v = velocity(z, t);
        require_same_shape(v, z, "euler velocity");
        for (std::size_t s = 0; s < S; ++s) {
            if (clamped[s]) continue;
            for (std::size_t i = s * per; i < (s + 1) * per; ++i) z[i] -= dt * v[i];
        }
    }
    return z;
}

namespace {

Tensor initial_noise(const DiTConfig& c, std::size_t groups, Rng& rng) {
    Tensor z({groups * c.m(), c.tokens(), c.patch_dim()});
    for (auto& v : z.data()) v = rng.normal();
    return z;
}

}  // namespace

std::vector<PropertyImages> sample(const Model& model, const std::vector<Condition>& conditions, std::size_t steps,
                                   Rng& rng) {
    const DiTConfig& c = model.config();
    if (conditions.empty()) return {};
    Tensor z = initial_noise(c, conditions.size(), rng);
    auto v = [&](const Tensor& x, const std::vector<double>& t) { return model.velocity(x, t, conditions); };
    z = euler(v, std::move(z), std::vector<bool>(z.extent(0), false), steps);
    std::vector<PropertyImages> out;
    const std::size_t group = z.size() / conditions.size();
    for (std::size_t g = 0; g < conditions.size(); ++g) {
        Tensor slice({c.m(), c.tokens(), c.patch_dim()});
        std::copy_n(z.raw() + g * group, group, slice.raw());
        out.push_back(decode(c, slice));
    }
    return out;
}

PropertyImages decompose(const Model& model, const std::vector<std::pair<Property, Tensor>>& given, std::size_t steps,
                         Rng& rng, const Condition& condition, std::size_t samples) {
    if (samples == 0) throw std::invalid_argument("decompose needs at least one sample");
    const DiTConfig& c = model.config();
    Tensor z = initial_noise(c, samples, rng);
    std::vector<bool> clamped(samples * c.m(), false);
    const std::size_t per = c.tokens() * c.patch_dim(), group = c.m() * per;
    for (const auto& [p, image] : given) {
        auto it = std::find(c.properties.begin(), c.properties.end(), p);
        if (it == c.properties.end()) {
            throw std::invalid_argument("model does not generate property '" + scenes::to_string(p) + "'");
        }
        const auto slot = static_cast<std::size_t>(it - c.properties.begin());
        const Tensor tok = encode_property(c, p, image);
        for (std::size_t g = 0; g < samples; ++g) {
            std::copy_n(tok.raw(), per, z.raw() + g * group + slot * per);
            clamped[g * c.m() + slot] = true;
        }
    }
    const std::vector<Condition> conds(samples, condition);
    auto v = [&](const Tensor& x, const std::vector<double>& t) { return model.velocity(x, t, conds); };
    z = euler(v, std::move(z), clamped, steps);
    PropertyImages out;
    for (std::size_t g = 0; g < samples; ++g) {
        Tensor slice({c.m(), c.tokens(), c.patch_dim()});
        std::copy_n(z.raw() + g * group, group, slice.raw());
        const PropertyImages one = decode(c, slice);
        if (g == 0) {
            out = one;
            continue;
        }
        for (std::size_t m = 0; m < out.size(); ++m)
            for (std::size_t i = 0; i < out[m].size(); ++i) out[m][i] += one[m][i];
    }
    const double inv = 1.0 / static_cast<double>(samples);
    for (auto& image : out)
        for (auto& x : image.data()) x *= inv;
    for (const auto& [p, image] : given)
        out[static_cast<std::size_t>(std::find(c.properties.begin(), c.properties.end(), p) - c.properties.begin())] = image;
    return out;
}

}  // namespace lumix::diffusion
