#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lumix/attention.hpp"
#include "lumix/autograd.hpp"
#include "lumix/lora.hpp"
#include "lumix/rng.hpp"
#include "lumix/scenes.hpp"
#include "lumix/tensor.hpp"

namespace lumix::diffusion {

enum class Regime { FromScratchJoint, TwoPhase };

std::string to_string(Regime r);
Regime parse_regime(const std::string& text);

/// Channels of every property in model space (depth is replicated).
constexpr std::size_t kModelChannels = 3;

/**
 * Toy diffusion transformer over M stacked property images.
 *
 * Tokens of every property go through the same blocks; properties only meet
 * inside attention (depending on the variant) and through the K/V adapters.
 */
struct DiTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 2;
    std::size_t d = 128;
    std::size_t heads = 4;
    std::size_t depth = 6;
    std::size_t mlp_ratio = 4;
    std::vector<scenes::Property> properties{scenes::Property::Color, scenes::Property::Albedo,
                                             scenes::Property::Irradiance};
    attention::Variant attention = attention::Variant::QueryBroadcast;
    lora::Variant lora = lora::Variant::tensor(8, 8);
    /// K/V adapters present. A two_phase base may be trained without them.
    bool adapters = true;
    Regime regime = Regime::FromScratchJoint;
    /// Learned per-property token offset. Only active in from_scratch_joint with more than one property.
    bool property_embedding = true;
    double max_depth = scenes::kMaxDepth;

    std::size_t m() const { return properties.size(); }
    std::size_t grid() const { return image_size / patch_size; }
    std::size_t tokens() const { return grid() * grid(); }
    std::size_t patch_dim() const { return patch_size * patch_size * kModelChannels; }
    /// Query donor for broadcast attention: the color slot, or slot 0 without one.
    std::size_t color_index() const;
    bool uses_property_embedding() const {
        return property_embedding && regime == Regime::FromScratchJoint && m() > 1;
    }
    attention::Config attention_config() const;
    void validate() const;
    bool operator==(const DiTConfig&) const = default;
};

enum class Schedule { Constant, Cosine };

std::string to_string(Schedule s);
Schedule parse_schedule(const std::string& text);

struct TrainConfig {
    std::size_t steps = 200;
    std::size_t batch = 4;
    double lr = 1e-3;
    /// Cosine anneals the step size from lr to 0 over the run.
    Schedule lr_schedule = Schedule::Constant;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Probability of replacing a sample's descriptor with the null descriptor.
    double descriptor_dropout = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
    /// Step size at a zero-based step.
    double lr_at(std::size_t step) const;
    bool operator==(const TrainConfig&) const = default;
};

using ParameterMap = std::map<std::string, Tensor>;
using Bindings = std::map<std::string, Var>;

/// Descriptor conditioning. A missing descriptor selects the learned null entry of every table.
using Condition = std::optional<scenes::SceneDescriptor>;

class Model {
public:
    /// Every parameter zero.
    explicit Model(DiTConfig config);
    /// Standard initialization: adaLN and output layers zero, adapters with a zero update.
    static Model initialized(const DiTConfig& config, Rng& rng);

    const DiTConfig& config() const { return config_; }
    ParameterMap& parameters() { return params_; }
    const ParameterMap& parameters() const { return params_; }

    bool is_adapter(const std::string& name) const;
    /// Whether `name` receives updates under the config's regime.
    bool trainable(const std::string& name) const;

    /// Puts every parameter on the tape, as a leaf when `train` and trainable, else as a constant.
    Bindings bind(Tape& tape, bool train) const;

    /**
     * Predicted velocity for z[G*M, L, patch_dim], with one timestep per slice
     * and one condition per group.
     */
    Var velocity(const Bindings& p, Var z, std::span<const double> t, std::span<const Condition> conditions) const;
    Tensor velocity(const Tensor& z, std::span<const double> t, std::span<const Condition> conditions) const;

private:
    DiTConfig config_;
    ParameterMap params_;
};

/// Names and shapes of every parameter of a config, in sorted order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const DiTConfig& config);

/// [S, S, C] image -> [(S/p)^2, p*p*C] patch tokens, row-major over the patch grid.
Tensor patchify(const Tensor& image, std::size_t patch);
Tensor unpatchify(const Tensor& tokens, std::size_t image_size, std::size_t patch, std::size_t channels);

/// Model-space tokens [M, L, patch_dim] of a sample's configured properties.
Tensor encode(const DiTConfig& config, const scenes::IntrinsicSample& sample);
/// Encode a single property image.
Tensor encode_property(const DiTConfig& config, scenes::Property p, const Tensor& image);
/// Per-property images in unit range from tokens [M, L, patch_dim].
std::vector<Tensor> decode(const DiTConfig& config, const Tensor& tokens);

/// Sinusoidal features of t in [0, 1]: [n, width].
Tensor timestep_features(std::span<const double> t, std::size_t width);
/// Fixed 2D sin/cos position table [grid*grid, d].
Tensor position_table(std::size_t grid, std::size_t d);

/// One training batch on the linear path z_t = (1 - t) z + t eps, target eps - z.
struct FlowBatch {
    Tensor clean;
    Tensor noise;
    Tensor noisy;
    Tensor target;
    std::vector<double> t;  ///< one per slice
};

FlowBatch flow_batch(Tensor clean, Tensor noise, std::vector<double> t);
/// Independent t ~ U[0, 1] per slice and eps ~ N(0, 1) per element.
FlowBatch draw_flow_batch(Tensor clean, Rng& rng);

/// Mean over properties of the per-property mean squared error against the target.
Var flow_matching_loss(Var prediction, const FlowBatch& batch);

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainResult {
    Model model;
    std::vector<double> losses;
};

using StepCallback = std::function<void(std::size_t step, double loss)>;

/**
 * Adam on the flow-matching loss.
 *
 * two_phase needs `base`, a color-only model of the same width and depth:
 * its weights are copied and frozen and only the K/V adapters train.
 * Deterministic for a given seed.
 */
TrainResult train(const DiTConfig& config, const TrainConfig& train_config,
                  const std::vector<scenes::IntrinsicSample>& data, const Model* base = nullptr,
                  const StepCallback& on_step = {});

/**
 * Builds the two_phase starting point from a color-only base. Adapters of
 * the base (a dense d x d update at one property) are folded into its K and
 * V weights.
 */
Model two_phase_init(const DiTConfig& config, const Model& base, Rng& rng);

/// Mean of the first and last `window` losses.
std::pair<double, double> smoothed_ends(const std::vector<double>& losses, std::size_t window);

using VelocityFn = std::function<Tensor(const Tensor& z, const std::vector<double>& t)>;

/**
 * Euler integration from t = 1 to t = 0 on a uniform grid.
 *
 * Slices flagged in `clamped` keep their value and are always shown t = 0.
 */
Tensor euler(const VelocityFn& velocity, Tensor z, const std::vector<bool>& clamped, std::size_t steps);

/// Per-property unit-range images, in config property order.
using PropertyImages = std::vector<Tensor>;

/// Joint generation, one group per condition, each property from its own noise.
std::vector<PropertyImages> sample(const Model& model, const std::vector<Condition>& conditions, std::size_t steps,
                                   Rng& rng);

/// Generation with some properties held at given clean images. Their output slots return the inputs unchanged.
/// With samples > 1 the generated maps are the per-pixel mean of that many independent generations.
PropertyImages decompose(const Model& model, const std::vector<std::pair<scenes::Property, Tensor>>& given,
                         std::size_t steps, Rng& rng, const Condition& condition = std::nullopt,
                         std::size_t samples = 1);

}  // namespace lumix::diffusion
