#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "lumix/checkpoint.hpp"
#include "lumix/config.hpp"
#include "lumix/diffusion.hpp"
#include "lumix/metrics.hpp"
#include "lumix/scenes.hpp"

namespace fs = std::filesystem;
using namespace lumix;

namespace {

enum class Level { Quiet, Info, Debug };

Level g_level = Level::Info;

void init_logging() {
    const char* env = std::getenv("LUMIX_LOG");
    if (!env || std::string(env).empty() || std::string(env) == "info") return;
    const std::string v(env);
    if (v == "quiet") g_level = Level::Quiet;
    else if (v == "debug") g_level = Level::Debug;
    else fmt::print(stderr, "warning: LUMIX_LOG='{}' is not quiet, info or debug; using info\n", v);
}

template <class... Args>
void info(fmt::format_string<Args...> f, Args&&... args) {
    if (g_level >= Level::Info) fmt::print(stderr, "{}\n", fmt::format(f, std::forward<Args>(args)...));
}

template <class... Args>
void debug(fmt::format_string<Args...> f, Args&&... args) {
    if (g_level >= Level::Debug) fmt::print(stderr, "{}\n", fmt::format(f, std::forward<Args>(args)...));
}

/// Bad flags, bad config, or inputs that do not fit the command.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void check_threads(std::size_t threads) {
    if (threads == 0) throw UsageError("--threads must be at least 1");
    if (threads > 1) info("--threads {}: running single-threaded", threads);
}

diffusion::Model load_model(const fs::path& path) {
    return checkpoint::to_model(checkpoint::load(path));
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
}

// gen-data

struct GenDataArgs {
    fs::path out;
    std::size_t count = 0;
    std::size_t size = 32;
    std::uint64_t seed = 0;
};

void gen_data(const GenDataArgs& a) {
    std::vector<scenes::IntrinsicSample> samples;
    samples.reserve(a.count);
    for (std::size_t i = 0; i < a.count; ++i) samples.push_back(scenes::generate(a.seed, i, a.size));
    scenes::write_dataset(samples, a.out);
    info("wrote {} samples of {}x{} to {}", a.count, a.size, a.size, a.out.string());
}

// train

struct TrainArgs {
    fs::path config, data, out, base;
    std::optional<std::size_t> steps;
    std::optional<std::uint64_t> seed;
    std::size_t threads = 1;
};

fs::path loss_log_path(const fs::path& ckpt) { return fs::path(ckpt.string() + ".loss.tsv"); }

void train(const TrainArgs& a) {
    check_threads(a.threads);
    config::RunConfig cfg = config::load(a.config);
    if (a.steps) cfg.train.steps = *a.steps;
    if (a.seed) cfg.train.seed = *a.seed;
    try {
        cfg.train.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }

    std::optional<diffusion::Model> base;
    if (cfg.model.regime == diffusion::Regime::TwoPhase) {
        if (a.base.empty()) throw UsageError("regime two_phase needs --base CHECKPOINT");
        base = load_model(a.base);
    } else if (!a.base.empty()) {
        throw UsageError("--base is only used with regime two_phase");
    }

    const auto data = scenes::read_dataset(a.data);
    if (!data.empty() && data.front().size() != cfg.model.image_size) {
        throw UsageError(fmt::format("dataset images are {}x{} but the config expects image_size {}",
                                     data.front().size(), data.front().size(), cfg.model.image_size));
    }
    info("training {} properties on {} samples for {} steps", cfg.model.m(), data.size(), cfg.train.steps);

    if (!a.out.parent_path().empty()) make_dir(a.out.parent_path());
    std::ofstream log(loss_log_path(a.out), std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + loss_log_path(a.out).string());
    const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 20);
    auto on_step = [&](std::size_t step, double loss) {
        log << step << '\t' << fmt::format("{}", loss) << '\n';
        if (step % every == 0 || step + 1 == cfg.train.steps) info("step {:>6}  loss {:.5f}", step, loss);
        else debug("step {:>6}  loss {:.5f}", step, loss);
    };
    auto result = diffusion::train(cfg.model, cfg.train, data, base ? &*base : nullptr, on_step);
    log.flush();
    if (!log) throw std::runtime_error("cannot write " + loss_log_path(a.out).string());
    checkpoint::save(a.out, checkpoint::from_model(result.model, cfg.train));
    info("wrote {}", a.out.string());
}

// sample

struct SampleArgs {
    fs::path checkpoint, out, descriptor;
    std::size_t count = 1;
    std::size_t steps = 50;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

std::optional<std::size_t> slot_of(const diffusion::DiTConfig& c, scenes::Property p) {
    for (std::size_t i = 0; i < c.m(); ++i)
        if (c.properties[i] == p) return i;
    return std::nullopt;
}

nlohmann::json physics_metrics(const diffusion::DiTConfig& c, const diffusion::PropertyImages& images) {
    using scenes::Property;
    nlohmann::json j;
    const auto ci = slot_of(c, Property::Color), ai = slot_of(c, Property::Albedo),
               ii = slot_of(c, Property::Irradiance);
    j["lambertian_residual"] =
        ci && ai && ii ? nlohmann::json(metrics::lambertian_residual(images[*ci], images[*ai], images[*ii])) : nullptr;
    if (ci && c.m() > 1) {
        std::vector<std::pair<std::string, Tensor>> others;
        for (std::size_t i = 0; i < c.m(); ++i)
            if (i != *ci) others.emplace_back(scenes::to_string(c.properties[i]), images[i]);
        const auto score = metrics::alignment_score(images[*ci], others);
        j["edge_alignment"] = score.mean;
        for (const auto& [name, f1] : score.pairs) j["edge_f1"][name] = f1;
    } else {
        j["edge_alignment"] = nullptr;
    }
    return j;
}

void write_images(const fs::path& dir, const diffusion::DiTConfig& c, const diffusion::PropertyImages& images,
                  std::optional<scenes::Property> skip = std::nullopt) {
    make_dir(dir);
    for (std::size_t i = 0; i < c.m(); ++i) {
        if (skip && c.properties[i] == *skip) continue;
        scenes::write_property_image(dir / scenes::image_filename(c.properties[i]), c.properties[i], images[i],
                                     c.max_depth);
    }
}

diffusion::Condition read_condition(const fs::path& path) {
    if (path.empty()) return std::nullopt;
    try {
        return scenes::read_descriptor(path);
    } catch (const scenes::DatasetError& e) {
        throw UsageError(e.what());
    }
}

void sample(const SampleArgs& a) {
    check_threads(a.threads);
    if (a.steps == 0) throw UsageError("--steps must be at least 1");
    const auto model = load_model(a.checkpoint);
    const auto& c = model.config();
    const diffusion::Condition cond = read_condition(a.descriptor);

    nlohmann::json report;
    report["steps"] = a.steps;
    report["seed"] = a.seed;
    report["samples"] = nlohmann::json::array();
    double lam = 0.0, align = 0.0;
    bool has_lam = false, has_align = false;
    for (std::size_t i = 0; i < a.count; ++i) {
        Rng rng = Rng(a.seed).split("sample").split(static_cast<std::uint64_t>(i));
        const auto images = diffusion::sample(model, {cond}, a.steps, rng).front();
        const fs::path dir = a.count == 1 ? a.out : a.out / std::to_string(i);
        write_images(dir, c, images);
        nlohmann::json m = physics_metrics(c, images);
        if (m["lambertian_residual"].is_number()) lam += m["lambertian_residual"].get<double>(), has_lam = true;
        if (m["edge_alignment"].is_number()) align += m["edge_alignment"].get<double>(), has_align = true;
        m["index"] = i;
        report["samples"].push_back(std::move(m));
        debug("sample {} done", i);
    }
    const double n = static_cast<double>(std::max<std::size_t>(a.count, 1));
    report["lambertian_residual"] = has_lam ? nlohmann::json(lam / n) : nullptr;
    report["edge_alignment"] = has_align ? nlohmann::json(align / n) : nullptr;
    make_dir(a.out);
    std::ofstream(a.out / "metrics.json") << report.dump(2) << '\n';
    info("wrote {} sample(s) to {}", a.count, a.out.string());
}

// decompose

struct DecomposeArgs {
    fs::path checkpoint, image, out, descriptor;
    std::string property = "color";
    std::size_t steps = 50;
    std::size_t samples = 1;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

void decompose(const DecomposeArgs& a) {
    check_threads(a.threads);
    if (a.steps == 0) throw UsageError("--steps must be at least 1");
    if (a.samples == 0) throw UsageError("--samples must be at least 1");
    scenes::Property p;
    try {
        p = scenes::parse_property(a.property);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const auto model = load_model(a.checkpoint);
    const auto& c = model.config();
    if (!slot_of(c, p)) throw UsageError(fmt::format("the checkpoint does not model '{}'", a.property));
    const Tensor image = scenes::read_property_image(a.image, p, c.max_depth);
    const Shape want{c.image_size, c.image_size, scenes::channels(p)};
    if (image.shape() != want) {
        throw UsageError(fmt::format("{} is {}, expected {}", a.image.string(), shape_string(image.shape()),
                                     shape_string(want)));
    }
    Rng rng = Rng(a.seed).split("decompose");
    const auto images = diffusion::decompose(model, {{p, image}}, a.steps, rng, read_condition(a.descriptor), a.samples);
    write_images(a.out, c, images, p);
    info("wrote {} map(s) to {}", c.m() - 1, a.out.string());
}

// bench

struct BenchArgs {
    std::vector<fs::path> configs;
    std::size_t m = 5;
    std::size_t d = 3072;
    std::uint64_t tokens = 1536;
    fs::path out;
};

void bench(const BenchArgs& a) {
    std::vector<metrics::CostConfig> grid;
    if (a.configs.empty()) {
        if (a.m == 0 || a.d == 0 || a.tokens == 0) throw UsageError("--m, --d and --tokens must be positive");
        grid = metrics::default_grid(a.m, a.d, a.tokens);
    }
    for (const auto& path : a.configs) {
        const auto cfg = config::load(path);
        metrics::CostConfig cc;
        cc.attention = cfg.model.attention;
        cc.lora = cfg.model.lora;
        cc.m = cfg.model.m();
        cc.d = cfg.model.d;
        cc.heads = cfg.model.heads;
        cc.tokens = cfg.model.tokens();
        grid.push_back(cc);
    }
    const std::string tsv = metrics::cost_report(grid).tsv();
    if (a.out.empty()) {
        fmt::print("{}", tsv);
        return;
    }
    std::ofstream out(a.out);
    out << tsv;
    if (!out) throw std::runtime_error("cannot write " + a.out.string());
}

}  // namespace

int main(int argc, char** argv) {
    init_logging();
    CLI::App app{"lumix: multi-property diffusion toolkit"};
    app.require_subcommand(1);

    GenDataArgs ga;
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic intrinsic dataset");
    gen->add_option("--out", ga.out, "Output directory")->required();
    gen->add_option("--count", ga.count, "Number of scenes")->required();
    gen->add_option("--size", ga.size, "Image size")->check(CLI::Range(4, 4096));
    gen->add_option("--seed", ga.seed, "Dataset seed");

    TrainArgs ta;
    std::size_t train_steps = 0;
    std::uint64_t train_seed = 0;
    auto* tr = app.add_subcommand("train", "Train a model on a dataset");
    tr->add_option("--config", ta.config, "Run config (key = value lines)")->required()->check(CLI::ExistingFile);
    tr->add_option("--data", ta.data, "Dataset directory")->required();
    tr->add_option("--out", ta.out, "Checkpoint to write")->required();
    tr->add_option("--base", ta.base, "Color-only base checkpoint for two_phase")->check(CLI::ExistingFile);
    auto* steps_opt = tr->add_option("--steps", train_steps, "Override the config's steps");
    auto* seed_opt = tr->add_option("--seed", train_seed, "Override the config's seed");
    tr->add_option("--threads", ta.threads, "Worker threads");

    SampleArgs sa;
    auto* sm = app.add_subcommand("sample", "Generate property maps from a checkpoint");
    sm->add_option("--checkpoint", sa.checkpoint, "Checkpoint")->required();
    sm->add_option("--out", sa.out, "Output directory")->required();
    sm->add_option("--descriptor", sa.descriptor, "Scene descriptor file (default: unconditional)")
        ->check(CLI::ExistingFile);
    sm->add_option("--count", sa.count, "Number of generations");
    sm->add_option("--steps", sa.steps, "Euler steps");
    sm->add_option("--seed", sa.seed, "Sampling seed");
    sm->add_option("--threads", sa.threads, "Worker threads");

    DecomposeArgs da;
    auto* dc = app.add_subcommand("decompose", "Generate the remaining maps given one property image");
    dc->add_option("--checkpoint", da.checkpoint, "Checkpoint")->required();
    dc->add_option("--image", da.image, "Input image (PPM, or 16-bit PGM for depth)")->required()->check(
        CLI::ExistingFile);
    dc->add_option("--out", da.out, "Output directory")->required();
    dc->add_option("--property", da.property, "Property of the input image");
    dc->add_option("--descriptor", da.descriptor, "Scene descriptor file")->check(CLI::ExistingFile);
    dc->add_option("--steps", da.steps, "Euler steps");
    dc->add_option("--samples", da.samples, "Average this many generations per map");
    dc->add_option("--seed", da.seed, "Sampling seed");
    dc->add_option("--threads", da.threads, "Worker threads");

    BenchArgs ba;
    auto* bn = app.add_subcommand("bench", "Parameter and FLOP accounting as TSV");
    bn->add_option("--config", ba.configs, "Run configs to cost (default: the full method grid)")
        ->check(CLI::ExistingFile);
    bn->add_option("--m", ba.m, "Properties for the default grid");
    bn->add_option("--d", ba.d, "Width for the default grid");
    bn->add_option("--tokens", ba.tokens, "Tokens per property for the default grid");
    bn->add_option("--out", ba.out, "Write the TSV here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) gen_data(ga);
        if (tr->parsed()) {
            if (*steps_opt) ta.steps = train_steps;
            if (*seed_opt) ta.seed = train_seed;
            train(ta);
        }
        if (sm->parsed()) sample(sa);
        if (dc->parsed()) decompose(da);
        if (bn->parsed()) bench(ba);
    } catch (const UsageError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    } catch (const config::ConfigError& e) {
        fmt::print(stderr, "error: config: {}\n", e.what());
        return 1;
    } catch (const checkpoint::CheckpointError& e) {
        fmt::print(stderr, "error: checkpoint: {}\n", e.what());
        return 2;
    } catch (const scenes::DatasetError& e) {
        fmt::print(stderr, "error: dataset: {}\n", e.what());
        return 2;
    } catch (const diffusion::TrainingError& e) {
        fmt::print(stderr, "error: training: {}\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    }
    return 0;
}
