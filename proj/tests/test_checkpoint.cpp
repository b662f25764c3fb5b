#include <doctest.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <random>

#include "lumix/checkpoint.hpp"
#include "lumix/config.hpp"
#include "test_support.hpp"

using namespace lumix;
using lumix::testing::random_tensor;

namespace {

const char* kToy = R"(# toy run
image_size = 8
patch_size = 2
d = 16
heads = 2
depth = 1
properties = color, albedo,irradiance
attention = qb
lora = hybrid
rank = 8
steps = 10
lr = 0.002   # faster
lr_schedule = cosine
seed = 7
)";

}  // namespace

TEST_CASE("config parsing and canonical form") {
    const auto cfg = config::parse(kToy);
    CHECK(cfg.model.image_size == 8);
    CHECK(cfg.model.properties.size() == 3);
    CHECK(cfg.model.attention == attention::Variant::QueryBroadcast);
    CHECK(cfg.model.lora == lora::Variant::hybrid(8, 2));
    CHECK(cfg.train.lr == 0.002);
    CHECK(cfg.train.seed == 7);
    CHECK(cfg.train.lr_schedule == diffusion::Schedule::Cosine);
    CHECK(cfg.train.batch == diffusion::TrainConfig{}.batch);

    const std::string canon = config::emit(cfg);
    CHECK(config::parse(canon) == cfg);
    CHECK(config::emit(config::parse(canon)) == canon);
    CHECK(canon.find("properties = color,albedo,irradiance\n") != std::string::npos);
    CHECK(canon.find("lr = 0.002\nlr_schedule = cosine\n") != std::string::npos);

    config::RunConfig odd;
    odd.train.lr = 0.1 + 0.2;
    odd.model.max_depth = 1.0 / 3.0;
    CHECK(config::parse(config::emit(odd)) == odd);
    CHECK(config::parse("") == config::RunConfig{});
}

TEST_CASE("config errors") {
    CHECK_THROWS_WITH_AS(config::parse("depht = 3\n"), doctest::Contains("unknown key 'depht'"), config::ConfigError);
    CHECK_THROWS_WITH_AS(config::parse("d = 8\nd = 16\n"), doctest::Contains("line 2"), config::ConfigError);
    CHECK_THROWS_AS(config::parse("d = 8x\n"), config::ConfigError);
    CHECK_THROWS_AS(config::parse("d = -8\n"), config::ConfigError);
    CHECK_THROWS_AS(config::parse("just words\n"), config::ConfigError);
    CHECK_THROWS_AS(config::parse("attention = flash\n"), config::ConfigError);
    CHECK_THROWS_AS(config::parse("properties = color,shading\n"), config::ConfigError);
    CHECK_THROWS_AS(config::parse("image_size = 30\npatch_size = 4\n"), config::ConfigError);
    CHECK_THROWS_AS(config::parse("adapters = maybe\n"), config::ConfigError);
    CHECK_THROWS_AS(config::parse("lr_schedule = linear\n"), config::ConfigError);
    CHECK_THROWS_AS(config::load("/nonexistent/run.cfg"), config::ConfigError);
}

TEST_CASE("checkpoint container layout") {
    checkpoint::Checkpoint ck;
    ck.config = config::parse(kToy);
    ck.tensors.emplace("b", Tensor({2}, std::vector<double>{1.5, -2.0}));
    ck.tensors.emplace("a", Tensor({1, 1}, 0.25));
    const std::string bytes = checkpoint::serialize(ck);
    CHECK(bytes.substr(0, 4) == "LMX1");
    CHECK(bytes.substr(4, 4) == std::string("\x01\x00\x00\x00", 4));
    const std::string canon = config::emit(ck.config);
    std::uint32_t len = 0;
    std::memcpy(&len, bytes.data() + 8, 4);
    CHECK(len == canon.size());
    CHECK(bytes.substr(12, len) == canon);
    // records sorted by name: "a" first
    const std::size_t rec = 12 + len + 4;
    CHECK(bytes.substr(rec, 5) == std::string("\x01\x00\x00\x00" "a", 5));
    const std::string tail = bytes.substr(bytes.size() - 8);
    CHECK(std::bit_cast<float>(*reinterpret_cast<const std::uint32_t*>(tail.data())) == 1.5f);
    CHECK(bytes.size() == rec + 5 + 4 + 16 + 4 + (4 + 1 + 4 + 8 + 8));
}

TEST_CASE("checkpoint round trip is bit exact after float storage") {
    std::mt19937_64 gen(40);
    auto cfg = config::parse(kToy);
    Rng rng(41);
    const auto model = diffusion::Model::initialized(cfg.model, rng);
    auto ck = checkpoint::from_model(model, cfg.train);
    for (auto& [name, t] : ck.tensors) t = random_tensor(gen, t.shape());
    const std::string bytes = checkpoint::serialize(ck);
    const auto back = checkpoint::deserialize(bytes);
    CHECK(back.config == ck.config);
    REQUIRE(back.tensors.size() == ck.tensors.size());
    for (const auto& [name, t] : ck.tensors) {
        const Tensor& b = back.tensors.at(name);
        REQUIRE(b.shape() == t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(b[i] == static_cast<double>(static_cast<float>(t[i])));
    }
    CHECK(checkpoint::serialize(back) == bytes);
    const auto restored = checkpoint::to_model(back);
    CHECK(restored.parameters() == back.tensors);

    const auto dir = std::filesystem::temp_directory_path() / "lumix_test_ckpt";
    std::filesystem::create_directories(dir);
    checkpoint::save(dir / "m.lmx", back);
    CHECK(checkpoint::serialize(checkpoint::load(dir / "m.lmx")) == bytes);
    std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt checkpoints") {
    checkpoint::Checkpoint ck;
    ck.config = config::parse(kToy);
    ck.tensors.emplace("w", Tensor({3}, 1.0));
    const std::string bytes = checkpoint::serialize(ck);
    CHECK_THROWS_WITH_AS(checkpoint::deserialize("LMX2" + bytes.substr(4)), doctest::Contains("magic"),
                         checkpoint::CheckpointError);
    CHECK_THROWS_WITH_AS(checkpoint::deserialize(bytes.substr(0, bytes.size() - 2)), doctest::Contains("truncated"),
                         checkpoint::CheckpointError);
    CHECK_THROWS_WITH_AS(checkpoint::deserialize(bytes + "x"), doctest::Contains("trailing"), checkpoint::CheckpointError);
    std::string v2 = bytes;
    v2[4] = 2;
    CHECK_THROWS_WITH_AS(checkpoint::deserialize(v2), doctest::Contains("version"), checkpoint::CheckpointError);
    CHECK_THROWS_AS(checkpoint::deserialize(""), checkpoint::CheckpointError);
    // Tensors that do not fit the config.
    CHECK_THROWS_AS(checkpoint::to_model(ck), checkpoint::CheckpointError);
    CHECK_THROWS_AS(checkpoint::load("/nonexistent/m.lmx"), checkpoint::CheckpointError);
}
