#include <fstream>
#include <unistd.h>

#include "calcseg/errors.hpp"
#include "calcseg/pipeline.hpp"

#include <doctest.h>

using namespace calcseg;
using json = nlohmann::json;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("calcseg_cfg_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

fs::path write_file(const fs::path& dir, const std::string& name, const std::string& text) {
    const auto p = dir / name;
    std::ofstream(p) << text;
    return p;
}

RunConfig tiny_config() {
    auto cfg = default_run_config();
    apply_override(cfg, "data.patients", "10");
    apply_override(cfg, "data.series_per_patient", "1");
    apply_override(cfg, "data.split.finetune_count", "2");
    apply_override(cfg, "data.phantom.dims", "[16, 16, 8]");
    apply_override(cfg, "training.epochs", "2");
    apply_override(cfg, "eval.resamples", "50");
    return cfg;
}

}  // namespace

TEST_CASE("defaults are valid and marked as defaults") {
    auto cfg = default_run_config();
    CHECK_NOTHROW(validate(cfg));
    CHECK(cfg.provenance.at("training.epochs") == "default");
    CHECK(cfg.provenance.at("seed") == "default");
    CHECK(encoder_from_config(cfg).patch_size == 4);
    CHECK(decoder_from_config(cfg).kind == DecoderKind::MaeDec);
}

TEST_CASE("file values override defaults and flags override file values") {
    const auto dir = scratch_dir("merge");
    const auto path = write_file(dir, "run.yaml", "seed: 7\ntraining:\n  epochs: 40\n  lr: 0.002\n");
    auto cfg = default_run_config();
    merge_config_file(cfg, path);
    CHECK(run_seed(cfg) == 7);
    CHECK(cfg.provenance.at("training.epochs") == "file");
    CHECK(cfg.provenance.at("training.batch_size") == "default");

    apply_override(cfg, "training.epochs", "12");
    CHECK(cfg.provenance.at("training.epochs") == "flag");
    const auto ft = finetune_from_config(cfg);
    CHECK(ft.epochs == 12);
    CHECK(ft.lr == doctest::Approx(0.002));
    CHECK(ft.seed == 7);
    CHECK(phantom_config(cfg).seed == 7);

    const auto prov = provenance_json(cfg);
    CHECK(prov.at("training.lr").at("source") == "file");
    CHECK(prov.at("training.epochs").at("value") == 12);
    fs::remove_all(dir);
}

TEST_CASE("resolved tree survives a yaml round trip") {
    const auto dir = scratch_dir("roundtrip");
    auto cfg = tiny_config();
    apply_override(cfg, "ablate.patch_sizes", "[4, 8]");
    const auto path = write_file(dir, "resolved.yaml", to_yaml(cfg.tree));
    auto back = default_run_config();
    merge_config_file(back, path);
    CHECK(back.tree == cfg.tree);
    fs::remove_all(dir);
}

TEST_CASE("bad keys, types and values are rejected") {
    auto cfg = default_run_config();
    CHECK_THROWS_AS(apply_override(cfg, "training.epoch", "3"), ConfigError);
    CHECK_THROWS_AS(apply_override(cfg, "training.epochs", "many"), ConfigError);
    CHECK_THROWS_AS(apply_override(cfg, "ablate.patch_sizes", "4"), ConfigError);

    auto dev = default_run_config();
    apply_override(dev, "device", "cuda");
    CHECK_THROWS_AS(validate(dev), ConfigError);

    auto init = default_run_config();
    apply_override(init, "ablate.init", "imagenet");
    CHECK_THROWS_AS(validate(init), ConfigError);

    auto ratio = default_run_config();
    apply_override(ratio, "mae.mask_ratio", "1.0");
    CHECK_THROWS_AS(validate(ratio), ConfigError);

    const auto dir = scratch_dir("bad");
    auto merged = default_run_config();
    CHECK_THROWS_AS(merge_config_file(merged, write_file(dir, "unknown.yaml", "training:\n  epochz: 3\n")),
                    ConfigError);
    CHECK_THROWS_AS(merge_config_file(merged, write_file(dir, "broken.yaml", "training: [1, 2\n")), ParseError);
    CHECK_THROWS_AS(merge_config_file(merged, dir / "missing.yaml"), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("run record lists seed, inputs and resolved config") {
    const auto dir = scratch_dir("record");
    auto cfg = tiny_config();
    record_run(cfg, "finetune", json{{"manifest", "m.csv"}}, dir);
    std::ifstream in(dir / "config" / "finetune.run.json");
    const auto run = json::parse(in);
    CHECK(run.at("command") == "finetune");
    CHECK(run.at("seed") == 0);
    CHECK(run.at("inputs").at("manifest") == "m.csv");
    CHECK(fs::exists(dir / "config" / "finetune.yaml"));
    CHECK(fs::exists(dir / "config" / "finetune.provenance.json"));
    fs::remove_all(dir);
}

TEST_CASE("single-cell ablation matches finetune plus evaluate") {
    const auto dir = scratch_dir("ablate");
    auto cfg = tiny_config();
    const auto gen = cmd_phantom_gen(cfg, dir);
    CHECK(fs::exists(gen.manifest));

    const auto ckpt = cmd_finetune(cfg, gen.manifest, std::nullopt, dir / "single");
    const auto report = cmd_evaluate(cfg, ckpt, gen.manifest, std::nullopt, dir / "single");

    const auto rows = cmd_ablate(cfg, gen.manifest, dir / "grid");
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].decoder == "MAE_DEC");
    CHECK(rows[0].report.dice.mean == doctest::Approx(report.dice.mean).epsilon(1e-9));
    CHECK(rows[0].report.cases.size() == report.cases.size());
    CHECK(fs::exists(dir / "grid" / "ablation.csv"));
    fs::remove_all(dir);
}
