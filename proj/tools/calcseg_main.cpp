// calcseg: phantom generation, MAE pre-training, fine-tuning, calibration,
// evaluation, ablation grids and feature dumps from one entry point.

#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "calcseg/errors.hpp"
#include "calcseg/log.hpp"
#include "calcseg/pipeline.hpp"

using namespace calcseg;
using json = nlohmann::json;

namespace {

struct Globals {
    std::optional<int64_t> seed;
    std::string config;
    std::string out_dir = "calcseg_run";
    std::optional<std::string> device;
    std::vector<std::string> overrides;
};

int exit_code_for(const Error& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const ParseError*>(&e)) return 3;
    if (dynamic_cast<const FingerprintMismatch*>(&e)) return 4;
    if (dynamic_cast<const TrainingError*>(&e)) return 5;
    return 1;
}

void report_error(const std::string& command, const std::string& kind, const std::string& message,
                  const std::string& out_dir) {
    const json j = {{"status", "error"}, {"command", command}, {"error", kind}, {"message", message}};
    std::cerr << j.dump() << std::endl;
    if (!out_dir.empty() && fs::exists(out_dir)) std::ofstream(fs::path(out_dir) / "error.json") << j.dump(2) << "\n";
}

RunConfig resolve(const Globals& g) {
    RunConfig cfg = default_run_config();
    if (!g.config.empty()) {
        merge_config_file(cfg, g.config);
        log_info("config file " + g.config + " loaded; flags take precedence over it");
    }
    for (const auto& o : g.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
        apply_override(cfg, o.substr(0, eq), o.substr(eq + 1));
    }
    if (g.seed) apply_override(cfg, "seed", std::to_string(*g.seed));
    if (g.device) apply_override(cfg, "device", *g.device);
    validate(cfg);
    return cfg;
}

json list_json(const std::vector<std::string>& v) {
    json out = json::array();
    for (const auto& s : v) out.push_back(s);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked-autoencoder pre-training and segmentation of synthetic CT phantoms"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--seed", g.seed, "Global seed (data, weights, batch order, bootstrap)");
    app.add_option("--config", g.config, "YAML config file")->check(CLI::ExistingFile);
    app.add_option("--out-dir", g.out_dir, "Run directory receiving every output")->capture_default_str();
    app.add_option("--device", g.device, "Compute device (cpu)");
    app.add_option("--set", g.overrides, "Config override key=value, e.g. training.epochs=40 (repeatable)");

    std::string manifest, checkpoint, pretrained, calibration, case_id;
    bool from_scratch = false;
    std::vector<std::string> stages, encoders, decoders, modes;
    std::vector<int64_t> patch_sizes;
    std::string init;

    auto* gen = app.add_subcommand("phantom_gen", "Generate phantoms, labels and a split manifest");

    auto* pre = app.add_subcommand("pretrain", "MAE pre-training on the manifest's pre-training pool");
    pre->add_option("--manifest", manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);

    auto* ft = app.add_subcommand("finetune", "Fine-tune encoder + decoder on the finetune split");
    ft->add_option("--manifest", manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
    auto* pre_opt = ft->add_option("--pretrained", pretrained, "Pre-training checkpoint")->check(CLI::ExistingFile);
    auto* scratch_opt = ft->add_flag("--from-scratch", from_scratch, "Random encoder initialisation");
    pre_opt->excludes(scratch_opt);

    auto* cal = app.add_subcommand("calibrate", "Pick the volume-calibrated threshold on the dev split");
    cal->add_option("--checkpoint", checkpoint, "Fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
    cal->add_option("--manifest", manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);

    auto* ev = app.add_subcommand("evaluate", "Metrics, bootstrap CIs, Bland-Altman and risk groups on the test split");
    ev->add_option("--checkpoint", checkpoint, "Fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--manifest", manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
    ev->add_option("--calibration", calibration, "calibration.json (threshold 0.5 when absent)")
        ->check(CLI::ExistingFile);

    auto* ab = app.add_subcommand("ablate", "Fine-tune and evaluate every cell of a decoder x encoder x patch grid");
    ab->add_option("--manifest", manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
    ab->add_option("--encoders", encoders, "Encoder sizes (ViTiac-S, ViTiac-M, ViTiac-L)")->delimiter(',');
    ab->add_option("--patch-sizes", patch_sizes, "Patch sizes")->delimiter(',');
    ab->add_option("--decoders", decoders, "UNETR, SFPN_UNET, UPSCALE, MAE_DEC")->delimiter(',');
    ab->add_option("--upsample-modes", modes, "NN_INTERP_CONV, TRANSPOSED")->delimiter(',');
    ab->add_option("--init", init, "scratch or pretrain");

    auto* dump = app.add_subcommand("dump_features", "Write per-stage decoder feature maps of one case");
    dump->add_option("--checkpoint", checkpoint, "Fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
    dump->add_option("--manifest", manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
    dump->add_option("--case", case_id, "Case id")->required();
    dump->add_option("--stages", stages, "Stages to dump (default: all)")->delimiter(',');

    std::string command = "calcseg";
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        report_error(command, "usage_error", e.what(), "");
        return 2;
    }
    command = app.get_subcommands().front()->get_name();

    try {
        RunConfig cfg = resolve(g);
        const fs::path out(g.out_dir);
        if (command == "ablate") {
            auto list = [&](const std::string& key, const json& value) {
                apply_override(cfg, key, value.dump());
            };
            if (!encoders.empty()) list("ablate.encoders", list_json(encoders));
            if (!decoders.empty()) list("ablate.decoders", list_json(decoders));
            if (!modes.empty()) list("ablate.upsample_modes", list_json(modes));
            if (!patch_sizes.empty()) list("ablate.patch_sizes", json(patch_sizes));
            if (!init.empty()) apply_override(cfg, "ablate.init", init);
            validate(cfg);
        }
        fs::create_directories(out);

        json inputs = {{"argv", json::array()}};
        for (int i = 0; i < argc; ++i) inputs["argv"].push_back(argv[i]);
        if (!manifest.empty()) inputs["manifest"] = fs::absolute(manifest).string();
        if (!checkpoint.empty()) inputs["checkpoint"] = fs::absolute(checkpoint).string();
        if (!pretrained.empty()) inputs["pretrained"] = fs::absolute(pretrained).string();
        if (!calibration.empty()) inputs["calibration"] = fs::absolute(calibration).string();
        record_run(cfg, command, inputs, out);

        json outputs;
        if (*gen) {
            auto r = cmd_phantom_gen(cfg, out);
            outputs["manifest"] = r.manifest.string();
            outputs["series"] = r.entries.entries.size();
        } else if (*pre) {
            outputs["checkpoint"] = cmd_pretrain(cfg, manifest, out).string();
            outputs["loss_log"] = (out / "pretrain_loss.jsonl").string();
        } else if (*ft) {
            if (pretrained.empty() && !from_scratch) {
                throw ConfigError("finetune needs --pretrained <checkpoint> or --from-scratch");
            }
            std::optional<fs::path> init_ckpt;
            if (!pretrained.empty()) init_ckpt = pretrained;
            outputs["checkpoint"] = cmd_finetune(cfg, manifest, init_ckpt, out).string();
            outputs["metrics_log"] = (out / "finetune_metrics.jsonl").string();
        } else if (*cal) {
            outputs["calibration"] = cmd_calibrate(cfg, checkpoint, manifest, out).string();
        } else if (*ev) {
            std::optional<fs::path> c;
            if (!calibration.empty()) c = calibration;
            auto report = cmd_evaluate(cfg, checkpoint, manifest, c, out);
            outputs["report"] = (out / "eval_report.json").string();
            outputs["bland_altman"] = (out / "bland_altman.svg").string();
            outputs["threshold"] = report.threshold;
            outputs["threshold_source"] = report.calibrated ? "calibrated" : "uncalibrated";
            outputs["dice"] = report.dice.mean;
        } else if (*ab) {
            auto rows = cmd_ablate(cfg, manifest, out);
            outputs["table"] = (out / "ablation.csv").string();
            outputs["cells"] = rows.size();
        } else if (*dump) {
            auto dumps = cmd_dump_features(cfg, checkpoint, manifest, case_id, stages, out);
            json files = json::array();
            for (const auto& d : dumps) files.push_back(d.file.string());
            outputs["files"] = files;
        }
        std::cout << json{{"status", "ok"}, {"command", command}, {"outputs", outputs}}.dump() << std::endl;
        return 0;
    } catch (const Error& e) {
        report_error(command, e.kind(), e.what(), g.out_dir);
        return exit_code_for(e);
    } catch (const std::exception& e) {
        report_error(command, "internal_error", e.what(), g.out_dir);
        return 1;
    }
}
