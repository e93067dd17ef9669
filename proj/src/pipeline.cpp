#include "calcseg/pipeline.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "calcseg/errors.hpp"
#include "calcseg/log.hpp"

namespace calcseg {

namespace {

using json = nlohmann::json;

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << text;
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw ConfigError(what + " '" + p.string() + "' does not exist");
}

DatasetManifest load_manifest(const fs::path& p) {
    require_file(p, "manifest");
    return read_manifest_csv(p);
}

std::vector<ManifestEntry> need(const DatasetManifest& m, Split s) {
    auto out = m.with_split(s);
    if (out.empty()) throw ConfigError("manifest has no '" + to_string(s) + "' series");
    return out;
}

SegmentationModel load_model(const fs::path& checkpoint) {
    require_file(checkpoint, "checkpoint");
    return load_segmentation_model(load_checkpoint(checkpoint));
}

std::vector<EvalCase> predict_cases(SegmentationModel& model, const std::vector<LabeledCase>& cases) {
    std::vector<EvalCase> out;
    for (const auto& c : cases) out.push_back({c.volume.id, predict(model, c.volume), c.label, c.volume.spacing});
    return out;
}

FinetuneResult run_finetune(const FinetuneRunConfig& ft, const DatasetManifest& m,
                            const fs::path& metrics_path) {
    const auto train = load_labeled_cases(need(m, Split::Finetune));
    const auto dev = load_labeled_cases(m.with_split(Split::Dev));
    fs::create_directories(metrics_path.parent_path());
    std::ofstream metrics(metrics_path);
    FinetuneOptions opt;
    opt.on_epoch = [&](const FinetuneEpochRecord& r) {
        metrics << to_json(r).dump() << '\n';
        metrics.flush();
        if (r.epoch % 10 == 0 || r.epoch + 1 == ft.epochs) {
            std::ostringstream os;
            os << "finetune epoch " << r.epoch << " loss " << r.train_loss;
            if (r.dev_dice) os << " dev dice " << *r.dev_dice;
            log_info(os.str());
        }
    };
    return finetune(train, dev, ft, opt);
}

EvalReport evaluate_checkpoint(const RunConfig& cfg, SegmentationModel& model, const DatasetManifest& m,
                               const std::optional<CalibrationResult>& cal, const fs::path& out_dir) {
    auto cases = predict_cases(model, load_labeled_cases(need(m, Split::Test)));
    const auto resamples = cfg.tree.at("eval").at("resamples").get<int64_t>();
    auto report = evaluate_cases(cases, cal, resamples, run_seed(cfg));
    fs::create_directories(out_dir);
    write_text(out_dir / "eval_report.json", to_json(report).dump(2) + "\n");
    write_eval_csv(report, out_dir / "eval_cases.csv");
    write_bland_altman_svg(report.bland_altman, out_dir / "bland_altman.svg",
                           std::string("Bland-Altman, threshold ") + (report.calibrated ? "calibrated" : "uncalibrated"));
    return report;
}

}  // namespace

void record_run(const RunConfig& cfg, const std::string& command, const json& inputs, const fs::path& out_dir) {
    const fs::path dir = out_dir / "config";
    write_text(dir / (command + ".yaml"), to_yaml(cfg.tree));
    write_text(dir / (command + ".provenance.json"), provenance_json(cfg).dump(2) + "\n");
    json run = {{"command", command},
                {"seed", run_seed(cfg)},
                {"inputs", inputs},
                {"git_describe", git_describe()},
                {"started_utc", utc_now()}};
    write_text(dir / (command + ".run.json"), run.dump(2) + "\n");
}

std::vector<LabeledCase> load_labeled_cases(const std::vector<ManifestEntry>& entries) {
    std::vector<LabeledCase> out;
    for (const auto& e : entries) {
        Volume v = read_volume(e.path);
        v.id = e.case_id;
        v.patient_id = e.patient_id;
        auto label = read_mask(label_path_for(e.path));
        if (label.sizes() != v.data.sizes()) {
            throw ShapeError("label of '" + e.case_id + "' does not match its volume dims");
        }
        out.push_back({std::move(v), std::move(label)});
    }
    return out;
}

PhantomGenResult cmd_phantom_gen(const RunConfig& cfg, const fs::path& out_dir) {
    validate(cfg);
    const auto pc = phantom_config(cfg);
    const auto& data = cfg.tree.at("data");
    const auto patients = data.at("patients").get<int64_t>();
    const auto series = data.at("series_per_patient").get<int64_t>();
    const auto vendors = data.at("manufacturers").get<int64_t>();
    const std::string ext = data.at("format").get<std::string>() == "raw" ? ".raw" : ".nii";

    DatasetManifest manifest;
    std::set<std::string> empty;
    for (int64_t p = 0; p < patients; ++p) {
        for (int64_t s = 0; s < series; ++s) {
            std::ostringstream id, pid;
            pid << "P" << std::setw(3) << std::setfill('0') << p;
            id << pid.str() << "_S" << s;
            auto ph = generate_phantom(pc, p * series + s);
            ph.volume.id = id.str();
            ph.volume.patient_id = pid.str();
            const fs::path rel = fs::path("data") / (id.str() + ext);
            write_volume(ph.volume, out_dir / rel);
            write_mask(ph.label, ph.volume.spacing, label_path_for(out_dir / rel));
            if (ph.label.sum().item<int64_t>() == 0) empty.insert(id.str());
            manifest.entries.push_back(
                {id.str(), pid.str(), rel.string(), Split::Unassigned, "M" + std::to_string(p % vendors),
                 ph.slice_thickness_mm});
        }
    }
    PhantomGenResult r;
    r.entries = split_by_patient(manifest, split_config(cfg), empty);
    r.manifest = out_dir / "manifest.csv";
    write_manifest_csv(r.entries, r.manifest);
    std::ostringstream os;
    os << "generated " << manifest.entries.size() << " phantoms: " << r.entries.with_split(Split::Pretrain).size()
       << " pretrain, " << r.entries.with_split(Split::Finetune).size() << " finetune, "
       << r.entries.with_split(Split::Dev).size() << " dev, " << r.entries.with_split(Split::Test).size() << " test";
    log_info(os.str());
    return r;
}

fs::path cmd_pretrain(const RunConfig& cfg, const fs::path& manifest, const fs::path& out_dir) {
    validate(cfg);
    const auto m = load_manifest(manifest);
    const auto pool = m.pretrain_pool();
    if (pool.empty()) throw ConfigError("manifest has no pre-training series");
    std::vector<Volume> volumes;
    for (const auto& e : pool) volumes.push_back(read_volume(e.path));

    const auto enc = encoder_from_config(cfg);
    const auto run = pretrain_from_config(cfg);
    fs::create_directories(out_dir / "checkpoints");
    std::ofstream log(out_dir / "pretrain_loss.jsonl");
    PretrainOptions opt;
    opt.on_step = [&](const LossRecord& r) { log << to_json(r).dump() << '\n'; };
    auto result = pretrain(volumes, enc, mae_decoder_from_config(cfg, enc), run, opt);
    for (size_t e = 0; e < result.epoch_losses.size(); e += 10) {
        log_info("pretrain epoch " + std::to_string(e) + " loss " + std::to_string(result.epoch_losses[e]));
    }
    const fs::path ckpt = out_dir / "checkpoints" / "pretrain.ckpt";
    save_checkpoint(result.checkpoint, ckpt);
    return ckpt;
}

fs::path cmd_finetune(const RunConfig& cfg, const fs::path& manifest, const std::optional<fs::path>& pretrained,
                      const fs::path& out_dir) {
    validate(cfg);
    const auto m = load_manifest(manifest);
    auto ft = finetune_from_config(cfg);
    if (pretrained) {
        require_file(*pretrained, "pre-trained checkpoint");
        ft.pretrained = load_checkpoint(*pretrained);
    }
    auto result = run_finetune(ft, m, out_dir / "finetune_metrics.jsonl");
    const fs::path ckpt = out_dir / "checkpoints" / "finetune.ckpt";
    save_checkpoint(result.checkpoint, ckpt);
    return ckpt;
}

fs::path cmd_calibrate(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& manifest,
                       const fs::path& out_dir) {
    validate(cfg);
    auto model = load_model(checkpoint);
    const auto m = load_manifest(manifest);
    auto cases = load_labeled_cases(need(m, Split::Dev));
    std::vector<torch::Tensor> probs, gts;
    std::vector<Spacing> spacings;
    for (const auto& c : cases) {
        probs.push_back(predict(model, c.volume));
        gts.push_back(c.label);
        spacings.push_back(c.volume.spacing);
    }
    const auto r = calibrate_threshold(probs, gts, spacings);
    std::ostringstream os;
    os << "calibrated threshold " << r.threshold << ": mean |dV| " << r.mean_abs_dv_before << " -> "
       << r.mean_abs_dv_after << " mm^3";
    log_info(os.str());
    const fs::path path = out_dir / "calibration.json";
    write_text(path, to_json(r).dump(2) + "\n");
    return path;
}

EvalReport cmd_evaluate(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& manifest,
                        const std::optional<fs::path>& calibration, const fs::path& out_dir) {
    validate(cfg);
    auto model = load_model(checkpoint);
    const auto m = load_manifest(manifest);
    std::optional<CalibrationResult> cal;
    if (calibration) {
        require_file(*calibration, "calibration file");
        std::ifstream in(*calibration);
        json j;
        try {
            in >> j;
        } catch (const json::parse_error& e) {
            throw ParseError("calibration file '" + calibration->string() + "': " + e.what(), e.byte);
        }
        cal = calibration_from_json(j);
    }
    auto report = evaluate_checkpoint(cfg, model, m, cal, out_dir);
    std::ostringstream os;
    os << "test dice " << report.dice.mean << " [" << report.dice.lo << ", " << report.dice.hi << "] at threshold "
       << report.threshold << (report.calibrated ? " (calibrated)" : " (uncalibrated)");
    log_info(os.str());
    return report;
}

std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const fs::path& manifest, const fs::path& out_dir) {
    validate(cfg);
    const auto m = load_manifest(manifest);
    const auto& grid = cfg.tree.at("ablate");
    const std::string init = grid.at("init").get<std::string>();
    std::map<std::pair<std::string, int64_t>, Checkpoint> pretrained;
    std::vector<AblationRow> rows;
    for (const auto& enc_name : grid.at("encoders")) {
        for (const auto& p : grid.at("patch_sizes")) {
            for (const auto& dec_name : grid.at("decoders")) {
                for (const auto& mode_name : grid.at("upsample_modes")) {
                    RunConfig cell = cfg;
                    apply_override(cell, "encoder.name", enc_name.get<std::string>(), "ablate");
                    apply_override(cell, "encoder.patch_size", std::to_string(p.get<int64_t>()), "ablate");
                    apply_override(cell, "decoder.kind", dec_name.get<std::string>(), "ablate");
                    apply_override(cell, "decoder.upsample_mode", mode_name.get<std::string>(), "ablate");
                    auto ft = finetune_from_config(cell);
                    // MAE_DEC has no upsampling; run it once per (encoder, patch size).
                    if (ft.decoder.kind == DecoderKind::MaeDec && mode_name != grid.at("upsample_modes").front()) {
                        continue;
                    }
                    const std::string tag = to_string(ft.decoder.kind) +
                                            (ft.decoder.kind == DecoderKind::MaeDec ? "" : "_" + to_string(ft.decoder.upsample)) +
                                            "_" + ft.encoder.name + "_p" + std::to_string(ft.encoder.patch_size);
                    const fs::path cell_dir = out_dir / "ablate" / tag;
                    if (init == "pretrain") {
                        const auto key = std::make_pair(ft.encoder.name, ft.encoder.patch_size);
                        if (!pretrained.count(key)) {
                            const auto ckpt = cmd_pretrain(cell, manifest, out_dir / "ablate" /
                                                                               ("pretrain_" + ft.encoder.name + "_p" +
                                                                                std::to_string(ft.encoder.patch_size)));
                            pretrained.emplace(key, load_checkpoint(ckpt));
                        }
                        ft.pretrained = pretrained.at(key);
                    }
                    log_info("ablate cell " + tag);
                    auto result = run_finetune(ft, m, cell_dir / "finetune_metrics.jsonl");
                    save_checkpoint(result.checkpoint, cell_dir / "finetune.ckpt");
                    AblationRow row;
                    row.decoder = to_string(ft.decoder.kind);
                    row.upsample_mode = ft.decoder.kind == DecoderKind::MaeDec ? "none" : to_string(ft.decoder.upsample);
                    row.encoder = ft.encoder.name;
                    row.patch_size = ft.encoder.patch_size;
                    row.init = init;
                    row.report = evaluate_checkpoint(cell, result.model, m, std::nullopt, cell_dir);
                    rows.push_back(std::move(row));
                    write_ablation_csv(rows, out_dir / "ablation.csv");
                }
            }
        }
    }
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const fs::path& path) {
    std::ostringstream out;
    out.precision(10);
    out << "decoder,encoder,patch_size,dice,dice_lo,dice_hi,precision,recall,precision_lo,precision_hi,recall_lo,"
           "recall_hi,abs_volume_diff_mm3,threshold,upsample_mode,init,cases\n";
    for (const auto& r : rows) {
        const auto& e = r.report;
        out << r.decoder << ',' << r.encoder << ',' << r.patch_size << ',' << e.dice.mean << ',' << e.dice.lo << ','
            << e.dice.hi << ',' << e.precision.mean << ',' << e.recall.mean << ',' << e.precision.lo << ','
            << e.precision.hi << ',' << e.recall.lo << ',' << e.recall.hi << ',' << e.abs_volume_diff.mean << ','
            << e.threshold << ',' << r.upsample_mode << ',' << r.init << ',' << e.cases.size() << '\n';
    }
    write_text(path, out.str());
}

std::vector<FeatureDump> cmd_dump_features(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& manifest,
                                           const std::string& case_id, const std::vector<std::string>& stages,
                                           const fs::path& out_dir) {
    validate(cfg);
    auto model = load_model(checkpoint);
    const auto m = load_manifest(manifest);
    for (const auto& e : m.entries) {
        if (e.case_id != case_id) continue;
        auto vol = read_volume(e.path);
        return dump_feature_maps(model, vol, stages, out_dir / "features" / case_id);
    }
    throw ConfigError("case '" + case_id + "' is not in manifest '" + manifest.string() + "'");
}

}  // namespace calcseg
