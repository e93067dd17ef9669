#include "calcseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "calcseg/errors.hpp"
#include "calcseg/eval.hpp"
#include "calcseg/mae.hpp"
#include "calcseg/optim.hpp"
#include "calcseg/rng.hpp"

namespace calcseg {

namespace {

struct Stacked {
    torch::Tensor volumes;  // standardized [M, Z, Y, X]
    torch::Tensor labels;   // float [M, Z, Y, X]
};

Stacked stack_cases(const std::vector<LabeledCase>& cases, int64_t p) {
    std::vector<torch::Tensor> vols, labs;
    for (const auto& c : cases) {
        if (c.label.sizes() != c.volume.data.sizes()) {
            throw ShapeError("label of case '" + c.volume.id + "' does not match its volume dims");
        }
        auto [v, pad] = pad_to_multiple(c.volume.data, p, kHuFloor);
        auto [l, pad2] = pad_to_multiple(c.label.to(torch::kFloat32), p, 0.0f);
        if (!vols.empty() && v.sizes() != vols.front().sizes()) {
            throw ShapeError("case '" + c.volume.id + "' has dims " + to_string(c.volume.dims()) +
                             " which differ from the rest of the training set");
        }
        vols.push_back(standardize_hu(v));
        labs.push_back(l);
    }
    return {torch::stack(vols), torch::stack(labs)};
}

std::vector<int64_t> epoch_order(int64_t n, uint64_t seed, int64_t epoch) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed({seed, static_cast<uint64_t>(epoch), 0xF17E7ull}));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

nlohmann::json finetune_fingerprint(const FinetuneRunConfig& cfg) {
    auto fp = to_json(cfg.encoder);
    fp["kind"] = "finetune";
    fp["seed"] = cfg.seed;
    fp["git_describe"] = git_describe();
    fp["decoder"] = to_json(cfg.decoder);
    fp["finetune_run"] = run_settings_json(cfg);
    fp["pretrained_from"] = cfg.pretrained ? cfg.pretrained->fingerprint : nlohmann::json(nullptr);
    return fp;
}

}  // namespace

nlohmann::json to_json(const SegLossConfig& c) {
    return {{"dice_weight", c.dice_weight},       {"bce_weight", c.bce_weight},
            {"pos_weight_min", c.pos_weight_min}, {"pos_weight_max", c.pos_weight_max},
            {"dice_smooth", c.dice_smooth}};
}

nlohmann::json run_settings_json(const FinetuneRunConfig& c) {
    return {{"loss", to_json(c.loss)},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"encoder_lr_multiplier", c.encoder_lr_multiplier},
            {"weight_decay", c.weight_decay},
            {"warmup_fraction", c.warmup_fraction},
            {"patience", c.patience},
            {"seed", c.seed},
            {"include_empty_labels", c.include_empty_labels},
            {"init", c.pretrained ? "pretrained" : "random"}};
}

nlohmann::json to_json(const FinetuneEpochRecord& r) {
    return {{"epoch", r.epoch},
            {"train_loss", r.train_loss},
            {"dev_dice", r.dev_dice ? nlohmann::json(*r.dev_dice) : nlohmann::json(nullptr)},
            {"lr", r.lr},
            {"wall_time", r.wall_time}};
}

double positive_weight(const torch::Tensor& labels, const SegLossConfig& cfg) {
    const double fg = (labels != 0).sum().item<double>();
    const double bg = static_cast<double>(labels.numel()) - fg;
    if (fg == 0.0) return cfg.pos_weight_max;
    return std::clamp(bg / fg, cfg.pos_weight_min, cfg.pos_weight_max);
}

torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& target, double pos_weight,
                                const SegLossConfig& cfg) {
    if (logits.sizes() != target.sizes()) throw ShapeError("logits and target shapes differ");
    const auto t = target.to(logits.dtype());
    std::vector<int64_t> dims(static_cast<size_t>(logits.dim() - 1));
    std::iota(dims.begin(), dims.end(), 1);
    auto prob = torch::sigmoid(logits);
    auto inter = (prob * t).sum(dims);
    auto denom = prob.sum(dims) + t.sum(dims);
    auto soft_dice = 1.0 - (2.0 * inter + cfg.dice_smooth) / (denom + cfg.dice_smooth);
    auto pw = torch::full({1}, pos_weight, logits.options());
    auto bce = torch::binary_cross_entropy_with_logits(logits, t, {}, pw);
    return cfg.dice_weight * soft_dice.mean() + cfg.bce_weight * bce;
}

void check_pretrained_compatible(const EncoderConfig& enc, const Checkpoint& pretrained) {
    if (pretrained.fingerprint.value("kind", "") != "pretrain") {
        throw FingerprintMismatch("initialisation checkpoint is not a pre-training checkpoint: " +
                                  pretrained.fingerprint.dump());
    }
    require_compatible(to_json(enc), pretrained.fingerprint, {"/patch_size", "/embed_dim", "/depth", "/heads"});
}

torch::Tensor predict(SegmentationModel& model, const Volume& volume) {
    torch::NoGradGuard no_grad;
    const bool was_training = model->is_training();
    model->eval();
    const int64_t p = model->encoder->config().patch_size;
    auto [padded, pad] = pad_to_multiple(volume.data, p, kHuFloor);
    auto logits = model->forward(standardize_hu(padded).unsqueeze(0)).squeeze(0);
    if (was_training) model->train();
    return crop_padding(torch::sigmoid(logits), pad).contiguous();
}

double mean_dice(SegmentationModel& model, const std::vector<LabeledCase>& cases) {
    double sum = 0.0;
    int64_t n = 0;
    for (const auto& c : cases) {
        if ((c.label != 0).sum().item<int64_t>() == 0) continue;
        sum += dice(predict(model, c.volume) >= 0.5, c.label);
        ++n;
    }
    if (n == 0) throw UndefinedMetricError("no case with a nonempty label");
    return sum / static_cast<double>(n);
}

Checkpoint make_finetune_checkpoint(SegmentationModel& model, const FinetuneRunConfig& cfg,
                                    const nlohmann::json& meta) {
    Checkpoint ckpt;
    ckpt.fingerprint = finetune_fingerprint(cfg);
    ckpt.weights = collect_weights(*model->encoder, "encoder.");
    for (auto& [k, v] : collect_weights(*model->decoder, "decoder.")) ckpt.weights.emplace(k, v);
    ckpt.meta = meta;
    return ckpt;
}

SegmentationModel load_segmentation_model(const Checkpoint& ckpt) {
    const auto& fp = ckpt.fingerprint;
    if (fp.value("kind", "") != "finetune") {
        throw FingerprintMismatch("checkpoint is not a fine-tuned segmentation model: " + fp.dump());
    }
    EncoderConfig enc;
    DecoderSpec spec;
    try {
        enc = encoder_config_from_json(fp);
        spec = decoder_spec_from_json(fp.at("decoder"));
    } catch (const nlohmann::json::exception& e) {
        throw FingerprintMismatch(std::string("fine-tune fingerprint is incomplete: ") + e.what());
    }
    auto model = build_segmentation_model(enc, spec, fp.value("seed", uint64_t{0}));
    assign_weights(*model->encoder, ckpt.weights, "encoder.");
    assign_weights(*model->decoder, ckpt.weights, "decoder.");
    model->eval();
    return model;
}

FinetuneResult finetune(const std::vector<LabeledCase>& train_in, const std::vector<LabeledCase>& dev,
                        const FinetuneRunConfig& cfg, const FinetuneOptions& options) {
    validate(cfg.encoder);
    if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(cfg.lr > 0.0)) throw ConfigError("lr must be positive");
    if (cfg.patience < 0) throw ConfigError("patience must be >= 0");
    if (cfg.pretrained) check_pretrained_compatible(cfg.encoder, *cfg.pretrained);

    std::vector<LabeledCase> train;
    for (const auto& c : train_in) {
        if (c.label.sizes() != c.volume.data.sizes()) {
            throw ShapeError("label of case '" + c.volume.id + "' does not match its volume dims");
        }
        if (cfg.include_empty_labels || (c.label != 0).any().item<bool>()) train.push_back(c);
    }
    if (train.empty()) throw ConfigError("no training case with a nonempty label");

    const int64_t p = cfg.encoder.patch_size;
    const Stacked data = stack_cases(train, p);
    const int64_t M = data.volumes.size(0);
    const double pos_weight = positive_weight(data.labels, cfg.loss);

    auto model = build_segmentation_model(cfg.encoder, cfg.decoder, cfg.seed);
    if (cfg.pretrained) assign_weights(*model->encoder, cfg.pretrained->weights, "encoder.");
    if (options.on_start) options.on_start(model);

    GroupedAdamW opt({{named_params(*model->encoder, "encoder."), cfg.encoder_lr_multiplier},
                      {named_params(*model->decoder, "decoder."), 1.0}},
                     cfg.weight_decay, {0.9, 0.999});

    const int64_t steps_per_epoch = (M + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t total_steps = steps_per_epoch * cfg.epochs;
    const auto t0 = std::chrono::steady_clock::now();

    FinetuneResult result;
    TensorMap best_weights;
    int64_t since_best = 0;
    int64_t epochs_run = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        model->train();
        const auto order = epoch_order(M, cfg.seed, epoch);
        double sum = 0.0;
        double lr = 0.0;
        for (int64_t s = 0; s < steps_per_epoch; ++s) {
            const int64_t lo = s * cfg.batch_size;
            const int64_t hi = std::min(M, lo + cfg.batch_size);
            auto idx = torch::tensor(std::vector<int64_t>(order.begin() + lo, order.begin() + hi), torch::kInt64);
            lr = warmup_cosine_lr(cfg.lr, epoch * steps_per_epoch + s, total_steps, cfg.warmup_fraction);
            opt.set_lr(lr);
            auto logits = model->forward(data.volumes.index_select(0, idx));
            auto loss = segmentation_loss(logits, data.labels.index_select(0, idx), pos_weight, cfg.loss);
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                std::ostringstream os;
                os << "non-finite fine-tuning loss at epoch " << epoch << ", batch " << s << " (cases";
                for (int64_t i = lo; i < hi; ++i) os << ' ' << train[static_cast<size_t>(order[i])].volume.id;
                os << ")";
                throw TrainingError(os.str());
            }
            opt.zero_grad();
            loss.backward();
            opt.step();
            sum += value;
        }
        epochs_run = epoch + 1;

        FinetuneEpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = sum / static_cast<double>(steps_per_epoch);
        rec.lr = lr;
        bool improved = dev.empty();
        if (!dev.empty()) {
            rec.dev_dice = mean_dice(model, dev);
            improved = !result.best_dev_dice || *rec.dev_dice > *result.best_dev_dice;
            if (improved) result.best_dev_dice = rec.dev_dice;
        }
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(rec);
        if (options.on_epoch) options.on_epoch(rec);

        if (improved) {
            best_weights = collect_weights(*model, "");
            result.best_epoch = epoch;
            since_best = 0;
        } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
            break;
        }
    }

    assign_weights(*model, best_weights, "");
    model->eval();
    result.model = model;
    result.checkpoint = make_finetune_checkpoint(
        model, cfg,
        {{"best_epoch", result.best_epoch},
         {"best_dev_dice", result.best_dev_dice ? nlohmann::json(*result.best_dev_dice) : nlohmann::json(nullptr)},
         {"epochs_run", epochs_run},
         {"pos_weight", pos_weight}});
    return result;
}

}  // namespace calcseg
