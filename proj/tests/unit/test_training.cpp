#include <cmath>

#include "calcseg/data.hpp"
#include "calcseg/errors.hpp"
#include "calcseg/eval.hpp"
#include "calcseg/mae.hpp"
#include "calcseg/training.hpp"

#include <doctest.h>

using namespace calcseg;

namespace {

std::vector<LabeledCase> phantom_cases(int count, int offset = 0) {
    PhantomConfig pc;
    pc.seed = 31;
    std::vector<LabeledCase> out;
    for (int i = 0; i < count; ++i) {
        auto ph = generate_phantom(pc, offset + i);
        out.push_back({ph.volume, ph.label});
    }
    return out;
}

FinetuneRunConfig small_run(DecoderKind kind = DecoderKind::MaeDec) {
    FinetuneRunConfig cfg;
    cfg.encoder = encoder_config("ViTiac-S", 8);
    cfg.decoder.kind = kind;
    cfg.epochs = 3;
    cfg.seed = 4;
    return cfg;
}

Checkpoint small_pretrain(int64_t p) {
    std::vector<Volume> vols;
    for (auto& c : phantom_cases(4, 100)) vols.push_back(c.volume);
    PretrainRunConfig run;
    run.epochs = 1;
    run.seed = 3;
    auto enc = encoder_config("ViTiac-S", p);
    return pretrain(vols, enc, default_mae_decoder(enc), run).checkpoint;
}

}  // namespace

TEST_CASE("positive weight and loss") {
    SegLossConfig cfg;
    auto labels = torch::zeros({1, 4, 5}, torch::kUInt8);
    labels[0][0][0] = 1;
    CHECK(positive_weight(labels, cfg) == 19.0);
    CHECK(positive_weight(torch::ones({3, 3}), cfg) == 1.0);
    auto sparse = torch::zeros({1000}, torch::kUInt8);
    sparse[0] = 1;
    CHECK(positive_weight(sparse, cfg) == 100.0);

    // Perfect confident logits give a near-zero loss; reversed ones a large one.
    auto target = torch::zeros({1, 2, 2, 2});
    target[0][0][0][0] = 1;
    auto good = (target * 2 - 1) * 30;
    auto bad = -good;
    CHECK(segmentation_loss(good, target, 7.0, cfg).item<double>() < 1e-3);
    CHECK(segmentation_loss(bad, target, 7.0, cfg).item<double>() > 5.0);

    // Hand computation at zero logits: BCE = log 2 weighted, soft Dice = 1 - (2*0.5*1 + 1) / (4 + 1 + 1).
    auto zero = torch::zeros({1, 2, 2, 2});
    const double bce = (7.0 * std::log(2.0) + 7 * std::log(2.0)) / 8;
    const double sd = 1.0 - (2 * 0.5 + 1.0) / (4.0 + 1.0 + 1.0);
    CHECK(segmentation_loss(zero, target, 7.0, cfg).item<double>() == doctest::Approx(0.5 * sd + 0.5 * bce));
    CHECK_THROWS_AS(segmentation_loss(zero, torch::zeros({1, 2, 2}), 1.0, cfg), ShapeError);
}

TEST_CASE("prediction contracts") {
    auto model = build_segmentation_model(encoder_config("ViTiac-S", 4), DecoderSpec{}, 0);
    model->decoder->zero_output_layer();
    auto vol = make_volume(torch::randn({60, 60, 60}) * 300, {0.5, 0.5, 0.5}, "odd");
    auto prob = predict(model, vol);
    CHECK(prob.sizes() == torch::IntArrayRef({60, 60, 60}));
    CHECK((prob - 0.5).abs().max().item<double>() == 0.0);

    auto model2 = build_segmentation_model(encoder_config("ViTiac-S", 8), DecoderSpec{DecoderKind::Upscale}, 1);
    auto prob2 = predict(model2, make_volume(torch::randn({13, 20, 9}) * 500, {1, 1, 1}, "tiny"));
    CHECK(prob2.sizes() == torch::IntArrayRef({13, 20, 9}));
    CHECK(prob2.min().item<double>() >= 0.0);
    CHECK(prob2.max().item<double>() <= 1.0);
}

TEST_CASE("development evaluation leaves weights untouched") {
    auto cases = phantom_cases(3);
    auto model = build_segmentation_model(encoder_config("ViTiac-S", 8), DecoderSpec{}, 2);
    const auto before = parameter_checksum(*model);
    const double d = mean_dice(model, cases);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(parameter_checksum(*model) == before);
}

TEST_CASE("fine-tuning is deterministic and keeps the best epoch") {
    auto train = phantom_cases(3);
    auto dev = phantom_cases(2, 10);
    auto cfg = small_run();
    auto a = finetune(train, dev, cfg);
    auto b = finetune(train, dev, cfg);
    CHECK(parameter_checksum(*a.model) == parameter_checksum(*b.model));
    REQUIRE(a.history.size() == 3);
    double best = -1;
    for (const auto& r : a.history) {
        REQUIRE(r.dev_dice.has_value());
        best = std::max(best, *r.dev_dice);
        CHECK(std::isfinite(r.train_loss));
        CHECK(r.lr > 0.0);
    }
    CHECK(*a.best_dev_dice == best);
    CHECK(a.history[static_cast<size_t>(a.best_epoch)].dev_dice == best);
    CHECK(mean_dice(a.model, dev) == doctest::Approx(best).epsilon(1e-12));
    CHECK(a.checkpoint.fingerprint["kind"] == "finetune");
    CHECK(a.checkpoint.meta["epochs_run"] == 3);

    auto reloaded = load_segmentation_model(a.checkpoint);
    CHECK(parameter_checksum(*reloaded) == parameter_checksum(*a.model));
    auto no_dev = finetune(train, {}, cfg);
    CHECK(no_dev.best_epoch == 2);
    CHECK_FALSE(no_dev.best_dev_dice.has_value());
}

TEST_CASE("early stopping honours patience") {
    auto train = phantom_cases(2);
    auto cfg = small_run(DecoderKind::Upscale);
    cfg.epochs = 12;
    cfg.patience = 2;
    cfg.lr = 1e-9;  // nothing improves after the first epoch
    auto r = finetune(train, train, cfg);
    CHECK(r.history.size() < 12);
    CHECK(r.history.size() == static_cast<size_t>(r.best_epoch + 3));
}

TEST_CASE("empty labels are excluded unless requested") {
    auto train = phantom_cases(2);
    LabeledCase empty{train[0].volume, torch::zeros_like(train[0].label)};
    auto cfg = small_run();
    cfg.epochs = 1;
    CHECK_THROWS_AS(finetune({empty}, {}, cfg), ConfigError);
    cfg.include_empty_labels = true;
    auto r = finetune({empty, train[1]}, {}, cfg);
    CHECK(r.checkpoint.meta["pos_weight"].get<double>() > 1.0);
    LabeledCase wrong{train[0].volume, torch::zeros({2, 2, 2}, torch::kUInt8)};
    CHECK_THROWS_AS(finetune({wrong}, {}, cfg), ShapeError);
}

TEST_CASE("pre-trained encoder weights are loaded before the first step") {
    auto ckpt = small_pretrain(8);
    auto cfg = small_run();
    cfg.epochs = 1;
    cfg.pretrained = ckpt;
    auto pre = load_pretrained(ckpt);
    const auto enc_sum = parameter_checksum(*pre->encoder);
    const auto mae_dec_sum = parameter_checksum(*pre->decoder);
    bool checked = false;
    FinetuneOptions opt;
    opt.on_start = [&](SegmentationModel& m) {
        CHECK(parameter_checksum(*m->encoder) == enc_sum);
        for (auto& [key, w] : collect_weights(*m->encoder, "encoder.")) CHECK(torch::equal(w, ckpt.weights.at(key)));
        // The segmentation decoder starts from fresh weights, not the reconstruction decoder.
        CHECK(parameter_checksum(*m->decoder) != mae_dec_sum);
        checked = true;
    };
    auto r = finetune(phantom_cases(2), {}, cfg, opt);
    CHECK(checked);
    CHECK(r.checkpoint.fingerprint["pretrained_from"]["kind"] == "pretrain");
}

TEST_CASE("fingerprint mismatches refuse to start") {
    auto ckpt = small_pretrain(8);
    auto cfg = small_run();
    cfg.encoder = encoder_config("ViTiac-S", 4);
    cfg.pretrained = ckpt;
    try {
        finetune(phantom_cases(1), {}, cfg);
        FAIL("expected FingerprintMismatch");
    } catch (const FingerprintMismatch& e) {
        const std::string msg = e.what();
        CHECK(msg.find("patch_size") != std::string::npos);
        CHECK(msg.find('4') != std::string::npos);
        CHECK(msg.find('8') != std::string::npos);
    }
    auto cfg2 = small_run();
    cfg2.encoder = encoder_config("ViTiac-M", 8);
    CHECK_THROWS_AS(check_pretrained_compatible(cfg2.encoder, ckpt), FingerprintMismatch);

    auto fine = finetune(phantom_cases(1), {}, [] {
        auto c = small_run();
        c.epochs = 1;
        return c;
    }());
    CHECK_THROWS_AS(load_pretrained(fine.checkpoint), FingerprintMismatch);
    CHECK_THROWS_AS(load_segmentation_model(ckpt), FingerprintMismatch);
    auto cfg3 = small_run();
    cfg3.pretrained = fine.checkpoint;
    CHECK_THROWS_AS(finetune(phantom_cases(1), {}, cfg3), FingerprintMismatch);
}

TEST_CASE("checkpoints survive the disk") {
    auto cfg = small_run();
    cfg.epochs = 1;
    auto r = finetune(phantom_cases(1), {}, cfg);
    const auto path = std::filesystem::temp_directory_path() / ("calcseg_ft_" + std::to_string(::getpid()) + ".ckpt");
    save_checkpoint(r.checkpoint, path);
    auto back = load_checkpoint(path);
    CHECK(back.fingerprint == r.checkpoint.fingerprint);
    CHECK(back.meta == r.checkpoint.meta);
    auto model = load_segmentation_model(back);
    CHECK(parameter_checksum(*model) == parameter_checksum(*r.model));
    std::filesystem::remove(path);
}
