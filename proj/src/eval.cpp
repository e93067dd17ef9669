#include "calcseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "calcseg/errors.hpp"
#include "calcseg/log.hpp"

namespace calcseg {

namespace {

struct Overlap {
    int64_t tp = 0;
    int64_t pred = 0;
    int64_t gt = 0;
};

Overlap overlap(const torch::Tensor& pred, const torch::Tensor& gt) {
    if (pred.sizes() != gt.sizes()) throw ShapeError("prediction and ground-truth masks differ in shape");
    auto p = pred.to(torch::kCPU) != 0;
    auto g = gt.to(torch::kCPU) != 0;
    return {p.logical_and(g).sum().item<int64_t>(), p.sum().item<int64_t>(), g.sum().item<int64_t>()};
}

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

}  // namespace

double dice(const torch::Tensor& pred, const torch::Tensor& gt) {
    const auto o = overlap(pred, gt);
    if (o.gt == 0) throw UndefinedMetricError("Dice is undefined for an empty ground-truth mask");
    return 2.0 * static_cast<double>(o.tp) / static_cast<double>(o.pred + o.gt);
}

std::pair<double, double> precision_recall(const torch::Tensor& pred, const torch::Tensor& gt) {
    const auto o = overlap(pred, gt);
    if (o.gt == 0) throw UndefinedMetricError("recall is undefined for an empty ground-truth mask");
    if (o.pred == 0) throw UndefinedMetricError("precision is undefined for an empty prediction");
    return {static_cast<double>(o.tp) / static_cast<double>(o.pred),
            static_cast<double>(o.tp) / static_cast<double>(o.gt)};
}

double volume_mm3(const torch::Tensor& mask, const Spacing& s) {
    if (!(s.x > 0 && s.y > 0 && s.z > 0)) throw ConfigError("spacing must be positive");
    if (s.x >= 10.0 || s.y >= 10.0 || s.z >= 10.0) {
        log_warning("voxel spacing (" + fmt(s.x) + ", " + fmt(s.y) + ", " + fmt(s.z) +
                    ") mm reaches 10 mm or more; volume may be implausible");
    }
    const auto count = (mask.to(torch::kCPU) != 0).sum().item<int64_t>();
    return static_cast<double>(count) * s.voxel_volume();
}

std::vector<double> default_calibration_grid() {
    std::vector<double> grid;
    for (int i = 1; i <= 199; ++i) grid.push_back(i / 200.0);
    return grid;
}

nlohmann::json to_json(const CalibrationResult& r) {
    return {{"threshold", r.threshold},
            {"mean_abs_dv_before_mm3", r.mean_abs_dv_before},
            {"mean_abs_dv_after_mm3", r.mean_abs_dv_after},
            {"grid", r.grid},
            {"mean_abs_dv_mm3", r.mean_abs_dv}};
}

CalibrationResult calibration_from_json(const nlohmann::json& j) {
    CalibrationResult r;
    try {
        r.threshold = j.at("threshold").get<double>();
        r.mean_abs_dv_before = j.value("mean_abs_dv_before_mm3", 0.0);
        r.mean_abs_dv_after = j.value("mean_abs_dv_after_mm3", 0.0);
        r.grid = j.value("grid", std::vector<double>{});
        r.mean_abs_dv = j.value("mean_abs_dv_mm3", std::vector<double>{});
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed calibration file: ") + e.what());
    }
    if (!(r.threshold > 0.0 && r.threshold < 1.0)) throw ConfigError("calibration threshold must lie in (0, 1)");
    return r;
}

double predicted_volume_mm3(const torch::Tensor& prob, double t, const Spacing& spacing) {
    return volume_mm3(prob >= t, spacing);
}

CalibrationResult calibrate_threshold(const std::vector<torch::Tensor>& probs, const std::vector<torch::Tensor>& gts,
                                      const std::vector<Spacing>& spacings, const std::vector<double>& grid) {
    if (probs.empty()) throw ConfigError("calibration needs at least one development case");
    if (probs.size() != gts.size() || probs.size() != spacings.size()) {
        throw ConfigError("calibration inputs differ in length");
    }
    if (grid.empty()) throw ConfigError("calibration grid is empty");
    bool has_half = false;
    for (double t : grid) {
        if (!(t > 0.0 && t < 1.0)) throw ConfigError("calibration grid points must lie in (0, 1)");
        has_half = has_half || t == 0.5;
    }
    if (!has_half) throw ConfigError("calibration grid must contain 0.5");

    std::vector<double> gt_volume;
    for (size_t c = 0; c < gts.size(); ++c) {
        if (probs[c].sizes() != gts[c].sizes()) throw ShapeError("probability and label shapes differ");
        gt_volume.push_back(volume_mm3(gts[c], spacings[c]));
    }
    auto mean_abs_dv = [&](double t) {
        double sum = 0.0;
        for (size_t c = 0; c < probs.size(); ++c) {
            sum += std::abs(predicted_volume_mm3(probs[c], t, spacings[c]) - gt_volume[c]);
        }
        return sum / static_cast<double>(probs.size());
    };

    CalibrationResult r;
    r.grid = grid;
    size_t best = 0;
    for (size_t i = 0; i < grid.size(); ++i) {
        r.mean_abs_dv.push_back(mean_abs_dv(grid[i]));
        if (i == 0) continue;
        const double v = r.mean_abs_dv[i], b = r.mean_abs_dv[best];
        const double dv = std::abs(grid[i] - 0.5), db = std::abs(grid[best] - 0.5);
        // Grid points like 0.3 and 0.7 sit at slightly different float distances from 0.5.
        constexpr double eps = 1e-12;
        if (v < b || (v == b && (dv < db - eps || (std::abs(dv - db) <= eps && grid[i] > grid[best])))) best = i;
    }
    r.threshold = grid[best];
    r.mean_abs_dv_after = r.mean_abs_dv[best];
    r.mean_abs_dv_before = mean_abs_dv(0.5);
    return r;
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw ConfigError("quantile of an empty sample");
    const double h = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(h));
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

ConfidenceInterval bootstrap_ci(const std::vector<double>& values, int64_t resamples, double confidence,
                                uint64_t seed) {
    if (values.empty()) throw ConfigError("bootstrap needs at least one value");
    if (resamples < 1) throw ConfigError("bootstrap needs at least one resample");
    if (!(confidence > 0.0 && confidence < 1.0)) throw ConfigError("confidence must lie in (0, 1)");
    const size_t n = values.size();
    ConfidenceInterval ci;
    ci.mean = mean_of(values);
    if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); })) {
        ci.mean = ci.lo = ci.hi = values.front();
        return ci;
    }
    std::mt19937_64 rng(seed);
    std::vector<double> means(static_cast<size_t>(resamples));
    for (auto& m : means) {
        double sum = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
            sum += values[static_cast<size_t>(u * static_cast<double>(n))];
        }
        m = sum / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    const double alpha = 1.0 - confidence;
    ci.lo = quantile_sorted(means, alpha / 2.0);
    ci.hi = quantile_sorted(means, 1.0 - alpha / 2.0);
    return ci;
}

BlandAltman bland_altman(const std::vector<double>& pred, const std::vector<double>& gt) {
    if (pred.empty() || pred.size() != gt.size()) throw ConfigError("Bland-Altman needs equal-length nonempty lists");
    BlandAltman ba;
    for (size_t i = 0; i < pred.size(); ++i) {
        ba.mean.push_back((pred[i] + gt[i]) / 2.0);
        ba.diff.push_back(pred[i] - gt[i]);
    }
    ba.bias = mean_of(ba.diff);
    if (ba.diff.size() > 1) {
        double ss = 0.0;
        for (double d : ba.diff) ss += (d - ba.bias) * (d - ba.bias);
        ba.sd = std::sqrt(ss / static_cast<double>(ba.diff.size() - 1));
    }
    ba.lower = ba.bias - 1.96 * ba.sd;
    ba.upper = ba.bias + 1.96 * ba.sd;
    return ba;
}

nlohmann::json to_json(const BlandAltman& ba) {
    return {{"mean", ba.mean}, {"diff", ba.diff},    {"bias", ba.bias},
            {"sd", ba.sd},     {"lower", ba.lower}, {"upper", ba.upper}};
}

void write_bland_altman_svg(const BlandAltman& ba, const std::filesystem::path& path, const std::string& title) {
    const double W = 640, H = 420, L = 70, R = 20, T = 40, B = 50;
    double xmin = *std::min_element(ba.mean.begin(), ba.mean.end());
    double xmax = *std::max_element(ba.mean.begin(), ba.mean.end());
    double ymin = std::min(*std::min_element(ba.diff.begin(), ba.diff.end()), ba.lower);
    double ymax = std::max(*std::max_element(ba.diff.begin(), ba.diff.end()), ba.upper);
    if (xmax - xmin < 1e-9) { xmin -= 1.0; xmax += 1.0; }
    if (ymax - ymin < 1e-9) { ymin -= 1.0; ymax += 1.0; }
    const double padx = 0.05 * (xmax - xmin), pady = 0.08 * (ymax - ymin);
    xmin -= padx; xmax += padx; ymin -= pady; ymax += pady;
    auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto sy = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
        << title << "</text>\n"
        << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
        << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
        << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">mean volume (mm3)</text>\n"
        << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (T + H - B) / 2
        << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">predicted - annotated (mm3)</text>\n";
    auto hline = [&](double y, const char* colour, const std::string& label) {
        out << "<line x1=\"" << L << "\" y1=\"" << sy(y) << "\" x2=\"" << W - R << "\" y2=\"" << sy(y)
            << "\" stroke=\"" << colour << "\" stroke-dasharray=\"6,4\"/>\n"
            << "<text x=\"" << W - R - 4 << "\" y=\"" << sy(y) - 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
            << "font-size=\"11\" fill=\"" << colour << "\">" << label << "</text>\n";
    };
    hline(ba.bias, "#1f5fa8", "bias " + fmt(ba.bias));
    hline(ba.upper, "#b03030", "+1.96 sd " + fmt(ba.upper));
    hline(ba.lower, "#b03030", "-1.96 sd " + fmt(ba.lower));
    for (size_t i = 0; i < ba.mean.size(); ++i) {
        out << "<circle cx=\"" << sx(ba.mean[i]) << "\" cy=\"" << sy(ba.diff[i])
            << "\" r=\"3.5\" fill=\"#333\" fill-opacity=\"0.7\"/>\n";
    }
    out << "</svg>\n";
}

int risk_group(double volume, const std::array<double, 3>& b) {
    int g = 0;
    while (g < 3 && volume > b[static_cast<size_t>(g)]) ++g;
    return g;
}

RiskGroups risk_group_classification(const std::vector<double>& gt, const std::vector<double>& pred) {
    if (gt.size() != pred.size()) throw ConfigError("risk groups need one prediction per case");
    if (gt.size() < 4) throw ConfigError("risk groups need at least 4 cases");
    auto sorted = gt;
    std::sort(sorted.begin(), sorted.end());
    RiskGroups r;
    r.boundaries = {quantile_sorted(sorted, 0.25), quantile_sorted(sorted, 0.5), quantile_sorted(sorted, 0.75)};
    for (size_t i = 0; i < gt.size(); ++i) {
        const int a = risk_group(gt[i], r.boundaries);
        const int p = risk_group(pred[i], r.boundaries);
        r.confusion[static_cast<size_t>(a)][static_cast<size_t>(p)] += 1;
        r.correct += a == p;
    }
    r.accuracy = static_cast<double>(r.correct) / static_cast<double>(gt.size());
    return r;
}

nlohmann::json to_json(const RiskGroups& r) {
    return {{"boundaries_mm3", r.boundaries}, {"confusion", r.confusion}, {"correct", r.correct},
            {"accuracy", r.accuracy}};
}

EvalReport evaluate_cases(const std::vector<EvalCase>& cases, const std::optional<CalibrationResult>& calibration,
                          int64_t resamples, uint64_t seed) {
    EvalReport rep;
    rep.calibrated = calibration.has_value();
    rep.threshold = calibration ? calibration->threshold : 0.5;
    rep.calibration = calibration;
    rep.resamples = resamples;
    rep.seed = seed;

    std::vector<double> dices, precisions, recalls, dvs, pv, gv;
    for (const auto& c : cases) {
        auto pred = c.prob >= rep.threshold;
        CaseMetrics m;
        m.case_id = c.case_id;
        m.gt_volume_mm3 = volume_mm3(c.gt, c.spacing);
        m.pred_volume_mm3 = volume_mm3(pred, c.spacing);
        m.abs_volume_diff_mm3 = std::abs(m.pred_volume_mm3 - m.gt_volume_mm3);
        if (m.gt_volume_mm3 == 0.0) {
            rep.excluded_cases.push_back(c.case_id);
            continue;
        }
        m.dice = dice(pred, c.gt);
        const auto o = overlap(pred, c.gt);
        m.recall = static_cast<double>(o.tp) / static_cast<double>(o.gt);
        if (o.pred > 0) {
            m.precision = static_cast<double>(o.tp) / static_cast<double>(o.pred);
            precisions.push_back(*m.precision);
        }
        dices.push_back(m.dice);
        recalls.push_back(m.recall);
        dvs.push_back(m.abs_volume_diff_mm3);
        pv.push_back(m.pred_volume_mm3);
        gv.push_back(m.gt_volume_mm3);
        rep.cases.push_back(m);
    }
    if (rep.cases.empty()) throw UndefinedMetricError("no evaluation case has a nonempty ground truth");
    rep.dice = bootstrap_ci(dices, resamples, 0.95, seed);
    rep.recall = bootstrap_ci(recalls, resamples, 0.95, seed);
    rep.abs_volume_diff = bootstrap_ci(dvs, resamples, 0.95, seed);
    if (!precisions.empty()) rep.precision = bootstrap_ci(precisions, resamples, 0.95, seed);
    rep.bland_altman = bland_altman(pv, gv);
    if (gv.size() >= 4) rep.risk = risk_group_classification(gv, pv);
    return rep;
}

nlohmann::json to_json(const EvalReport& r) {
    auto ci = [](const ConfidenceInterval& c) { return nlohmann::json{{"mean", c.mean}, {"lo", c.lo}, {"hi", c.hi}}; };
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& m : r.cases) {
        cases.push_back({{"case_id", m.case_id},
                         {"dice", m.dice},
                         {"precision", m.precision ? nlohmann::json(*m.precision) : nlohmann::json(nullptr)},
                         {"recall", m.recall},
                         {"pred_volume_mm3", m.pred_volume_mm3},
                         {"gt_volume_mm3", m.gt_volume_mm3},
                         {"abs_volume_diff_mm3", m.abs_volume_diff_mm3}});
    }
    nlohmann::json j = {{"threshold", r.threshold},
                        {"threshold_source", r.calibrated ? "calibrated" : "uncalibrated"},
                        {"cases", cases},
                        {"excluded_cases", r.excluded_cases},
                        {"dice", ci(r.dice)},
                        {"precision", ci(r.precision)},
                        {"recall", ci(r.recall)},
                        {"abs_volume_diff_mm3", ci(r.abs_volume_diff)},
                        {"bland_altman", to_json(r.bland_altman)},
                        {"bootstrap", {{"resamples", r.resamples}, {"confidence", 0.95}, {"seed", r.seed}}}};
    j["calibration"] = r.calibration ? to_json(*r.calibration) : nlohmann::json(nullptr);
    j["risk_groups"] = r.risk ? to_json(*r.risk) : nlohmann::json(nullptr);
    return j;
}

void write_eval_csv(const EvalReport& r, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out.precision(10);
    out << "case_id,dice,precision,recall,pred_volume_mm3,gt_volume_mm3,abs_volume_diff_mm3\n";
    for (const auto& m : r.cases) {
        out << m.case_id << ',' << m.dice << ',';
        if (m.precision) out << *m.precision;
        out << ',' << m.recall << ',' << m.pred_volume_mm3 << ',' << m.gt_volume_mm3 << ','
            << m.abs_volume_diff_mm3 << '\n';
    }
}

}  // namespace calcseg
