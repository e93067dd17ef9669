#pragma once

// Overlap and volume metrics, development-set threshold calibration,
// bootstrap confidence intervals, Bland-Altman agreement and quartile
// risk-group classification.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "calcseg/volume.hpp"

namespace calcseg {

/// 2|P∩G| / (|P|+|G|). Throws UndefinedMetricError when gt is empty.
double dice(const torch::Tensor& pred, const torch::Tensor& gt);

/// (|P∩G|/|P|, |P∩G|/|G|). Throws UndefinedMetricError when either set is empty.
std::pair<double, double> precision_recall(const torch::Tensor& pred, const torch::Tensor& gt);

/// Voxel count times voxel volume. Logs a warning for spacings of 10 mm or more.
double volume_mm3(const torch::Tensor& mask, const Spacing& spacing);

/// {0.005, 0.010, ..., 0.995}.
std::vector<double> default_calibration_grid();

struct CalibrationResult {
    double threshold = 0.5;
    double mean_abs_dv_before = 0.0;  // at 0.5
    double mean_abs_dv_after = 0.0;   // at threshold
    std::vector<double> grid;
    std::vector<double> mean_abs_dv;  // per grid point
};

nlohmann::json to_json(const CalibrationResult& r);
CalibrationResult calibration_from_json(const nlohmann::json& j);

/// Predicted volume of one case at threshold t (prob >= t is foreground).
double predicted_volume_mm3(const torch::Tensor& prob, double t, const Spacing& spacing);

/// argmin over the grid of mean_c |V_pred(t, c) - V_gt(c)|; ties go to the
/// point nearest 0.5, then to the larger threshold.
CalibrationResult calibrate_threshold(const std::vector<torch::Tensor>& probs, const std::vector<torch::Tensor>& gts,
                                      const std::vector<Spacing>& spacings,
                                      const std::vector<double>& grid = default_calibration_grid());

struct ConfidenceInterval {
    double mean = 0.0;
    double lo = 0.0;
    double hi = 0.0;
};

/// Percentile bootstrap of the mean. Resample indices are floor(u * n) with u
/// the top 53 bits of successive mt19937_64(seed) outputs scaled to [0, 1);
/// percentiles interpolate linearly between order statistics.
ConfidenceInterval bootstrap_ci(const std::vector<double>& values, int64_t resamples = 1000,
                                double confidence = 0.95, uint64_t seed = 0);

/// Linear-interpolation quantile of sorted data (q in [0, 1]).
double quantile_sorted(const std::vector<double>& sorted, double q);

struct BlandAltman {
    std::vector<double> mean;
    std::vector<double> diff;
    double bias = 0.0;
    double sd = 0.0;  // sample standard deviation of diff (0 for a single pair)
    double lower = 0.0;
    double upper = 0.0;
};

BlandAltman bland_altman(const std::vector<double>& pred, const std::vector<double>& gt);

nlohmann::json to_json(const BlandAltman& ba);

void write_bland_altman_svg(const BlandAltman& ba, const std::filesystem::path& path, const std::string& title);

struct RiskGroups {
    std::array<double, 3> boundaries{};                     // q1, q2, q3 of gt volumes
    std::array<std::array<int64_t, 4>, 4> confusion{};     // [gt group][pred group]
    int64_t correct = 0;
    double accuracy = 0.0;
};

/// Group index 0..3; values on a boundary go to the lower group.
int risk_group(double volume, const std::array<double, 3>& boundaries);

RiskGroups risk_group_classification(const std::vector<double>& gt, const std::vector<double>& pred);

nlohmann::json to_json(const RiskGroups& r);

struct CaseMetrics {
    std::string case_id;
    double dice = 0.0;
    std::optional<double> precision;  // undefined when nothing was predicted
    double recall = 0.0;
    double pred_volume_mm3 = 0.0;
    double gt_volume_mm3 = 0.0;
    double abs_volume_diff_mm3 = 0.0;
};

struct EvalCase {
    std::string case_id;
    torch::Tensor prob;  // [z, y, x] in [0, 1]
    torch::Tensor gt;    // [z, y, x] binary
    Spacing spacing;
};

struct EvalReport {
    double threshold = 0.5;
    bool calibrated = false;
    std::vector<CaseMetrics> cases;
    std::vector<std::string> excluded_cases;  // empty ground truth
    ConfidenceInterval dice;
    ConfidenceInterval precision;
    ConfidenceInterval recall;
    ConfidenceInterval abs_volume_diff;
    std::optional<CalibrationResult> calibration;
    BlandAltman bland_altman;
    std::optional<RiskGroups> risk;  // needs >= 4 cases
    int64_t resamples = 1000;
    uint64_t seed = 0;
};

/// Per-case metrics at the calibration threshold (0.5 when absent), bootstrap
/// CIs of the means, Bland-Altman pairs and risk groups.
EvalReport evaluate_cases(const std::vector<EvalCase>& cases, const std::optional<CalibrationResult>& calibration,
                          int64_t resamples = 1000, uint64_t seed = 0);

nlohmann::json to_json(const EvalReport& r);
void write_eval_csv(const EvalReport& r, const std::filesystem::path& path);

}  // namespace calcseg
