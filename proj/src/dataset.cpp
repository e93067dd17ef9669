#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "calcseg/data.hpp"
#include "calcseg/errors.hpp"
#include "calcseg/rng.hpp"

namespace calcseg {

namespace {

constexpr const char* kManifestHeader = "case_id,patient_id,path,split,manufacturer,slice_thickness_mm";

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

/// Largest-remainder apportionment of n items over the fractions.
std::vector<int64_t> apportion(int64_t n, const std::vector<double>& fractions) {
    std::vector<int64_t> counts(fractions.size());
    std::vector<std::pair<double, size_t>> remainders;
    int64_t assigned = 0;
    for (size_t i = 0; i < fractions.size(); ++i) {
        const double exact = fractions[i] * static_cast<double>(n);
        counts[i] = static_cast<int64_t>(std::floor(exact + 1e-9));
        assigned += counts[i];
        remainders.emplace_back(exact - static_cast<double>(counts[i]), i);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (size_t r = 0; assigned < n; ++r, ++assigned) counts[remainders[r % remainders.size()].second] += 1;
    return counts;
}

}  // namespace

std::string to_string(Split s) {
    switch (s) {
        case Split::Unassigned: return "unassigned";
        case Split::Pretrain: return "pretrain";
        case Split::Finetune: return "finetune";
        case Split::Dev: return "dev";
        case Split::Test: return "test";
        case Split::Excluded: return "excluded";
    }
    return "unassigned";
}

Split parse_split(std::string_view name) {
    for (Split s : {Split::Unassigned, Split::Pretrain, Split::Finetune, Split::Dev, Split::Test, Split::Excluded}) {
        if (to_string(s) == name) return s;
    }
    throw ConfigError("unknown split tag '" + std::string(name) + "'");
}

std::vector<ManifestEntry> DatasetManifest::with_split(Split s) const {
    std::vector<ManifestEntry> out;
    std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
                 [s](const ManifestEntry& e) { return e.split == s; });
    return out;
}

std::vector<ManifestEntry> DatasetManifest::pretrain_pool() const {
    std::vector<ManifestEntry> out;
    std::copy_if(entries.begin(), entries.end(), std::back_inserter(out), [](const ManifestEntry& e) {
        return e.split == Split::Pretrain || e.split == Split::Finetune;
    });
    return out;
}

void write_manifest_csv(const DatasetManifest& m, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write manifest '" + path.string() + "'");
    out << kManifestHeader << '\n';
    for (const auto& e : m.entries) {
        for (const auto* f : {&e.case_id, &e.patient_id, &e.path, &e.manufacturer}) {
            if (f->find_first_of(",\n\"") != std::string::npos) {
                throw ConfigError("manifest field '" + *f + "' contains a comma, quote or newline");
            }
        }
        std::ostringstream thickness;
        thickness.precision(17);
        thickness << e.slice_thickness_mm;
        out << e.case_id << ',' << e.patient_id << ',' << e.path << ',' << to_string(e.split) << ','
            << e.manufacturer << ',' << thickness.str() << '\n';
    }
}

DatasetManifest read_manifest_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest '" + path.string() + "'");
    DatasetManifest m;
    std::string line;
    std::size_t offset = 0;
    if (!std::getline(in, line) || line != kManifestHeader) {
        throw ParseError("manifest '" + path.string() + "' lacks the expected header", 0);
    }
    offset += line.size() + 1;
    const auto base = path.parent_path();
    while (std::getline(in, line)) {
        const std::size_t line_offset = offset;
        offset += line.size() + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 6) throw ParseError("manifest row has " + std::to_string(fields.size()) + " fields", line_offset);
        ManifestEntry e;
        e.case_id = fields[0];
        e.patient_id = fields[1];
        std::filesystem::path p(fields[2]);
        e.path = (p.is_relative() && !base.empty() ? base / p : p).string();
        try {
            e.split = parse_split(fields[3]);
            e.slice_thickness_mm = std::stod(fields[5]);
        } catch (const std::exception&) {
            throw ParseError("malformed manifest row for case '" + e.case_id + "'", line_offset);
        }
        e.manufacturer = fields[4];
        m.entries.push_back(std::move(e));
    }
    return m;
}

DatasetManifest split_by_patient(const DatasetManifest& manifest, const SplitConfig& cfg,
                                 const std::set<std::string>& empty_label_cases) {
    for (double f : {cfg.train_fraction, cfg.dev_fraction, cfg.test_fraction, cfg.finetune_fraction}) {
        if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("split fractions must lie in [0, 1]");
    }
    const double total = cfg.train_fraction + cfg.dev_fraction + cfg.test_fraction;
    if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("train/dev/test fractions sum to " + std::to_string(total) + ", not 1");
    }

    // Patients in first-appearance order, each with its manufacturer and series.
    std::vector<std::string> patients;
    std::map<std::string, std::vector<size_t>> series;
    std::map<std::string, std::string> manufacturer;
    for (size_t i = 0; i < manifest.entries.size(); ++i) {
        const auto& e = manifest.entries[i];
        if (!series.count(e.patient_id)) {
            patients.push_back(e.patient_id);
            manufacturer[e.patient_id] = e.manufacturer;
        }
        series[e.patient_id].push_back(i);
    }
    if (patients.size() < 10) {
        throw ConfigError("split_by_patient needs at least 10 patients, got " + std::to_string(patients.size()));
    }

    std::mt19937_64 rng(mix_seed({cfg.seed, 0x5B117ull}));

    // Stratified quotas: every manufacturer group gets the floor of its
    // proportional share per split; the leftover patients go to the
    // (group, split) cells with the largest fractional remainders, subject to
    // the apportioned split totals.
    std::map<std::string, std::vector<std::string>> groups;
    for (const auto& p : patients) groups[manufacturer[p]].push_back(p);
    const std::vector<double> fractions{cfg.train_fraction, cfg.dev_fraction, cfg.test_fraction};
    const auto targets = apportion(static_cast<int64_t>(patients.size()), fractions);

    std::vector<std::string> names;
    std::vector<std::array<int64_t, 3>> quota;
    std::vector<int64_t> group_left;
    std::array<int64_t, 3> split_left = {targets[0], targets[1], targets[2]};
    std::vector<std::tuple<double, double, size_t, int>> cells;
    std::uniform_real_distribution<double> tie(0.0, 1.0);
    for (auto& [name, members] : groups) {
        std::shuffle(members.begin(), members.end(), rng);
        const size_t g = names.size();
        names.push_back(name);
        std::array<int64_t, 3> q{};
        int64_t used = 0;
        for (int s = 0; s < 3; ++s) {
            const double exact = fractions[static_cast<size_t>(s)] * static_cast<double>(members.size());
            q[static_cast<size_t>(s)] = static_cast<int64_t>(std::floor(exact + 1e-9));
            used += q[static_cast<size_t>(s)];
            split_left[static_cast<size_t>(s)] -= q[static_cast<size_t>(s)];
            cells.emplace_back(-(exact - static_cast<double>(q[static_cast<size_t>(s)])), tie(rng), g, s);
        }
        quota.push_back(q);
        group_left.push_back(static_cast<int64_t>(members.size()) - used);
    }
    std::sort(cells.begin(), cells.end());
    for (int pass = 0; pass < 2; ++pass) {
        for (const auto& [neg_rem, t, g, s] : cells) {
            const auto su = static_cast<size_t>(s);
            while (group_left[g] > 0 && split_left[su] > 0 && (pass == 1 || neg_rem < 0.0)) {
                quota[g][su] += 1;
                group_left[g] -= 1;
                split_left[su] -= 1;
                if (pass == 0) break;
            }
        }
    }
    std::map<std::string, int> patient_split;
    for (size_t g = 0; g < names.size(); ++g) {
        const auto& members = groups[names[g]];
        size_t next = 0;
        for (int s = 0; s < 3; ++s) {
            for (int64_t k = 0; k < quota[g][static_cast<size_t>(s)]; ++k) patient_split[members[next++]] = s;
        }
    }

    DatasetManifest out = manifest;
    std::vector<std::vector<size_t>> train_nonempty;
    for (const auto& p : patients) {
        const int s = patient_split[p];
        auto& idx = series[p];
        if (s == 0) {
            std::vector<size_t> labeled;
            for (size_t i : idx) {
                out.entries[i].split = Split::Pretrain;
                if (!empty_label_cases.count(out.entries[i].case_id)) labeled.push_back(i);
            }
            if (!labeled.empty()) train_nonempty.push_back(labeled);
            continue;
        }
        std::vector<size_t> usable;
        for (size_t i : idx) {
            out.entries[i].split = Split::Excluded;
            if (!empty_label_cases.count(out.entries[i].case_id)) usable.push_back(i);
        }
        if (!usable.empty()) {
            const size_t pick = usable[std::uniform_int_distribution<size_t>(0, usable.size() - 1)(rng)];
            out.entries[pick].split = s == 1 ? Split::Dev : Split::Test;
        }
    }

    int64_t n_train_series = 0;
    for (const auto& e : out.entries) n_train_series += e.split == Split::Pretrain;
    int64_t want = cfg.finetune_count.value_or(
        static_cast<int64_t>(std::llround(cfg.finetune_fraction * static_cast<double>(n_train_series))));
    if (want < 0) throw ConfigError("finetune_count must be non-negative");

    // One labeled series per training patient per round until the quota is met.
    std::shuffle(train_nonempty.begin(), train_nonempty.end(), rng);
    for (auto& list : train_nonempty) std::shuffle(list.begin(), list.end(), rng);
    for (size_t round = 0; want > 0; ++round) {
        bool any = false;
        for (auto& list : train_nonempty) {
            if (round >= list.size() || want == 0) continue;
            out.entries[list[round]].split = Split::Finetune;
            --want;
            any = true;
        }
        if (!any) break;
    }
    return out;
}

}  // namespace calcseg
