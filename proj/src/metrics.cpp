#include "mfi/metrics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "mfi/error.hpp"

namespace mfi {

namespace {

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream o;
    o.precision(9);
    o << v;
    return o.str();
}

double parse_number(const std::string& s, const std::filesystem::path& path) {
    if (s == "nan") return std::nan("");
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw FormatError("metrics file '" + path.string() + "': bad number '" + s + "'");
}

}  // namespace

MetricsLog::MetricsLog(std::filesystem::path path) : path_(std::move(path)) {
    if (std::filesystem::exists(path_)) {
        for (const auto& row : read_metrics(path_)) last_epoch_[row.phase] = row.epoch;
        return;
    }
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_);
    if (!out) throw FormatError("cannot create '" + path_.string() + "'");
    out << kHeader << "\n";
}

void MetricsLog::append(const MetricsRow& row) {
    auto it = last_epoch_.find(row.phase);
    if (it != last_epoch_.end() && row.epoch <= it->second) {
        throw FormatError("metrics: epoch " + std::to_string(row.epoch) + " for phase '" + row.phase +
                          "' does not follow epoch " + std::to_string(it->second));
    }
    last_epoch_[row.phase] = row.epoch;
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::app);
    out << row.phase << "," << row.epoch << "," << format_number(row.wall_time_s) << "," << format_number(row.loss)
        << "," << format_number(row.accuracy) << "," << format_number(row.lr) << "\n";
}

std::string MetricsLog::begin_phase(const std::string& name) {
    std::string label = name;
    for (int run = 2; last_epoch_.contains(label); ++run) label = name + "#" + std::to_string(run);
    last_epoch_[label] = 0;
    return label;
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot read metrics file '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line) || line != MetricsLog::kHeader) {
        throw FormatError("metrics file '" + path.string() + "' has an unexpected header");
    }
    std::vector<MetricsRow> rows;
    std::map<std::string, int> last;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 6) throw FormatError("metrics file '" + path.string() + "': expected 6 fields in '" + line + "'");
        MetricsRow r{f[0], static_cast<int>(parse_number(f[1], path)), parse_number(f[2], path),
                     parse_number(f[3], path), parse_number(f[4], path), parse_number(f[5], path)};
        auto it = last.find(r.phase);
        if (it != last.end() && r.epoch <= it->second) {
            throw FormatError("metrics file '" + path.string() + "': epochs of phase '" + r.phase +
                              "' are not strictly increasing");
        }
        last[r.phase] = r.epoch;
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace mfi
