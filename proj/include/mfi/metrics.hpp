#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mfi {

struct MetricsRow {
    std::string phase;
    int epoch = 0;
    double wall_time_s = 0.0;
    double loss = 0.0;
    double accuracy = 0.0;  // NaN when the phase has no classifier
    double lr = 0.0;
};

/// Appends rows to metrics.csv (header `phase,epoch,wall_time_s,loss,accuracy,lr`).
/// Rejects a row whose epoch does not exceed the last one logged for its phase.
class MetricsLog {
  public:
    static constexpr const char* kHeader = "phase,epoch,wall_time_s,loss,accuracy,lr";

    MetricsLog() = default;
    /// Appends to an existing file (validating its header) or creates one.
    explicit MetricsLog(std::filesystem::path path);

    /// Label for a new run of `name`; reruns in the same file get "name#2", "name#3", ...
    std::string begin_phase(const std::string& name);
    void append(const MetricsRow& row);
    const std::filesystem::path& path() const { return path_; }

  private:
    std::filesystem::path path_;
    std::map<std::string, int> last_epoch_;
};

/// Parse a metrics file, checking the header and per-phase epoch order.
std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

}  // namespace mfi
