#pragma once

// Session metrics: SUS scoring, STAI change, per-metric mean and sample SD,
// and normalised chart series.

#include <array>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mirage/error.hpp"
#include "mirage/io.hpp"

namespace mirage::metrics {

/// Standard SUS: odd items contribute r - 1, even items 5 - r, sum x 2.5.
inline double sus_score(std::span<const int> responses) {
  require(responses.size() == 10, ErrorCode::kValidation,
          "SUS needs exactly 10 responses, got " + std::to_string(responses.size()));
  int total = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    const int r = responses[i];
    require(r >= 1 && r <= 5, ErrorCode::kValidation,
            "SUS item " + std::to_string(i + 1) + " must be in 1..5, got " + std::to_string(r));
    total += (i % 2 == 0) ? r - 1 : 5 - r;
  }
  return total * 2.5;
}

inline constexpr double kStaiMin = 20.0;
inline constexpr double kStaiMax = 80.0;

/// Signed percent change of the STAI total relative to the pre-session
/// score; negative means anxiety went down.
inline double anxiety_reduction(double pre, double post) {
  require(pre >= kStaiMin && pre <= kStaiMax && post >= kStaiMin && post <= kStaiMax, ErrorCode::kValidation,
          "STAI scores must be in [20, 80]");
  return 100.0 * (post - pre) / pre;
}

struct SessionRecord {
  double setup_min = 0.0;
  int attempts = 1;
  double registration_error_m = 0.0;
  std::array<int, 10> sus{};
  double stai_pre = 20.0;
  double stai_post = 20.0;
  double training_h = 0.0;

  void validate() const {
    require(std::isfinite(setup_min) && setup_min >= 0.0, ErrorCode::kValidation, "setup time must be >= 0");
    require(attempts >= 1, ErrorCode::kValidation, "attempts must be >= 1");
    require(std::isfinite(registration_error_m) && registration_error_m >= 0.0, ErrorCode::kValidation,
            "registration error must be >= 0");
    sus_score(sus);
    anxiety_reduction(stai_pre, stai_post);
    require(std::isfinite(training_h) && training_h >= 0.0, ErrorCode::kValidation, "training hours must be >= 0");
  }
};

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols = {
      "setup_min", "attempts", "reg_err_cm", "sus1", "sus2", "sus3", "sus4",     "sus5",      "sus6",
      "sus7",      "sus8",     "sus9",       "sus10", "stai_pre", "stai_post", "training_h"};
  return cols;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_number(const std::string& s, std::size_t row, const std::string& col) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == s.size() && !s.empty() && std::isfinite(v), ErrorCode::kValidation,
          "row " + std::to_string(row) + ", column " + col + ": not a number '" + s + "'");
  return v;
}

inline int parse_int(const std::string& s, std::size_t row, const std::string& col) {
  const double v = parse_number(s, row, col);
  require(v == std::floor(v) && std::abs(v) < 1e9, ErrorCode::kValidation,
          "row " + std::to_string(row) + ", column " + col + ": expected an integer, got '" + s + "'");
  return static_cast<int>(v);
}

}  // namespace detail

/// Parses the sessions CSV. Rows are numbered from 1 after the header.
inline std::vector<SessionRecord> parse_sessions_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line) && line.find_first_not_of(" \t\r") == std::string::npos) {
  }
  const auto header = detail::split_csv_line(line);
  require(header == csv_columns(), ErrorCode::kValidation,
          "header must be setup_min,attempts,reg_err_cm,sus1..sus10,stai_pre,stai_post,training_h");
  const auto& cols = csv_columns();
  std::vector<SessionRecord> out;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    require(cells.size() == cols.size(), ErrorCode::kValidation,
            "row " + std::to_string(row) + ": expected " + std::to_string(cols.size()) + " columns, got " +
                std::to_string(cells.size()));
    SessionRecord r;
    r.setup_min = detail::parse_number(cells[0], row, cols[0]);
    r.attempts = detail::parse_int(cells[1], row, cols[1]);
    r.registration_error_m = detail::parse_number(cells[2], row, cols[2]) / 100.0;
    for (std::size_t i = 0; i < 10; ++i) r.sus[i] = detail::parse_int(cells[3 + i], row, cols[3 + i]);
    r.stai_pre = detail::parse_number(cells[13], row, cols[13]);
    r.stai_post = detail::parse_number(cells[14], row, cols[14]);
    r.training_h = detail::parse_number(cells[15], row, cols[15]);
    try {
      r.validate();
    } catch (const Error& e) {
      fail(ErrorCode::kValidation, "row " + std::to_string(row) + ": " + e.what());
    }
    out.push_back(r);
  }
  return out;
}

inline std::vector<SessionRecord> read_sessions_csv(const fs::path& path) {
  try {
    return parse_sessions_csv(read_file_text(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kIo) throw;
    fail(ErrorCode::kValidation, path.string() + ": " + e.what());
  }
}

struct MetricStat {
  double mean = 0.0;
  double sd = 0.0;  // n - 1 denominator
};

/// Mean and sample standard deviation.
inline MetricStat mean_sd(std::span<const double> v) {
  require(v.size() >= 2, ErrorCode::kInsufficientData, "need at least 2 values for a sample SD");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

struct MetricInfo {
  std::string_view name;
  std::string_view unit;
};

/// Summary metrics, in reporting order.
inline constexpr std::array<MetricInfo, 6> kMetrics = {{{"setup_time_min", "min"},
                                                        {"calibration_attempts", "attempts"},
                                                        {"registration_error_cm", "cm"},
                                                        {"sus_score", "/100"},
                                                        {"anxiety_reduction_pct", "%"},
                                                        {"training_hours", "h"}}};

struct MetricsSummary {
  std::size_t n = 0;
  std::map<std::string, MetricStat, std::less<>> stats;

  const MetricStat& at(std::string_view name) const {
    const auto it = stats.find(name);
    require(it != stats.end(), ErrorCode::kConfig, "unknown metric '" + std::string(name) + "'");
    return it->second;
  }
};

/// Anxiety is the mean of per-subject percent changes.
inline MetricsSummary summarize(std::span<const SessionRecord> records) {
  require(records.size() >= 2, ErrorCode::kInsufficientData,
          "summary needs at least 2 sessions, got " + std::to_string(records.size()));
  std::map<std::string, std::vector<double>, std::less<>> cols;
  for (const auto& r : records) {
    r.validate();
    cols["setup_time_min"].push_back(r.setup_min);
    cols["calibration_attempts"].push_back(r.attempts);
    cols["registration_error_cm"].push_back(r.registration_error_m * 100.0);
    cols["sus_score"].push_back(sus_score(r.sus));
    cols["anxiety_reduction_pct"].push_back(anxiety_reduction(r.stai_pre, r.stai_post));
    cols["training_hours"].push_back(r.training_h);
  }
  MetricsSummary s;
  s.n = records.size();
  for (const auto& [name, v] : cols) s.stats[name] = mean_sd(v);
  return s;
}

inline Json to_json(const MetricsSummary& s) {
  Json j;
  j["n"] = s.n;
  Json m = Json::object();
  for (const auto& info : kMetrics) {
    const MetricStat& st = s.at(info.name);
    m[std::string(info.name)] = {{"mean", st.mean}, {"sd", st.sd}, {"unit", info.unit}};
  }
  j["metrics"] = m;
  return j;
}

// ---------------------------------------------------------------------------
// Chart normalisation

enum class Direction { kHigherBetter, kLowerBetter };

struct ChartEntry {
  std::string metric;
  std::string label;
  Direction direction = Direction::kHigherBetter;
  double best = 100.0;   // maps to 100
  double worst = 0.0;    // maps to 0
  bool invert = false;   // negate the value before scaling
  double round_to = 0.0; // 0 keeps full precision

  double score(double value) const {
    const double v = invert ? -value : value;
    double s = 100.0 * (v - worst) / (best - worst);
    s = std::clamp(s, 0.0, 100.0);
    if (round_to > 0.0) s = std::round(s / round_to) * round_to;
    return s + 0.0;  // no "-0" in the chart
  }
};

/// Metrics shown on the chart, in order.
inline constexpr std::array<std::string_view, 5> kChartMetrics = {
    "setup_time_min", "calibration_attempts", "sus_score", "anxiety_reduction_pct", "training_hours"};

inline constexpr const char* kDefaultChartMapping = R"ini(; Normalised chart scale per metric: best maps to 100, worst to 0, clamped.
; Presentation only; edit freely.

[setup_time_min]
label = Setup time
direction = lower_better
best = 0
worst = 45
round_to = 0.1

[calibration_attempts]
label = Calibration
direction = lower_better
best = 1
worst = 3
round_to = 0.1

[sus_score]
label = Usability
direction = higher_better
best = 100
worst = 0
round_to = 0.1

; Stored as signed change; negated so a larger reduction is a taller bar.
[anxiety_reduction_pct]
label = Anxiety reduction
direction = higher_better
invert = true
best = 100
worst = 0
round_to = 1

[training_hours]
label = Training
direction = lower_better
best = 0
worst = 5
round_to = 0.1
)ini";

struct ChartMapping {
  std::vector<ChartEntry> entries;
};

inline ChartMapping read_chart_mapping(const Config& c) {
  ChartMapping m;
  for (std::string_view metric : kChartMetrics) {
    const std::string sec(metric);
    require(c.has_section(sec), ErrorCode::kConfig, c.origin() + ": chart mapping has no section [" + sec + "]");
    c.check_keys(sec, {"label", "direction", "best", "worst", "invert", "round_to"});
    ChartEntry e;
    e.metric = sec;
    e.label = sec;
    std::string dir;
    c.read(sec, "label", e.label);
    c.read(sec, "direction", dir);
    c.read(sec, "best", e.best);
    c.read(sec, "worst", e.worst);
    c.read(sec, "invert", e.invert);
    c.read(sec, "round_to", e.round_to);
    require(dir == "higher_better" || dir == "lower_better", ErrorCode::kConfig,
            c.origin() + ": " + sec + ".direction must be higher_better or lower_better");
    e.direction = dir == "higher_better" ? Direction::kHigherBetter : Direction::kLowerBetter;
    require(e.direction == Direction::kHigherBetter ? e.best > e.worst : e.best < e.worst, ErrorCode::kConfig,
            c.origin() + ": " + sec + ": best/worst disagree with direction");
    require(e.round_to >= 0.0, ErrorCode::kConfig, c.origin() + ": " + sec + ".round_to must be >= 0");
    m.entries.push_back(e);
  }
  return m;
}

struct ChartRow {
  std::string label;
  double system_value = 0.0;
  double baseline_value = 0.0;
};

inline std::vector<ChartRow> normalize_for_chart(const MetricsSummary& system, const MetricsSummary& baseline,
                                                 const ChartMapping& mapping) {
  std::vector<ChartRow> rows;
  for (std::string_view metric : kChartMetrics) {
    const auto it = std::find_if(mapping.entries.begin(), mapping.entries.end(),
                                 [&](const ChartEntry& e) { return e.metric == metric; });
    require(it != mapping.entries.end(), ErrorCode::kConfig, "chart mapping is missing " + std::string(metric));
    rows.push_back({it->label, it->score(system.at(metric).mean), it->score(baseline.at(metric).mean)});
  }
  return rows;
}

inline std::string chart_csv(const std::vector<ChartRow>& rows) {
  std::ostringstream os;
  os << "metric,system_value,baseline_value\n" << std::setprecision(10);
  for (const auto& r : rows) os << r.label << ',' << r.system_value << ',' << r.baseline_value << '\n';
  return os.str();
}

}  // namespace mirage::metrics
