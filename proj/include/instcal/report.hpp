#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "instcal/harness.hpp"
#include "instcal/metrics.hpp"

namespace instcal {

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kReportFormat = "instcal-report/1";

/// Domain name for the CSV "domain" column: the corruption name, "source",
/// or the augmentation kind.
std::string domain_name(const DomainSpec& d);
/// Corruption severity, or 0 for every other domain.
int domain_severity(const DomainSpec& d);

/// Header: method,domain,severity,miou,ece,n_images,config_hash.
std::string report_csv(const std::vector<MetricsReport>& reports);
std::string curve_csv(const std::vector<CurvePoint>& curve, const std::string& config_hash);
std::string batch_stats_csv(const std::vector<BatchStatsRow>& rows, const std::string& config_hash);

/// Report document: {"format", "experiment", "config_hash", "reports": [...]}.
nlohmann::json report_document(const std::string& experiment, const std::string& config_hash,
                               const std::vector<MetricsReport>& reports);

/// Schema violations of a report document, as "path: problem" strings.
std::vector<std::string> validate_report_document(const nlohmann::json& doc);
/// Throws ReportError listing every violation.
std::vector<MetricsReport> parse_report_document(const nlohmann::json& doc);

/// Reports from every *.json file under `dir` (recursive, sorted by path).
std::vector<MetricsReport> load_reports(const std::filesystem::path& dir);

/// Method x domain mIoU table (percent, one decimal) with an Avg. column over
/// the domains a method has. Methods and domains keep first-seen order.
/// Throws ReportError when the reports disagree on the class count.
std::string markdown_table(const std::vector<MetricsReport>& reports);

/// Writes text to a file, replacing it.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace instcal
