#include "instcal/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace instcal {
namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ReportError("cannot read '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void require(std::vector<std::string>& errors, bool ok, const std::string& path, const std::string& problem) {
  if (!ok) errors.push_back(path + ": " + problem);
}

void check_number(std::vector<std::string>& errors, const nlohmann::json& j, const std::string& key,
                  const std::string& path, double lo, double hi) {
  if (!j.contains(key)) {
    errors.push_back(path + "." + key + ": missing");
    return;
  }
  const auto& v = j.at(key);
  if (!v.is_number()) {
    errors.push_back(path + "." + key + ": expected a number");
    return;
  }
  const double x = v.get<double>();
  require(errors, x >= lo && x <= hi, path + "." + key, "out of range [" + fixed(lo, 0) + ", " + fixed(hi, 0) + "]");
}

void check_string(std::vector<std::string>& errors, const nlohmann::json& j, const std::string& key,
                  const std::string& path) {
  if (!j.contains(key)) {
    errors.push_back(path + "." + key + ": missing");
  } else if (!j.at(key).is_string()) {
    errors.push_back(path + "." + key + ": expected a string");
  }
}

void check_report(std::vector<std::string>& errors, const nlohmann::json& r, const std::string& path) {
  if (!r.is_object()) {
    errors.push_back(path + ": expected an object");
    return;
  }
  static const std::vector<std::string> keys{"method", "domain", "per_class_iou", "miou", "ece", "n_images",
                                             "config_hash"};
  for (const auto& [k, v] : r.items()) {
    require(errors, std::find(keys.begin(), keys.end(), k) != keys.end(), path + "." + k, "unexpected key");
  }
  check_string(errors, r, "method", path);
  check_string(errors, r, "config_hash", path);
  check_number(errors, r, "miou", path, 0, 1);
  check_number(errors, r, "ece", path, 0, 1);
  if (!r.contains("n_images") || !r.at("n_images").is_number_unsigned()) {
    errors.push_back(path + ".n_images: expected a non-negative integer");
  }
  if (!r.contains("per_class_iou") || !r.at("per_class_iou").is_array() || r.at("per_class_iou").empty()) {
    errors.push_back(path + ".per_class_iou: expected a non-empty array");
  } else {
    const auto& iou = r.at("per_class_iou");
    for (std::size_t i = 0; i < iou.size(); ++i) {
      const std::string p = path + ".per_class_iou[" + std::to_string(i) + "]";
      if (iou[i].is_null()) continue;
      if (!iou[i].is_number()) {
        errors.push_back(p + ": expected a number or null");
      } else {
        const double v = iou[i].get<double>();
        require(errors, v >= 0 && v <= 1, p, "out of range [0, 1]");
      }
    }
  }
  if (!r.contains("domain") || !r.at("domain").is_object()) {
    errors.push_back(path + ".domain: expected an object");
  } else {
    try {
      (void)r.at("domain").get<DomainSpec>();
    } catch (const std::exception& e) {
      errors.push_back(path + ".domain: " + e.what());
    }
  }
}

}  // namespace

std::string domain_name(const DomainSpec& d) {
  if (d.kind == DomainKind::Corruption) return d.corruption;
  return d.label();
}

int domain_severity(const DomainSpec& d) { return d.kind == DomainKind::Corruption ? d.severity : 0; }

std::string report_csv(const std::vector<MetricsReport>& reports) {
  std::string out = "method,domain,severity,miou,ece,n_images,config_hash\n";
  for (const MetricsReport& r : reports) {
    out += r.method + "," + domain_name(r.domain) + "," + std::to_string(domain_severity(r.domain)) + "," +
           fixed(r.miou, 6) + "," + fixed(r.ece, 6) + "," + std::to_string(r.n_images) + "," + r.config_hash + "\n";
  }
  return out;
}

std::string curve_csv(const std::vector<CurvePoint>& curve, const std::string& config_hash) {
  std::string out = "iter,lr,loss,config_hash\n";
  char buf[128];
  for (const CurvePoint& p : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,", p.iter, p.lr, p.loss);
    out += buf + config_hash + "\n";
  }
  return out;
}

std::string batch_stats_csv(const std::vector<BatchStatsRow>& rows, const std::string& config_hash) {
  std::string out = "batch_size,miou,ece,config_hash\n";
  for (const BatchStatsRow& r : rows) {
    out += std::to_string(r.batch_size) + "," + fixed(r.miou, 6) + "," + fixed(r.ece, 6) + "," + config_hash + "\n";
  }
  return out;
}

nlohmann::json report_document(const std::string& experiment, const std::string& config_hash,
                               const std::vector<MetricsReport>& reports) {
  return {{"format", kReportFormat}, {"experiment", experiment}, {"config_hash", config_hash}, {"reports", reports}};
}

std::vector<std::string> validate_report_document(const nlohmann::json& doc) {
  std::vector<std::string> errors;
  if (!doc.is_object()) return {"$: expected an object"};
  if (!doc.contains("format") || doc.at("format") != kReportFormat) {
    errors.push_back(std::string("$.format: expected \"") + kReportFormat + "\"");
  }
  check_string(errors, doc, "experiment", "$");
  check_string(errors, doc, "config_hash", "$");
  if (!doc.contains("reports") || !doc.at("reports").is_array()) {
    errors.push_back("$.reports: expected an array");
    return errors;
  }
  const auto& reports = doc.at("reports");
  for (std::size_t i = 0; i < reports.size(); ++i) check_report(errors, reports[i], "$.reports[" + std::to_string(i) + "]");
  return errors;
}

std::vector<MetricsReport> parse_report_document(const nlohmann::json& doc) {
  const auto errors = validate_report_document(doc);
  if (!errors.empty()) {
    std::string msg = "invalid report document:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ReportError(msg);
  }
  return doc.at("reports").get<std::vector<MetricsReport>>();
}

std::vector<MetricsReport> load_reports(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ReportError("'" + dir.string() + "' is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json" && e.path().filename() != "resolved_config.json") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<MetricsReport> out;
  for (const auto& f : files) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(read_text(f));
    } catch (const nlohmann::json::exception& e) {
      throw ReportError(f.string() + ": " + e.what());
    }
    try {
      for (MetricsReport& r : parse_report_document(doc)) out.push_back(std::move(r));
    } catch (const ReportError& e) {
      throw ReportError(f.string() + ": " + e.what());
    }
  }
  if (out.empty()) throw ReportError("no report documents under '" + dir.string() + "'");
  return out;
}

std::string markdown_table(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ReportError("no reports to tabulate");
  const std::size_t classes = reports.front().per_class_iou.size();
  std::vector<std::string> methods, domains;
  std::map<std::pair<std::string, std::string>, double> cell;
  for (const MetricsReport& r : reports) {
    if (r.per_class_iou.size() != classes) {
      throw ReportError("inconsistent class counts: " + std::to_string(classes) + " vs " +
                        std::to_string(r.per_class_iou.size()) + " (method " + r.method + ")");
    }
    const std::string d = r.domain.label();
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    if (std::find(domains.begin(), domains.end(), d) == domains.end()) domains.push_back(d);
    cell[{r.method, d}] = r.miou;
  }
  std::string out = "| Method |";
  for (const auto& d : domains) out += " " + d + " |";
  out += " Avg. |\n|---|";
  for (std::size_t i = 0; i <= domains.size(); ++i) out += "---:|";
  out += "\n";
  for (const auto& m : methods) {
    out += "| " + m + " |";
    double total = 0;
    std::size_t n = 0;
    for (const auto& d : domains) {
      const auto it = cell.find({m, d});
      if (it == cell.end()) {
        out += " - |";
        continue;
      }
      out += " " + fixed(100 * it->second, 1) + " |";
      total += 100 * it->second;
      ++n;
    }
    out += " " + fixed(total / static_cast<double>(n), 1) + " |\n";
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

}  // namespace instcal
