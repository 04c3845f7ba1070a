#include <gtest/gtest.h>

#include <filesystem>

#include "instcal/config.hpp"
#include "instcal/report.hpp"

using namespace instcal;

namespace {

MetricsReport make_report(const std::string& method, const DomainSpec& d, double miou, std::size_t classes = 5) {
  MetricsReport r;
  r.method = method;
  r.domain = d;
  r.per_class_iou.assign(classes, miou);
  r.per_class_iou[1] = std::nullopt;
  r.miou = miou;
  r.ece = 0.05;
  r.n_images = 10;
  r.config_hash = "00000000000000ff";
  return r;
}

std::vector<MetricsReport> fixture() {
  return {make_report("pretrained", DomainSpec::identity(), 0.9),
          make_report("pretrained", DomainSpec::corrupted("fog", 2), 0.5),
          make_report("instcal-u", DomainSpec::identity(), 0.88),
          make_report("instcal-u", DomainSpec::corrupted("fog", 2), 0.8125)};
}

}  // namespace

TEST(ReportCsv, ColumnsAndRows) {
  const std::string csv = report_csv(fixture());
  EXPECT_EQ(csv,
            "method,domain,severity,miou,ece,n_images,config_hash\n"
            "pretrained,source,0,0.900000,0.050000,10,00000000000000ff\n"
            "pretrained,fog,2,0.500000,0.050000,10,00000000000000ff\n"
            "instcal-u,source,0,0.880000,0.050000,10,00000000000000ff\n"
            "instcal-u,fog,2,0.812500,0.050000,10,00000000000000ff\n");
  EXPECT_EQ(domain_name(DomainSpec::augmentation(DomainKind::NetPerturb)), "netperturb");
  EXPECT_EQ(domain_severity(DomainSpec::augmentation(DomainKind::NetPerturb)), 0);
}

TEST(ReportCsv, CurveAndBatchStats) {
  EXPECT_EQ(curve_csv({{0, 0.01, 1.5}, {1, 0.005, 1.25}}, "ab"), "iter,lr,loss,config_hash\n0,0.01,1.5,ab\n1,0.005,1.25,ab\n");
  EXPECT_EQ(batch_stats_csv({{1, 0.5, 0.1}, {16, 0.25, 0.2}}, "ab"),
            "batch_size,miou,ece,config_hash\n1,0.500000,0.100000,ab\n16,0.250000,0.200000,ab\n");
}

TEST(ReportSchema, DocumentRoundTrips) {
  const auto doc = report_document("main", "00000000000000ff", fixture());
  EXPECT_TRUE(validate_report_document(doc).empty());
  const nlohmann::json reparsed = nlohmann::json::parse(doc.dump());
  const auto back = parse_report_document(reparsed);
  ASSERT_EQ(back.size(), 4u);
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(fixture()));
  EXPECT_FALSE(back[0].per_class_iou[1].has_value());
}

TEST(ReportSchema, RejectsMalformedDocuments) {
  const auto good = report_document("main", "h", fixture());
  auto expect_error = [](nlohmann::json doc, const std::string& fragment) {
    const auto errors = validate_report_document(doc);
    bool found = false;
    for (const auto& e : errors) found = found || e.find(fragment) != std::string::npos;
    EXPECT_TRUE(found) << fragment << " not in " << nlohmann::json(errors).dump();
    EXPECT_THROW(parse_report_document(doc), ReportError);
  };
  auto d = good;
  d["format"] = "other";
  expect_error(d, "$.format");
  d = good;
  d["reports"][0]["miou"] = 1.5;
  expect_error(d, "$.reports[0].miou");
  d = good;
  d["reports"][1].erase("method");
  expect_error(d, "$.reports[1].method");
  d = good;
  d["reports"][2]["per_class_iou"][0] = "x";
  expect_error(d, "$.reports[2].per_class_iou[0]");
  d = good;
  d["reports"][0]["extra"] = 1;
  expect_error(d, "$.reports[0].extra");
  d = good;
  d["reports"][0]["domain"] = {{"kind", "nonsense"}};
  expect_error(d, "$.reports[0].domain");
  d = good;
  d["reports"] = 3;
  expect_error(d, "$.reports");
}

TEST(ReportTable, GoldenMarkdown) {
  EXPECT_EQ(markdown_table(fixture()),
            "| Method | source | fog-2 | Avg. |\n"
            "|---|---:|---:|---:|\n"
            "| pretrained | 90.0 | 50.0 | 70.0 |\n"
            "| instcal-u | 88.0 | 81.2 | 84.6 |\n");
}

TEST(ReportTable, SingleReportSingleRow) {
  EXPECT_EQ(markdown_table({make_report("m", DomainSpec::corrupted("contrast", 1), 0.25)}),
            "| Method | contrast-1 | Avg. |\n|---|---:|---:|\n| m | 25.0 | 25.0 |\n");
}

TEST(ReportTable, AverageIsMeanOfPresentColumns) {
  std::vector<MetricsReport> r = fixture();
  r.push_back(make_report("other", DomainSpec::corrupted("fog", 2), 0.3));
  const std::string t = markdown_table(r);
  EXPECT_NE(t.find("| other | - | 30.0 | 30.0 |"), std::string::npos) << t;
}

TEST(ReportTable, InconsistentClassCountsThrow) {
  std::vector<MetricsReport> r = fixture();
  r.push_back(make_report("x", DomainSpec::identity(), 0.5, 4));
  EXPECT_THROW(markdown_table(r), ReportError);
  EXPECT_THROW(markdown_table({}), ReportError);
}

TEST(ReportFiles, LoadReportsFromDirectory) {
  const auto dir = std::filesystem::temp_directory_path() / "instcal_report_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "b");
  auto f = fixture();
  write_text(dir / "a.json", report_document("main", "h", {f[0], f[1]}).dump());
  write_text(dir / "b" / "report.json", report_document("main", "h", {f[2], f[3]}).dump());
  write_text(dir / "resolved_config.json", "{\"not\": \"a report\"}");
  const auto loaded = load_reports(dir);
  EXPECT_EQ(nlohmann::json(loaded), nlohmann::json(f));
  write_text(dir / "c.json", "{\"format\": 1}");
  EXPECT_THROW(load_reports(dir), ReportError);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_reports(dir), ReportError);
}

TEST(Config, DefaultParsesAndMatchesLibraryDefaults) {
  const PipelineConfig c = parse_config(default_config());
  EXPECT_EQ(c.model.widths, (std::vector<std::size_t>{16, 32, 32, 16}));
  EXPECT_EQ(c.instcal.basis_count, 8u);
  EXPECT_EQ(c.instcal.train.total_iters, 4000u);
  EXPECT_EQ(c.instcal.train.batch_size, 1u);
  EXPECT_EQ(c.instcal.train.augmentation, DomainKind::NetPerturb);
  EXPECT_DOUBLE_EQ(c.instcal.train.momentum, 0.9);
  EXPECT_DOUBLE_EQ(c.instcal.train.weight_decay, 5e-4);
  EXPECT_EQ(c.eval.m_values.size(), 11u);
  EXPECT_EQ(c.eval.domains.size(), 16u);
  EXPECT_EQ(c.eval.entropy_steps, 1u);
  EXPECT_DOUBLE_EQ(c.eval.entropy_lr, 1e-3);
  EXPECT_EQ(c.pretrain.augmentation, DomainKind::Identity);
}

TEST(Config, VariantSelectsLearningRate) {
  nlohmann::json j = default_config();
  PipelineConfig c = parse_config(j);
  EXPECT_DOUBLE_EQ(c.instcal.train_config().lr, c.instcal.lr_u);
  EXPECT_TRUE(std::holds_alternative<InstCalU>(c.instcal.norm_variant()));
  apply_override(j, "instcal.variant=c");
  apply_override(j, "instcal.basis_count=3");
  c = parse_config(j);
  EXPECT_DOUBLE_EQ(c.instcal.train_config().lr, c.instcal.lr_c);
  EXPECT_EQ(std::get<InstCalC>(c.instcal.norm_variant()).basis_count, 3u);
}

TEST(Config, StrictParsing) {
  nlohmann::json j = default_config();
  j["pretrain"].erase("total_iters");
  try {
    parse_config(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("total_iters"), std::string::npos);
  }
  j = default_config();
  j["eval"]["surprise"] = 1;
  EXPECT_THROW(parse_config(j), ConfigError);
  j = default_config();
  j["instcal"]["augmentation"] = "fog";
  EXPECT_THROW(parse_config(j), ConfigError);
  j = default_config();
  j["eval"]["domains"] = {"fog-9"};
  EXPECT_THROW(parse_config(j), ConfigError);
  j = default_config();
  j["pretrain"]["total_iters"] = 0;
  EXPECT_THROW(parse_config(j), ConfigError);
  j = default_config();
  j["pretrain"]["batch_size"] = -2;
  EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(Config, Overrides) {
  nlohmann::json j = default_config();
  apply_override(j, "pretrain.lr=0.02");
  apply_override(j, "eval.domains=[\"fog-1\"]");
  apply_override(j, "instcal.augmentation=augmix");
  const PipelineConfig c = parse_config(j);
  EXPECT_DOUBLE_EQ(c.pretrain.lr, 0.02);
  ASSERT_EQ(c.eval.domains.size(), 1u);
  EXPECT_EQ(c.instcal.train.augmentation, DomainKind::AugMixStyle);
  EXPECT_THROW(apply_override(j, "pretrain.nope=1"), ConfigError);
  EXPECT_THROW(apply_override(j, "pretrain.total_iters=abc"), ConfigError);
  EXPECT_THROW(apply_override(j, "pretrain.total_iters=1.5"), ConfigError);
  EXPECT_THROW(apply_override(j, "noequals"), ConfigError);
  EXPECT_THROW(apply_override(j, "pretrain=3"), ConfigError);
}

TEST(Config, HashIsCanonical) {
  const nlohmann::json a = default_config();
  nlohmann::json b = nlohmann::json::parse(a.dump(4));
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  apply_override(b, "seed=1");
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}
